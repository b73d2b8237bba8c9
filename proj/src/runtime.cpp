#include "seriex/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "seriex/numeric.hpp"

namespace seriex {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Datasets

void Dataset::validate() const {
  require(features.rows == labels.size(), ErrorKind::ShapeMismatch,
          "dataset: " + std::to_string(features.rows) + " feature rows but " + std::to_string(labels.size()) +
              " labels");
  require(split.size() == labels.size(), ErrorKind::ShapeMismatch, "dataset: split tags do not match sample count");
  for (int l : labels)
    require(l >= 0 && static_cast<std::size_t>(l) < num_classes, ErrorKind::ShapeMismatch,
            "dataset: label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
  check_finite(features.data, "dataset features");
}

bool Dataset::has(Split s) const { return std::find(split.begin(), split.end(), s) != split.end(); }

Dataset Dataset::select(Split s) const {
  Dataset out;
  out.num_classes = num_classes;
  out.source = source;
  std::vector<double> values;
  for (std::size_t r = 0; r < size(); ++r) {
    if (split[r] != s) continue;
    values.insert(values.end(), features.data.begin() + static_cast<std::ptrdiff_t>(r * features.cols),
                  features.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * features.cols));
    out.labels.push_back(labels[r]);
    out.split.push_back(s);
  }
  out.features = Matrix(out.labels.size(), features.cols, std::move(values));
  return out;
}

namespace {

Dataset load_csv(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "input not found: " + path.string());
  Dataset d;
  d.source = "csv";
  std::optional<std::size_t> classes, test_from;
  std::vector<double> values;
  std::size_t cols = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string tok;
      while (ss >> tok) {
        if (tok.rfind("classes=", 0) == 0) classes = std::stoul(tok.substr(8));
        if (tok.rfind("test_from=", 0) == 0) test_from = std::stoul(tok.substr(10));
      }
      continue;
    }
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      require(end != cell.c_str() && std::string_view(end).find_first_not_of(" \t") == std::string_view::npos,
              ErrorKind::Format, path.string() + ":" + std::to_string(line_no) + ": not a number: '" + cell + "'");
      row.push_back(v);
    }
    require(row.size() >= 2, ErrorKind::Format,
            path.string() + ":" + std::to_string(line_no) + ": need at least one feature and a label");
    if (cols == 0) cols = row.size() - 1;
    require(row.size() - 1 == cols, ErrorKind::Format,
            path.string() + ":" + std::to_string(line_no) + ": ragged row");
    const double label = row.back();
    require(label >= 0 && label == std::floor(label), ErrorKind::Format,
            path.string() + ":" + std::to_string(line_no) + ": label must be a non-negative integer");
    d.labels.push_back(static_cast<int>(label));
    values.insert(values.end(), row.begin(), row.end() - 1);
  }
  d.features = Matrix(d.labels.size(), cols, std::move(values));
  int max_label = -1;
  for (int l : d.labels) max_label = std::max(max_label, l);
  d.num_classes = classes ? *classes : static_cast<std::size_t>(max_label + 1);
  d.split.assign(d.labels.size(), Split::Train);
  if (test_from)
    for (std::size_t r = std::min(*test_from, d.size()); r < d.size(); ++r) d.split[r] = Split::Test;
  d.validate();
  return d;
}

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "input not found: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Dataset load_idx(const fs::path& images, const std::optional<fs::path>& labels_path) {
  require(labels_path.has_value(), ErrorKind::InvalidArgument, "idx datasets need a labels file");
  const auto img = read_bytes(images);
  const auto lab = read_bytes(*labels_path);
  require(img.size() >= 16 && read_be32(img, 0) == 0x00000803, ErrorKind::Format,
          images.string() + ": bad magic, expected an idx3-ubyte image file");
  require(lab.size() >= 8 && read_be32(lab, 0) == 0x00000801, ErrorKind::Format,
          labels_path->string() + ": bad magic, expected an idx1-ubyte label file");
  const std::size_t n = read_be32(img, 4), h = read_be32(img, 8), w = read_be32(img, 12);
  require(read_be32(lab, 4) == n, ErrorKind::ShapeMismatch, "idx: image and label counts differ");
  require(img.size() == 16 + n * h * w, ErrorKind::Format, images.string() + ": payload length mismatch");
  require(lab.size() == 8 + n, ErrorKind::Format, labels_path->string() + ": payload length mismatch");
  Dataset d;
  d.source = "idx";
  d.features = Matrix(n, h * w);
  for (std::size_t i = 0; i < n * h * w; ++i) d.features.data[i] = img[16 + i] / 255.0;
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels.push_back(lab[8 + i]);
    max_label = std::max(max_label, d.labels.back());
  }
  d.num_classes = static_cast<std::size_t>(max_label + 1);
  d.split.assign(n, Split::Train);
  d.validate();
  return d;
}

}  // namespace

DatasetFormat dataset_format_from_path(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".idx" || ext == ".ubyte" || path.filename().string().find("idx") != std::string::npos)
    return DatasetFormat::Idx;
  return DatasetFormat::Csv;
}

Dataset load_dataset(const fs::path& path, DatasetFormat format, const std::optional<fs::path>& labels_path) {
  return format == DatasetFormat::Csv ? load_csv(path) : load_idx(path, labels_path);
}

void save_csv(const Dataset& d, const fs::path& path) {
  d.validate();
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open for writing: " + path.string());
  std::size_t test_from = d.size();
  for (std::size_t r = 0; r < d.size(); ++r)
    if (d.split[r] == Split::Test) {
      test_from = r;
      break;
    }
  for (std::size_t r = test_from; r < d.size(); ++r)
    require(d.split[r] == Split::Test, ErrorKind::InvalidArgument,
            "save_csv: test samples must follow all training samples");
  out << "# seriex-dataset classes=" << d.num_classes << " test_from=" << test_from << "\n";
  out << std::setprecision(17);
  for (std::size_t r = 0; r < d.size(); ++r) {
    for (std::size_t c = 0; c < d.features.cols; ++c) out << d.features(r, c) << ",";
    out << d.labels[r] << "\n";
  }
  require(static_cast<bool>(out), ErrorKind::Io, "write failed: " + path.string());
}

Dataset make_blobs(std::size_t classes, std::size_t dim, std::size_t samples, std::uint64_t seed) {
  require(classes >= 1 && dim >= 1 && samples >= 1, ErrorKind::InvalidArgument, "make_blobs: counts must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> box(-4.0, 4.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  constexpr double kMinSeparation = 4.0;

  std::vector<std::vector<double>> centers;
  std::size_t attempts = 0;
  double half = 4.0;
  while (centers.size() < classes) {
    std::vector<double> c(dim);
    for (double& v : c) v = box(rng) * (half / 4.0);
    bool ok = true;
    for (const auto& o : centers) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < dim; ++k) d2 += (c[k] - o[k]) * (c[k] - o[k]);
      ok = ok && std::sqrt(d2) >= kMinSeparation;
    }
    if (ok) centers.push_back(std::move(c));
    if (++attempts % 1000 == 0) half *= 1.5;  // crowded box: widen it
  }

  std::vector<std::size_t> order(samples);
  for (std::size_t i = 0; i < samples; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  Dataset d;
  d.source = "blobs";
  d.num_classes = classes;
  d.features = Matrix(samples, dim);
  d.labels.resize(samples);
  d.split.resize(samples);
  const std::size_t test_from = samples - samples / 5;
  for (std::size_t r = 0; r < samples; ++r) {
    const std::size_t cls = order[r] % classes;
    d.labels[r] = static_cast<int>(cls);
    for (std::size_t k = 0; k < dim; ++k) d.features(r, k) = centers[cls][k] + noise(rng);
    d.split[r] = r < test_from ? Split::Train : Split::Test;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Fixture models

ArchSpec ArchSpec::mlp(std::vector<std::size_t> widths) {
  require(widths.size() >= 2, ErrorKind::InvalidArgument, "mlp needs at least input and output widths");
  for (auto w : widths) require(w >= 1, ErrorKind::InvalidArgument, "mlp widths must be >= 1");
  ArchSpec a;
  a.kind = Kind::Mlp;
  a.widths = std::move(widths);
  a.classes = a.widths.back();
  return a;
}

ArchSpec ArchSpec::smallconv(Shape input, std::size_t filters, std::size_t kernel, std::size_t classes) {
  require(input.size() == 3 && element_count(input) > 0, ErrorKind::InvalidArgument, "smallconv input must be C x H x W");
  require(filters >= 1 && kernel >= 1 && classes >= 1, ErrorKind::InvalidArgument, "smallconv counts must be >= 1");
  ArchSpec a;
  a.kind = Kind::SmallConv;
  a.input = std::move(input);
  a.filters = filters;
  a.kernel = kernel;
  a.classes = classes;
  return a;
}

namespace {

std::vector<std::size_t> split_counts(const std::string& s, char sep) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) {
    require(!tok.empty() && tok.find_first_not_of("0123456789") == std::string::npos, ErrorKind::InvalidArgument,
            "bad architecture component '" + tok + "'");
    out.push_back(std::stoul(tok));
  }
  return out;
}

}  // namespace

ArchSpec ArchSpec::parse(const std::string& text) {
  const auto colon = text.find(':');
  require(colon != std::string::npos, ErrorKind::InvalidArgument, "architecture must look like mlp:2-16-16-3");
  const auto kind = text.substr(0, colon), rest = text.substr(colon + 1);
  if (kind == "mlp") return mlp(split_counts(rest, '-'));
  if (kind == "smallconv") {
    const auto dash = rest.find('-');
    require(dash != std::string::npos, ErrorKind::InvalidArgument, "smallconv:CxHxW-filters-kernel-classes");
    const auto in = split_counts(rest.substr(0, dash), 'x');
    const auto tail = split_counts(rest.substr(dash + 1), '-');
    require(tail.size() == 3, ErrorKind::InvalidArgument, "smallconv:CxHxW-filters-kernel-classes");
    return smallconv(in, tail[0], tail[1], tail[2]);
  }
  fail(ErrorKind::Unsupported, "unknown architecture '" + kind + "'");
}

std::string ArchSpec::describe() const {
  std::string s;
  if (kind == Kind::Mlp) {
    s = "mlp:";
    for (std::size_t i = 0; i < widths.size(); ++i) s += (i ? "-" : "") + std::to_string(widths[i]);
    return s;
  }
  return "smallconv:" + std::to_string(input[0]) + "x" + std::to_string(input[1]) + "x" + std::to_string(input[2]) +
         "-" + std::to_string(filters) + "-" + std::to_string(kernel) + "-" + std::to_string(classes);
}

ModelManifest init_model(const ArchSpec& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelManifest m;
  m.name = arch.describe();
  auto add_param = [&](const std::string& layer, Shape shape, std::size_t fan_in, LayerDesc& desc) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<double> w(element_count(shape));
    for (double& v : w) v = u(rng);
    const std::size_t out = shape[0];
    m.blobs[layer + ".weight"] = Tensor::from_f64(std::move(shape), w);
    m.blobs[layer + ".bias"] = Tensor::from_f64({out}, std::vector<double>(out, 0.0));
    desc.params = {{"weight", layer + ".weight"}, {"bias", layer + ".bias"}};
  };

  if (arch.kind == ArchSpec::Kind::Mlp) {
    m.input_shape = {arch.widths.front()};
    for (std::size_t i = 0; i + 1 < arch.widths.size(); ++i) {
      LayerDesc fc{LayerKind::Linear, "fc" + std::to_string(i + 1), {}, 1, 0};
      add_param(fc.name, {arch.widths[i + 1], arch.widths[i]}, arch.widths[i], fc);
      m.layers.push_back(fc);
      if (i + 2 < arch.widths.size()) m.layers.push_back({LayerKind::ReLU, "relu" + std::to_string(i + 1), {}, 1, 0});
    }
  } else {
    m.input_shape = arch.input;
    LayerDesc conv{LayerKind::Conv2d, "conv1", {}, 1, arch.kernel / 2};
    add_param(conv.name, {arch.filters, arch.input[0], arch.kernel, arch.kernel},
              arch.input[0] * arch.kernel * arch.kernel, conv);
    m.layers.push_back(conv);
    m.layers.push_back({LayerKind::ReLU, "relu1", {}, 1, 0});
    m.layers.push_back({LayerKind::Flatten, "flatten", {}, 1, 0});
    const auto conv_out = m.output_shapes().back();
    LayerDesc fc{LayerKind::Linear, "fc1", {}, 1, 0};
    add_param(fc.name, {arch.classes, element_count(conv_out)}, element_count(conv_out), fc);
    m.layers.push_back(fc);
  }
  m.layers.push_back({LayerKind::Softmax, "softmax", {}, 1, 0});
  m.output_shapes();
  m.metadata["arch"] = arch.describe();
  m.metadata["init_seed"] = seed;
  return m;
}

FpTrace fp_forward(const ModelManifest& m, const Matrix& batch) {
  require(batch.cols == element_count(m.input_shape), ErrorKind::ShapeMismatch,
          "batch has " + std::to_string(batch.cols) + " features, model expects " + shape_string(m.input_shape));
  const auto shapes = m.output_shapes();
  FpTrace tr;
  Matrix x = batch;
  Shape in_shape = m.input_shape;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& desc = m.layers[l];
    if (is_matmul_layer(desc.kind)) {
      const auto& w = m.param(l, "weight");
      const auto bias = m.has_param(l, "bias") ? m.param(l, "bias").to_f64() : std::vector<double>{};
      x = float_layer_forward(desc.kind, w.to_matrix(), bias, x, in_shape, w.shape(), desc.stride, desc.padding);
    } else {
      if (desc.kind == LayerKind::Softmax) tr.logits = x;
      x = apply_elementwise_layer(desc.kind, x);
    }
    tr.layer_outputs.push_back(x);
    in_shape = shapes[l];
  }
  if (m.layers.empty() || m.layers.back().kind != LayerKind::Softmax) tr.logits = x;
  tr.output = std::move(x);
  return tr;
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = &m.data[r * m.cols];
    out[r] = static_cast<int>(std::max_element(row, row + m.cols) - row);
  }
  return out;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  require(predicted.size() == labels.size(), ErrorKind::ShapeMismatch, "accuracy: length mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

namespace {

Matrix rows_of(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), m.cols);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(&m.data[idx[i] * m.cols], m.cols, &out.data[i * m.cols]);
  return out;
}

/// Scatter-add of im2col columns back to images.
Matrix col2im(const Matrix& cols, std::size_t batch, const ConvGeometry& g) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), positions = oh * ow;
  Matrix img(batch, g.channels * g.height * g.width);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t ki = 0; ki < g.kh; ++ki)
        for (std::size_t kj = 0; kj < g.kw; ++kj) {
          const std::size_t row = (c * g.kh + ki) * g.kw + kj;
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
              const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
              if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(g.height) ||
                  x >= static_cast<std::ptrdiff_t>(g.width))
                continue;
              img(b, (c * g.height + static_cast<std::size_t>(y)) * g.width + static_cast<std::size_t>(x)) +=
                  cols(row, b * positions + oy * ow + ox);
            }
        }
  return img;
}

/// Mean cross-entropy over the batch; grad receives dL/dlogits.
double softmax_xent(const Matrix& logits, const std::vector<int>& labels, Matrix& grad) {
  grad = logits;
  softmax_rows(grad);
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(logits.rows);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto y = static_cast<std::size_t>(labels[r]);
    loss -= std::log(std::max(grad(r, y), 1e-300));
    grad(r, y) -= 1.0;
    for (std::size_t c = 0; c < grad.cols; ++c) grad(r, c) *= inv;
  }
  return loss * inv;
}

void sgd_step(ModelManifest& m, const std::vector<Matrix>& inputs, const std::vector<Shape>& in_shapes,
              Matrix grad, double lr) {
  for (std::size_t l = m.layers.size(); l-- > 0;) {
    const auto& desc = m.layers[l];
    const Matrix& x = inputs[l];
    switch (desc.kind) {
      case LayerKind::Softmax:
      case LayerKind::Flatten: break;
      case LayerKind::ReLU:
        for (std::size_t i = 0; i < grad.data.size(); ++i)
          if (x.data[i] <= 0.0) grad.data[i] = 0.0;
        break;
      case LayerKind::Linear:
      case LayerKind::Conv2d: {
        const Tensor& wt = m.param(l, "weight");
        const Shape wshape = wt.shape();
        Matrix w = wt.to_matrix();
        auto bias = m.param(l, "bias").to_f64();
        Matrix a, dy;  // a: inner x cols, dy: out x cols
        std::size_t positions = 1;
        ConvGeometry g;
        if (desc.kind == LayerKind::Linear) {
          a = transpose(x);
          dy = transpose(grad);
        } else {
          const auto& s = in_shapes[l];
          g = {s[0], s[1], s[2], wshape[2], wshape[3], desc.stride, desc.padding};
          positions = g.out_h() * g.out_w();
          a = im2col(x, g);
          dy = Matrix(wshape[0], x.rows * positions);
          for (std::size_t b = 0; b < x.rows; ++b)
            for (std::size_t o = 0; o < wshape[0]; ++o)
              for (std::size_t p = 0; p < positions; ++p) dy(o, b * positions + p) = grad(b, o * positions + p);
        }
        const Matrix dw = matmul(dy, transpose(a));
        const Matrix da = matmul(transpose(w), dy);
        for (std::size_t o = 0; o < dy.rows; ++o) {
          double db = 0.0;
          for (std::size_t c = 0; c < dy.cols; ++c) db += dy(o, c);
          bias[o] -= lr * db;
        }
        for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] -= lr * dw.data[i];
        check_finite(w.data, "training diverged: weights");
        m.blobs[desc.params.at("weight")] = Tensor::from_f64(wshape, w.data);
        m.blobs[desc.params.at("bias")] = Tensor::from_f64({bias.size()}, bias);
        grad = desc.kind == LayerKind::Linear ? transpose(da) : col2im(da, x.rows, g);
        break;
      }
    }
  }
}

}  // namespace

ModelManifest train_fixture(const ArchSpec& arch, const Dataset& data, const TrainOptions& opts) {
  data.validate();
  require(opts.batch_size >= 1 && opts.learning_rate > 0.0, ErrorKind::InvalidArgument,
          "train: batch size and learning rate must be positive");
  ModelManifest m = init_model(arch, opts.seed);
  require(data.features.cols == element_count(m.input_shape), ErrorKind::ShapeMismatch,
          "train: dataset has " + std::to_string(data.features.cols) + " features, architecture expects " +
              shape_string(m.input_shape));
  require(data.num_classes <= element_count(m.output_shape()), ErrorKind::ShapeMismatch,
          "train: more classes than model outputs");
  const Dataset train = data.has(Split::Train) ? data.select(Split::Train) : data;
  require(train.size() > 0, ErrorKind::ShapeMismatch, "train: no training samples");

  std::vector<Shape> in_shapes{m.input_shape};
  for (const auto& s : m.output_shapes()) in_shapes.push_back(s);

  std::mt19937_64 rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  double last_loss = 0.0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(order.size(), start + opts.batch_size)));
      const Matrix xb = rows_of(train.features, idx);
      std::vector<int> yb;
      for (auto i : idx) yb.push_back(train.labels[i]);
      const auto tr = fp_forward(m, xb);
      std::vector<Matrix> inputs{xb};
      for (std::size_t l = 0; l + 1 < tr.layer_outputs.size(); ++l) inputs.push_back(tr.layer_outputs[l]);
      Matrix grad;
      last_loss = softmax_xent(tr.logits, yb, grad);
      require(std::isfinite(last_loss), ErrorKind::NonFinite,
              "training diverged: loss is not finite at epoch " + std::to_string(epoch));
      sgd_step(m, inputs, in_shapes, std::move(grad), opts.learning_rate);
    }
  }

  m.metadata["arch"] = arch.describe();
  m.metadata["epochs"] = opts.epochs;
  m.metadata["seed"] = opts.seed;
  m.metadata["learning_rate"] = opts.learning_rate;
  m.metadata["batch_size"] = opts.batch_size;
  m.metadata["final_loss"] = last_loss;
  m.metadata["train_accuracy"] = accuracy(argmax_rows(fp_forward(m, train.features).logits), train.labels);
  if (data.has(Split::Test)) {
    const auto test = data.select(Split::Test);
    m.metadata["test_accuracy"] = accuracy(argmax_rows(fp_forward(m, test.features).logits), test.labels);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation

json EvalReport::to_json(bool include_probe) const {
  json j;
  j["report_version"] = 1;
  j["model_id"] = model_id;
  j["model_kind"] = model_kind;
  j["policy"] = policy ? policy_to_json(*policy) : json(nullptr);
  j["act_terms"] = act_terms;
  j["split"] = split;
  j["samples"] = samples;
  j["accuracy"] = accuracy;
  j["fp_accuracy"] = fp_accuracy;
  j["max_logit_diff"] = max_logit_diff;
  j["pair_count_total"] = pair_count_total;
  json terms = json::array();
  for (const auto& t : term_counts)
    terms.push_back({{"layer", t.layer},
                     {"name", t.name},
                     {"bits", t.bits},
                     {"weight_terms", t.weight_terms},
                     {"act_terms", t.act_terms},
                     {"pairs", t.pairs}});
  j["term_counts"] = terms;
  if (include_probe) j["probe"] = {{"per_layer_max_diff", layer_max_diff}};
  json tm = json::object();
  for (const auto& [k, v] : timings) tm[k] = v;
  j["timings"] = tm;
  return j;
}

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

Dataset eval_split(const Dataset& data, const EvalOptions& opts, std::string& name) {
  data.validate();
  if (opts.split) {
    name = *opts.split == Split::Test ? "test" : "train";
    return data.select(*opts.split);
  }
  if (data.has(Split::Test)) {
    name = "test";
    return data.select(Split::Test);
  }
  name = "all";
  return data;
}

void check_eval_inputs(const Dataset& d, const ModelManifest& m) {
  require(d.size() > 0, ErrorKind::ShapeMismatch, "evaluation dataset is empty");
  require(d.features.cols == element_count(m.input_shape), ErrorKind::ShapeMismatch,
          "dataset has " + std::to_string(d.features.cols) + " features, model expects " +
              shape_string(m.input_shape));
  require(d.num_classes <= element_count(m.output_shape()), ErrorKind::ShapeMismatch,
          "dataset has more classes than the model has outputs");
}

Matrix probe_rows(const Matrix& m, std::size_t n) {
  const std::size_t rows = std::min(n, m.rows);
  return Matrix(rows, m.cols, std::vector<double>(m.data.begin(), m.data.begin() + static_cast<std::ptrdiff_t>(rows * m.cols)));
}

}  // namespace

EvalReport evaluate(const ModelManifest& m, const Dataset& data, const EvalOptions& opts) {
  EvalReport r;
  const Dataset d = eval_split(data, opts, r.split);
  check_eval_inputs(d, m);
  const auto t0 = clock_type::now();
  const auto tr = fp_forward(m, d.features);
  r.model_id = m.name;
  r.model_kind = "fp";
  r.samples = d.size();
  r.accuracy = r.fp_accuracy = accuracy(argmax_rows(tr.logits), d.labels);
  r.layer_max_diff.assign(m.layers.size(), 0.0);
  r.timings.emplace_back("forward", seconds_since(t0));
  return r;
}

EvalReport evaluate(const ExpandedModel& em, const Dataset& data, const EvalOptions& opts) {
  EvalReport r;
  const Dataset d = eval_split(data, opts, r.split);
  check_eval_inputs(d, em.source);
  r.model_id = em.source.name;
  r.model_kind = "expanded";
  r.policy = em.policy;
  r.samples = d.size();
  const std::size_t t = opts.act_terms ? opts.act_terms : em.policy.activation_terms_max;
  r.act_terms = t;

  auto t0 = clock_type::now();
  const auto fp = fp_forward(em.source, d.features);
  r.timings.emplace_back("fp_forward", seconds_since(t0));
  t0 = clock_type::now();
  const auto ex = forward_expanded(em, d.features, {t, opts.use_stop_rule});
  r.timings.emplace_back("expanded_forward", seconds_since(t0));
  r.timings.emplace_back("replica_reduce", ex.reduce_seconds);
  r.fp_accuracy = accuracy(argmax_rows(fp.logits), d.labels);
  r.accuracy = accuracy(argmax_rows(ex.logits), d.labels);

  // Differences on the probe batch: the leading rows of the evaluated split.
  const Matrix probe = probe_rows(d.features, opts.probe_size);
  const auto fp_p = fp_forward(em.source, probe);
  const auto ex_p = forward_expanded(em, probe, {t, opts.use_stop_rule});
  r.max_logit_diff = max_abs_diff(fp_p.logits.data, ex_p.logits.data);
  for (std::size_t l = 0; l < fp_p.layer_outputs.size(); ++l)
    r.layer_max_diff.push_back(max_abs_diff(fp_p.layer_outputs[l].data, ex_p.layer_outputs[l].data));

  for (std::size_t l = 0; l < em.layers.size(); ++l) {
    if (!em.layers[l]) continue;
    const auto& diag = ex.diagnostics[l];
    r.term_counts.push_back({l, em.layers[l]->name, em.layers[l]->bits, diag->weight_terms, diag->act_terms,
                             diag->pair_count});
  }
  r.pair_count_total = ex.total_pairs;
  return r;
}

json SweepResult::to_json() const {
  json j;
  j["report_version"] = 1;
  j["t_values"] = t_values;
  j["reports"] = json::array();
  for (const auto& r : reports) j["reports"].push_back(r.to_json());
  j["knee"] = knee ? json(*knee) : json(nullptr);
  j["monotone"] = monotone;
  j["violation"] = violation;
  return j;
}

std::string SweepResult::plot_data() const {
  std::ostringstream out;
  out << "# t accuracy max_diff\n" << std::setprecision(17);
  for (std::size_t i = 0; i < reports.size(); ++i)
    out << t_values[i] << " " << reports[i].accuracy << " " << reports[i].max_logit_diff << "\n";
  return out.str();
}

SweepResult sweep_expansions(const ModelManifest& m, const Dataset& data, const ExpansionPolicy& policy,
                             const std::vector<std::size_t>& t_range, const SweepOptions& opts) {
  require(!t_range.empty(), ErrorKind::InvalidArgument, "sweep: empty t range");
  for (auto t : t_range) require(t >= 1, ErrorKind::InvalidArgument, "sweep: t must be >= 1");
  ExpansionPolicy p = policy;
  p.activation_terms_max = *std::max_element(t_range.begin(), t_range.end());
  const auto t0 = clock_type::now();
  const ExpandedModel em = expand_model(m, p);
  const double expand_seconds = seconds_since(t0);

  SweepResult out;
  for (std::size_t i = 0; i < t_range.size(); ++i) {
    EvalOptions eo = opts.eval;
    eo.act_terms = t_range[i];
    eo.use_stop_rule = false;
    EvalReport r;
    if (opts.fault_at && *opts.fault_at == i) {
      // Corrupt the scales of the first expanded layer.
      ScaleVector u(em.parameterized().size(), 1.0);
      u.front() = 1.5;
      r = evaluate(abelian_mul(u, em), data, eo);
    } else {
      r = evaluate(em, data, eo);
    }
    r.timings.emplace_back("expand", expand_seconds);
    out.t_values.push_back(t_range[i]);
    out.reports.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < out.reports.size(); ++i) {
    if (!out.knee && out.reports[i].max_logit_diff < opts.knee_threshold) out.knee = out.t_values[i];
    if (i > 0 && out.monotone && !(out.reports[i].max_logit_diff < out.reports[i - 1].max_logit_diff)) {
      out.monotone = false;
      std::ostringstream v;
      v << std::setprecision(6) << "t=" << out.t_values[i - 1] << " -> t=" << out.t_values[i] << ": max_diff "
        << out.reports[i - 1].max_logit_diff << " -> " << out.reports[i].max_logit_diff;
      out.violation = v.str();
    }
  }
  if (opts.assert_monotone && !out.monotone)
    fail(ErrorKind::Assertion, "max difference is not strictly decreasing in t (" + out.violation + ")");
  return out;
}

}  // namespace seriex
