#include "seriex/modelexpand.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "seriex/numeric.hpp"
#include "seriex/parallel.hpp"

namespace seriex {

BasisModel abelian_mul(const ScaleVector& u, const BasisModel& m) {
  require(u.size() == m.scales.size(), ErrorKind::ShapeMismatch,
          "abelian_mul: scale vector has " + std::to_string(u.size()) + " entries, model has " +
              std::to_string(m.scales.size()) + " parameterized layers");
  BasisModel out = m;
  for (std::size_t l = 0; l < u.size(); ++l) {
    require(std::isfinite(u[l]) && u[l] > 0.0, ErrorKind::InvalidArgument, "abelian_mul: factors must be positive");
    out.scales[l] = m.scales[l] * u[l];
  }
  return out;
}

Matrix abelian_add(const std::vector<Matrix>& outputs, const std::vector<double>& scales) {
  require(!outputs.empty(), ErrorKind::InvalidArgument, "abelian_add: no members");
  require(outputs.size() == scales.size(), ErrorKind::ShapeMismatch, "abelian_add: one scale per member required");
  for (const auto& o : outputs)
    require(o.rows == outputs[0].rows && o.cols == outputs[0].cols, ErrorKind::ShapeMismatch,
            "abelian_add: member shapes differ");
  Matrix out(outputs[0].rows, outputs[0].cols);
  ExactSum s;
  for (std::size_t e = 0; e < out.data.size(); ++e) {
    s.clear();
    for (std::size_t m = 0; m < outputs.size(); ++m) s.add_product(scales[m], outputs[m].data[e]);
    out.data[e] = s.result();
  }
  return out;
}

LatticeAccumulator abelian_add(const std::vector<LatticeAccumulator>& members) {
  require(!members.empty(), ErrorKind::InvalidArgument, "abelian_add: no members");
  LatticeAccumulator out = members[0];
  for (std::size_t m = 1; m < members.size(); ++m) out.merge(members[m]);
  return out;
}

std::vector<double> replication_weights(std::size_t n) {
  require(n >= 1, ErrorKind::InvalidArgument, "replication_weights: n must be >= 1");
  const double w = 1.0 / static_cast<double>(n);
  std::vector<double> out(n, w);
  ExactSum last;
  last.add(1.0);
  for (std::size_t i = 0; i + 1 < n; ++i) last.add(-w);
  out.back() = last.result();
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> ExpandedModel::parameterized() const {
  std::vector<std::size_t> idx;
  for (std::size_t l = 0; l < layers.size(); ++l)
    if (layers[l]) idx.push_back(l);
  return idx;
}

std::size_t basis_count(const ExpansionPolicy& p) {
  std::size_t w = p.weight_terms_max, a = p.activation_terms_max;
  if (!p.scheme_w.symmetric && p.mask.weight_bias) ++w;
  if (p.scheme_w.saturated && p.mask.weight_saturation) ++w;
  if (!p.scheme_a.symmetric && p.mask.act_bias) ++a;
  if (p.scheme_a.saturated && p.mask.act_saturation) ++a;
  return w * a;
}

std::vector<BasisModel> ExpandedModel::basis_models() const {
  ScaleVector scales;
  for (auto l : parameterized()) scales.push_back(layers[l]->multiplier);
  std::vector<int> ws, as;
  if (policy.scheme_w.saturated && policy.mask.weight_saturation) ws.push_back(-1);
  if (!policy.scheme_w.symmetric && policy.mask.weight_bias) ws.push_back(0);
  for (std::size_t i = 1; i <= policy.weight_terms_max; ++i) ws.push_back(static_cast<int>(i));
  if (policy.scheme_a.saturated && policy.mask.act_saturation) as.push_back(-1);
  if (!policy.scheme_a.symmetric && policy.mask.act_bias) as.push_back(0);
  for (std::size_t j = 1; j <= policy.activation_terms_max; ++j) as.push_back(static_cast<int>(j));
  std::vector<BasisModel> out;
  for (int i : ws)
    for (int j : as) out.push_back({i, j, scales});
  return out;
}

ExpandedModel expand_model(const ModelManifest& m, const ExpansionPolicy& policy) {
  policy.validate();
  m.output_shapes();
  ExpandedModel em;
  em.source = m;
  em.policy = policy;
  em.layers.resize(m.layers.size());
  const auto params = m.parameterized_layers();
  std::vector<std::size_t> todo;
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    if (is_matmul_layer(m.layers[l].kind)) todo.push_back(l);
  std::vector<std::optional<ExpandedLayer>> built(m.layers.size());
  parallel_for(todo.size(), [&](std::size_t n) {
    const std::size_t l = todo[n];
    int bits = policy.bits;
    const bool edge = !params.empty() && (l == params.front() || l == params.back());
    if (edge && policy.first_last_bits != 0) bits = policy.first_last_bits;
    built[l] = expand_layer_weights(m, l, policy, bits);
  });
  em.layers = std::move(built);
  em.basis_count = basis_count(policy);
  em.replication_factor = 1.0 / static_cast<double>(em.basis_count);
  return em;
}

ExpandedModel abelian_mul(const ScaleVector& u, const ExpandedModel& m) {
  const auto idx = m.parameterized();
  require(u.size() == idx.size(), ErrorKind::ShapeMismatch,
          "abelian_mul: scale vector has " + std::to_string(u.size()) + " entries, model has " +
              std::to_string(idx.size()) + " parameterized layers");
  ExpandedModel out = m;
  for (std::size_t n = 0; n < idx.size(); ++n) {
    require(std::isfinite(u[n]) && u[n] > 0.0, ErrorKind::InvalidArgument, "abelian_mul: factors must be positive");
    out.layers[idx[n]]->multiplier = m.layers[idx[n]]->multiplier * u[n];
  }
  return out;
}

void softmax_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    double* row = &m.data[r * m.cols];
    const double mx = *std::max_element(row, row + m.cols);
    double z = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < m.cols; ++c) row[c] /= z;
  }
}

Matrix apply_elementwise_layer(LayerKind kind, const Matrix& x) {
  Matrix out = x;
  switch (kind) {
    case LayerKind::ReLU:
      for (double& v : out.data) v = v > 0.0 ? v : 0.0;
      return out;
    case LayerKind::Flatten: return out;
    case LayerKind::Softmax: softmax_rows(out); return out;
    default: fail(ErrorKind::Unsupported, "apply_elementwise_layer: matmul layer");
  }
}

ModelForward forward_expanded(const ExpandedModel& em, const Matrix& batch, const ForwardOptions& opts) {
  const auto& src = em.source;
  require(batch.cols == element_count(src.input_shape), ErrorKind::ShapeMismatch,
          "batch has " + std::to_string(batch.cols) + " features, model expects " + shape_string(src.input_shape));
  const auto shapes = src.output_shapes();
  const std::size_t t = opts.act_terms ? opts.act_terms : em.policy.activation_terms_max;
  const auto weights = replication_weights(em.basis_count);

  ModelForward out;
  out.diagnostics.resize(src.layers.size());
  Matrix x = batch;
  Shape in_shape = src.input_shape;
  using clock = std::chrono::steady_clock;
  for (std::size_t l = 0; l < src.layers.size(); ++l) {
    const auto kind = src.layers[l].kind;
    if (kind == LayerKind::Softmax) {
      out.logits = x;
      x = apply_elementwise_layer(kind, x);
    } else if (is_matmul_layer(kind)) {
      const auto& el = *em.layers[l];
      auto f = forward_expanded_layer(el, x, in_shape, t, opts.use_stop_rule, em.reduce_plan);
      out.diagnostics[l] = f.diag;
      out.total_pairs += f.diag.pair_count;
      x = std::move(f.output);
    } else {
      // Non-matmul layer: every basis model runs its own copy; the copies are
      // weighted so that the reduced value is the layer output.
      const auto t0 = clock::now();
      std::vector<Matrix> replicas(weights.size());
      parallel_for(replicas.size(), [&](std::size_t n) { replicas[n] = apply_elementwise_layer(kind, x); });
      x = abelian_add(replicas, weights);
      out.reduce_seconds += std::chrono::duration<double>(clock::now() - t0).count();
    }
    out.layer_outputs.push_back(x);
    in_shape = shapes[l];
  }
  if (src.layers.empty() || src.layers.back().kind != LayerKind::Softmax) out.logits = x;
  out.output = std::move(x);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

const char* plan_name(ReducePlan p) { return p == ReducePlan::Tree ? "tree" : "flat"; }

ReducePlan plan_from_name(const std::string& s) {
  if (s == "flat") return ReducePlan::Flat;
  if (s == "tree") return ReducePlan::Tree;
  fail(ErrorKind::Format, "unknown reduce plan '" + s + "'");
}

std::string term_file(std::size_t layer, std::size_t term) {
  return "layer" + std::to_string(layer) + "_term" + std::to_string(term + 1) + ".sqtf";
}

}  // namespace

void save_expanded(const ExpandedModel& em, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::Io, "cannot create directory " + dir.string());
  save_model(em.source, dir / "source");

  nlohmann::json j;
  j["format"] = "seriex-expanded";
  j["version"] = 1;
  j["policy"] = policy_to_json(em.policy);
  j["basis_count"] = em.basis_count;
  j["replication_factor"] = em.replication_factor;
  j["reduce_plan"] = plan_name(em.reduce_plan);
  j["grid_shape"] = {em.policy.weight_terms_max, em.policy.activation_terms_max};
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < em.layers.size(); ++l) {
    if (!em.layers[l]) continue;
    const auto& el = *em.layers[l];
    const auto& w = el.weight;
    nlohmann::json lj;
    lj["index"] = l;
    lj["name"] = el.name;
    lj["kind"] = layer_kind_name(el.kind);
    lj["bits"] = el.bits;
    lj["weight_shape"] = el.weight_shape;
    lj["bias"] = el.bias;
    lj["has_bias"] = !el.bias.empty();
    lj["activation_scheme"] = scheme_to_json(el.activation_scheme);
    lj["policy"] = policy_to_json(el.policy);
    lj["stride"] = el.stride;
    lj["padding"] = el.padding;
    lj["multiplier"] = el.multiplier;
    lj["weight_scheme"] = scheme_to_json(w.scheme);
    lj["channels"] = w.channels;
    lj["channel_bias"] = w.bias;
    lj["nsy_present"] = w.nsy_present;
    nlohmann::json terms = nlohmann::json::array();
    for (std::size_t t = 0; t < w.terms.size(); ++t) {
      const auto file = term_file(l, t);
      write_tensor(Tensor::from_packed(w.source_shape, w.terms[t].digits, w.scheme.bits), dir / file);
      terms.push_back({{"scales", w.terms[t].scales}, {"digits", file}});
    }
    lj["terms"] = terms;
    if (w.saturation)
      lj["saturation"] = {{"indices", w.saturation->indices}, {"values", w.saturation->values}};
    layers.push_back(lj);
  }
  j["layers"] = layers;

  std::ofstream f(dir / "expanded.json");
  require(static_cast<bool>(f), ErrorKind::Io, "cannot write " + (dir / "expanded.json").string());
  f << j.dump(2) << "\n";
}

bool is_expanded_dir(const std::filesystem::path& dir) { return std::filesystem::exists(dir / "expanded.json"); }

ExpandedModel load_expanded(const std::filesystem::path& dir) {
  const auto path = dir / "expanded.json";
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::Io, "input not found: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
  require(j.value("format", "") == "seriex-expanded", ErrorKind::Format, path.string() + ": not an expanded model");
  require(j.value("version", 0) == 1, ErrorKind::Unsupported, path.string() + ": unsupported version");

  ExpandedModel em;
  try {
    em.source = load_model(dir / "source");
    em.policy = policy_from_json(j.at("policy"));
    em.basis_count = j.at("basis_count").get<std::size_t>();
    em.replication_factor = j.at("replication_factor").get<double>();
    em.reduce_plan = plan_from_name(j.at("reduce_plan").get<std::string>());
    em.layers.resize(em.source.layers.size());
    for (const auto& lj : j.at("layers")) {
      const auto l = lj.at("index").get<std::size_t>();
      require(l < em.layers.size() && is_matmul_layer(em.source.layers[l].kind), ErrorKind::Format,
              "expanded layer index " + std::to_string(l) + " does not name a matmul layer");
      ExpandedLayer el;
      el.kind = layer_kind_from_name(lj.at("kind").get<std::string>());
      el.name = lj.at("name").get<std::string>();
      el.bits = lj.at("bits").get<int>();
      el.weight_shape = lj.at("weight_shape").get<Shape>();
      el.bias = lj.at("bias").get<std::vector<double>>();
      el.activation_scheme = scheme_from_json(lj.at("activation_scheme"));
      el.policy = policy_from_json(lj.at("policy"));
      el.stride = lj.at("stride").get<std::size_t>();
      el.padding = lj.at("padding").get<std::size_t>();
      el.multiplier = lj.at("multiplier").get<double>();
      auto& w = el.weight;
      w.scheme = scheme_from_json(lj.at("weight_scheme"));
      w.source_shape = el.weight_shape;
      w.channels = lj.at("channels").get<std::size_t>();
      w.bias = lj.at("channel_bias").get<std::vector<double>>();
      w.nsy_present = lj.at("nsy_present").get<bool>();
      for (const auto& tj : lj.at("terms")) {
        const auto digits = read_tensor(dir / tj.at("digits").get<std::string>());
        require(digits.shape() == w.source_shape, ErrorKind::Format, "digit tensor shape mismatch");
        w.terms.push_back({tj.at("scales").get<std::vector<double>>(), digits.to_i32()});
      }
      if (lj.contains("saturation")) {
        w.saturation = SparseCorrection{lj["saturation"].at("indices").get<std::vector<std::size_t>>(),
                                        lj["saturation"].at("values").get<std::vector<double>>(), w.source_shape};
      }
      w.validate();
      em.layers[l] = std::move(el);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
  for (std::size_t l = 0; l < em.layers.size(); ++l)
    require(!is_matmul_layer(em.source.layers[l].kind) || em.layers[l].has_value(), ErrorKind::Format,
            "expanded model is missing layer " + std::to_string(l));
  return em;
}

}  // namespace seriex
