#include "seriex/tensorio.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

namespace seriex {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kMagicLen = 4;
constexpr const char* kModelFile = "model.json";

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "input not found: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  json header;
  header["dtype"] = dtype_name(t.dtype());
  header["shape"] = t.shape();
  header["layout"] = "row-major";
  header["bits"] = packed_bits(t.dtype());
  header["channel_axis"] = t.channel_axis() ? json(*t.channel_axis()) : json(nullptr);
  header["payload_bytes"] = t.payload().size();
  const std::string text = std::string(kTensorMagic) + "\n" + header.dump() + "\n";

  std::vector<std::uint8_t> out(text.begin(), text.end());
  out.insert(out.end(), t.payload().begin(), t.payload().end());
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagicLen + 1 || std::memcmp(bytes.data(), kTensorMagic, kMagicLen) != 0 ||
      bytes[kMagicLen] != '\n') {
    fail(ErrorKind::Format, "bad magic: not an SQTF tensor file");
  }
  const auto begin = bytes.begin() + kMagicLen + 1;
  const auto eol = std::find(begin, bytes.end(), std::uint8_t{'\n'});
  if (eol == bytes.end()) fail(ErrorKind::Format, "unterminated SQTF header");

  json header;
  try {
    header = json::parse(begin, eol);
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed SQTF header: ") + e.what());
  }

  Shape shape;
  std::string dtype_str;
  std::optional<std::size_t> channel_axis;
  std::size_t declared = 0;
  int bits = 0;
  try {
    dtype_str = header.at("dtype").get<std::string>();
    shape = header.at("shape").get<Shape>();
    if (header.at("layout").get<std::string>() != "row-major")
      fail(ErrorKind::Unsupported, "unsupported layout " + header.at("layout").dump());
    bits = header.at("bits").get<int>();
    if (!header.at("channel_axis").is_null()) channel_axis = header.at("channel_axis").get<std::size_t>();
    declared = header.at("payload_bytes").get<std::size_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("incomplete SQTF header: ") + e.what());
  }
  const DType dtype = dtype_from_name(dtype_str);
  require(bits == packed_bits(dtype), ErrorKind::Format, "header bits disagree with dtype " + dtype_str);

  const auto expected = payload_size(dtype, element_count(shape));
  const auto available = static_cast<std::size_t>(bytes.end() - (eol + 1));
  if (declared != expected || available != expected) {
    fail(ErrorKind::Format, "payload length mismatch: header declares " + std::to_string(declared) + ", shape needs " +
                                std::to_string(expected) + ", file has " + std::to_string(available));
  }
  return Tensor(std::move(shape), dtype, std::vector<std::uint8_t>(eol + 1, bytes.end()), channel_axis);
}

void write_tensor(const Tensor& t, const fs::path& path) { write_file(path, encode_tensor(t)); }

Tensor read_tensor(const fs::path& path) { return decode_tensor(read_file(path)); }

// ---------------------------------------------------------------------------
// model manifest

std::string_view layer_kind_name(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::Linear: return "linear";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Softmax: return "softmax";
  }
  return "unknown";
}

LayerKind layer_kind_from_name(std::string_view name) {
  for (LayerKind k : {LayerKind::Linear, LayerKind::Conv2d, LayerKind::ReLU, LayerKind::Flatten, LayerKind::Softmax})
    if (layer_kind_name(k) == name) return k;
  fail(ErrorKind::Unsupported, "unsupported layer kind '" + std::string(name) + "'");
}

bool is_matmul_layer(LayerKind kind) noexcept { return kind == LayerKind::Linear || kind == LayerKind::Conv2d; }

bool ModelManifest::has_param(std::size_t layer, const std::string& role) const {
  return layers.at(layer).params.contains(role);
}

const Tensor& ModelManifest::param(std::size_t layer, const std::string& role) const {
  const auto& desc = layers.at(layer);
  auto ref = desc.params.find(role);
  if (ref == desc.params.end()) fail(ErrorKind::Format, "layer '" + desc.name + "' has no parameter '" + role + "'");
  auto blob = blobs.find(ref->second);
  if (blob == blobs.end())
    fail(ErrorKind::Format, "dangling tensor reference '" + ref->second + "' in layer '" + desc.name + "'");
  return blob->second;
}

std::vector<Shape> ModelManifest::output_shapes() const {
  std::vector<Shape> out;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " ('" + l.name + "')";
    switch (l.kind) {
      case LayerKind::Linear: {
        const auto& w = param(i, "weight");
        require(w.rank() == 2, ErrorKind::ShapeMismatch, where + ": linear weight must be rank 2");
        require(cur.size() == 1 && cur[0] == w.shape()[1], ErrorKind::ShapeMismatch,
                where + ": input " + shape_string(cur) + " does not compose with weight " + shape_string(w.shape()));
        if (has_param(i, "bias"))
          require(param(i, "bias").size() == w.shape()[0], ErrorKind::ShapeMismatch, where + ": bias length");
        cur = {w.shape()[0]};
        break;
      }
      case LayerKind::Conv2d: {
        const auto& w = param(i, "weight");
        require(w.rank() == 4, ErrorKind::ShapeMismatch, where + ": conv2d weight must be rank 4");
        require(cur.size() == 3 && cur[0] == w.shape()[1], ErrorKind::ShapeMismatch,
                where + ": input " + shape_string(cur) + " does not compose with weight " + shape_string(w.shape()));
        require(l.stride >= 1, ErrorKind::InvalidArgument, where + ": stride must be >= 1");
        const std::size_t kh = w.shape()[2], kw = w.shape()[3];
        require(cur[1] + 2 * l.padding >= kh && cur[2] + 2 * l.padding >= kw, ErrorKind::ShapeMismatch,
                where + ": kernel larger than padded input");
        if (has_param(i, "bias"))
          require(param(i, "bias").size() == w.shape()[0], ErrorKind::ShapeMismatch, where + ": bias length");
        cur = {w.shape()[0], (cur[1] + 2 * l.padding - kh) / l.stride + 1, (cur[2] + 2 * l.padding - kw) / l.stride + 1};
        break;
      }
      case LayerKind::Flatten: cur = {element_count(cur)}; break;
      case LayerKind::ReLU:
      case LayerKind::Softmax: break;
    }
    out.push_back(cur);
  }
  return out;
}

Shape ModelManifest::output_shape() const {
  auto shapes = output_shapes();
  return shapes.empty() ? input_shape : shapes.back();
}

std::vector<std::size_t> ModelManifest::parameterized_layers() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (is_matmul_layer(layers[i].kind)) idx.push_back(i);
  return idx;
}

json manifest_to_json(const ModelManifest& m) {
  json j;
  j["format"] = "seriex-model";
  j["version"] = 1;
  j["name"] = m.name;
  j["input_shape"] = m.input_shape;
  j["layers"] = json::array();
  for (const auto& l : m.layers) {
    json jl;
    jl["kind"] = layer_kind_name(l.kind);
    jl["name"] = l.name;
    jl["params"] = l.params;
    if (l.kind == LayerKind::Conv2d) {
      jl["stride"] = l.stride;
      jl["padding"] = l.padding;
    }
    j["layers"].push_back(jl);
  }
  j["tensor_blobs"] = json::object();
  for (const auto& [name, t] : m.blobs) j["tensor_blobs"][name] = name + ".sqtf";
  j["metadata"] = m.metadata;
  return j;
}

void save_model(const ModelManifest& m, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create directory " + dir.string() + ": " + ec.message());
  for (const auto& [name, t] : m.blobs) write_tensor(t, dir / (name + ".sqtf"));
  const std::string text = manifest_to_json(m).dump(2) + "\n";
  write_file(dir / kModelFile, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ModelManifest load_model(const fs::path& dir) {
  const auto path = dir / kModelFile;
  if (!fs::exists(path)) fail(ErrorKind::Io, "input not found: " + path.string());
  const auto bytes = read_file(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "malformed manifest " + path.string() + ": " + e.what());
  }

  ModelManifest m;
  try {
    require(j.at("format").get<std::string>() == "seriex-model", ErrorKind::Format,
            path.string() + " is not a model manifest");
    m.name = j.at("name").get<std::string>();
    m.input_shape = j.at("input_shape").get<Shape>();
    m.metadata = j.value("metadata", json::object());
    const auto& blobs = j.at("tensor_blobs");
    for (const auto& [ref, file] : blobs.items()) {
      const auto blob_path = dir / file.get<std::string>();
      if (!fs::exists(blob_path))
        fail(ErrorKind::Format, "dangling tensor reference '" + ref + "': missing " + blob_path.string());
      m.blobs.emplace(ref, read_tensor(blob_path));
    }
    for (const auto& jl : j.at("layers")) {
      LayerDesc l;
      l.name = jl.at("name").get<std::string>();
      const auto kind = jl.at("kind").get<std::string>();
      try {
        l.kind = layer_kind_from_name(kind);
      } catch (const Error&) {
        fail(ErrorKind::Unsupported, "unsupported layer kind '" + kind + "' in layer '" + l.name + "'");
      }
      l.params = jl.at("params").get<std::map<std::string, std::string>>();
      l.stride = jl.value("stride", std::size_t{1});
      l.padding = jl.value("padding", std::size_t{0});
      for (const auto& [role, ref] : l.params) {
        if (!blobs.contains(ref))
          fail(ErrorKind::Format, "dangling tensor reference '" + ref + "' in layer '" + l.name + "'");
      }
      m.layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "malformed manifest " + path.string() + ": " + e.what());
  }
  m.output_shapes();
  return m;
}

}  // namespace seriex
