#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "seriex/tensor.hpp"

namespace seriex {

// SQTF file layout:
//   "SQTF\n"
//   one line of JSON: {"bits":..,"channel_axis":..,"dtype":..,"layout":"row-major","payload_bytes":..,"shape":[..]}
//   "\n"
//   little-endian payload, exactly payload_bytes long
inline constexpr char kTensorMagic[] = "SQTF";

void write_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

enum class LayerKind { Linear, Conv2d, ReLU, Flatten, Softmax };

std::string_view layer_kind_name(LayerKind kind) noexcept;
LayerKind layer_kind_from_name(std::string_view name);
bool is_matmul_layer(LayerKind kind) noexcept;

struct LayerDesc {
  LayerKind kind = LayerKind::ReLU;
  std::string name;
  /// role ("weight", "bias") -> blob name in ModelManifest::blobs
  std::map<std::string, std::string> params;
  std::size_t stride = 1;
  std::size_t padding = 0;

  bool operator==(const LayerDesc&) const = default;
};

/// Linear weights are (out, in); conv2d weights are (out_channels, in_channels, kh, kw).
/// Activations are per-sample shapes; a batch adds a leading axis.
struct ModelManifest {
  std::string name;
  Shape input_shape;
  std::vector<LayerDesc> layers;
  std::map<std::string, Tensor> blobs;
  nlohmann::json metadata = nlohmann::json::object();

  const Tensor& param(std::size_t layer, const std::string& role) const;
  bool has_param(std::size_t layer, const std::string& role) const;

  /// Per-sample output shape of every layer. Throws ShapeMismatch when two
  /// consecutive layers do not compose, Format on dangling blob references.
  std::vector<Shape> output_shapes() const;
  Shape output_shape() const;
  /// Indices of linear / conv2d layers in order.
  std::vector<std::size_t> parameterized_layers() const;

  bool operator==(const ModelManifest&) const = default;
};

nlohmann::json manifest_to_json(const ModelManifest& m);

void save_model(const ModelManifest& m, const std::filesystem::path& dir);
ModelManifest load_model(const std::filesystem::path& dir);

}  // namespace seriex
