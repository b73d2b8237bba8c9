#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "seriex/intkernels.hpp"
#include "seriex/quantcore.hpp"
#include "seriex/tensorio.hpp"

namespace seriex {

struct ExpansionPolicy {
  int bits = 4;
  std::size_t weight_terms_max = 2;      // k
  std::size_t activation_terms_max = 4;  // t
  double weight_stop_threshold = 1e-2;
  double activation_stop_threshold = 1e-4;
  /// Width for the first and last parameterized layers; 0 keeps `bits`.
  int first_last_bits = 8;
  /// Bit widths inside these schemes are overridden by the layer's width.
  QuantScheme scheme_w = QuantScheme::symmetric_nonsat(4, Granularity::channel(0));
  QuantScheme scheme_a = QuantScheme::symmetric_nonsat(4);
  GridMask mask;

  void validate() const;
  bool operator==(const ExpansionPolicy&) const = default;
};

nlohmann::json policy_to_json(const ExpansionPolicy& p);
/// Missing keys keep their defaults.
ExpansionPolicy policy_from_json(const nlohmann::json& j, ExpansionPolicy base = {});
nlohmann::json scheme_to_json(const QuantScheme& s);
QuantScheme scheme_from_json(const nlohmann::json& j);

/// Smallest n with scale_n * 2^X < threshold, clamped to [1, k].
std::size_t choose_weight_terms(double scale_1, int bits, const ExpansionPolicy& policy);

struct ExpandedLayer {
  LayerKind kind = LayerKind::Linear;
  std::string name;
  int bits = 4;
  Shape weight_shape;
  TensorExpansion weight;
  std::vector<double> bias;  // empty when the layer has none
  QuantScheme activation_scheme;
  ExpansionPolicy policy;
  std::size_t stride = 1;
  std::size_t padding = 0;
  /// Accumulated AbelianMul factor; applied to weights and bias at evaluation.
  double multiplier = 1.0;

  std::size_t out_features() const noexcept { return weight_shape.empty() ? 0 : weight_shape[0]; }
  bool operator==(const ExpandedLayer&) const = default;
};

/// Term count from choose_weight_terms, fewer when the weights become exact.
/// `bits` overrides policy.bits (first/last layer rule is applied by the caller).
ExpandedLayer expand_layer_weights(const ModelManifest& model, std::size_t layer_index, const ExpansionPolicy& policy,
                                   int bits);
ExpandedLayer expand_layer_weights(const ModelManifest& model, std::size_t layer_index, const ExpansionPolicy& policy);

struct LayerDiagnostics {
  std::size_t weight_terms = 0;
  std::size_t act_terms = 0;
  double act_residual = 0.0;
  std::size_t pair_count = 0;
  /// The activation series hit t before reaching the stop threshold.
  bool act_capped = false;
};

struct LayerForward {
  Matrix output;  // batch x flattened per-sample output
  LayerDiagnostics diag;
};

struct ConvGeometry {
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t kh = 0, kw = 0, stride = 1, padding = 0;
  std::size_t out_h() const noexcept { return (height + 2 * padding - kh) / stride + 1; }
  std::size_t out_w() const noexcept { return (width + 2 * padding - kw) / stride + 1; }
};

/// Patch matrix: rows (c, ki, kj), columns (sample, oy, ox). `input` is batch x (C*H*W).
Matrix im2col(const Matrix& input, const ConvGeometry& g);
/// (O x batch*P) product back to batch x (O*P).
Matrix col2out(const Matrix& product, std::size_t batch, std::size_t positions);

/// Evaluates the layer on a batch (rows = samples, per-sample input flattened).
/// `input_shape` is the per-sample shape. With use_stop_rule the activation
/// series stops early once its residual is below the policy threshold;
/// otherwise exactly t_terms are used.
LayerForward forward_expanded_layer(const ExpandedLayer& el, const Matrix& input, const Shape& input_shape,
                                    std::size_t t_terms, bool use_stop_rule = true,
                                    ReducePlan plan = ReducePlan::Flat);

/// Float64 forward of the same layer with the reconstructed (not original)
/// weights. Used to isolate activation error.
Matrix float_layer_forward(LayerKind kind, const Matrix& weight, const std::vector<double>& bias,
                           const Matrix& input, const Shape& input_shape, const Shape& weight_shape,
                           std::size_t stride, std::size_t padding);

}  // namespace seriex
