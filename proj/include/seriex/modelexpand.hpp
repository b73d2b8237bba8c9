#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "seriex/intkernels.hpp"
#include "seriex/layerexpand.hpp"
#include "seriex/tensorio.hpp"

namespace seriex {

/// One positive factor per parameterized layer.
using ScaleVector = std::vector<double>;

/// Coordinates of one isomorphic copy of the network in the term-pair grid.
/// Every matmul layer of basis model (i, j) contributes W_i * A_j; slot -1 is
/// the saturation correction, slot 0 the bias term.
struct BasisModel {
  int weight_slot = 1;
  int act_slot = 1;
  /// Per parameterized layer AbelianMul factor.
  ScaleVector scales;

  bool operator==(const BasisModel&) const = default;
};

BasisModel abelian_mul(const ScaleVector& u, const BasisModel& m);

// ---------------------------------------------------------------------------
// AbelianAdd

/// sum_i scales[i] * outputs[i], correctly rounded, so any ordering of the
/// members gives the same bits.
Matrix abelian_add(const std::vector<Matrix>& outputs, const std::vector<double>& scales);
/// Integer sum of members that live on one lattice.
LatticeAccumulator abelian_add(const std::vector<LatticeAccumulator>& members);

/// Replication weights for a non-matmul layer copied into N basis models:
/// N - 1 copies of fl(1/N) and a last weight that makes the sum exactly 1.
std::vector<double> replication_weights(std::size_t n);

// ---------------------------------------------------------------------------
// Expanded model

struct ExpandedModel {
  ModelManifest source;
  ExpansionPolicy policy;
  /// Parallel to source.layers; set for linear / conv2d layers only.
  std::vector<std::optional<ExpandedLayer>> layers;
  std::size_t basis_count = 1;
  double replication_factor = 1.0;
  ReducePlan reduce_plan = ReducePlan::Flat;

  std::vector<std::size_t> parameterized() const;
  std::vector<BasisModel> basis_models() const;
  bool operator==(const ExpandedModel&) const = default;
};

/// Number of weight and activation slots the policy allows: (k + extras) x (t + extras).
std::size_t basis_count(const ExpansionPolicy& policy);

ExpandedModel expand_model(const ModelManifest& m, const ExpansionPolicy& policy);

/// Multiplies the parameters (weights and bias) of parameterized layer l by u[l].
ExpandedModel abelian_mul(const ScaleVector& u, const ExpandedModel& m);

struct ForwardOptions {
  std::size_t act_terms = 0;  // 0 = policy maximum
  bool use_stop_rule = true;
};

struct ModelForward {
  Matrix logits;                      // reduced output of the last non-softmax layer
  Matrix output;                      // after the final softmax, if any
  std::vector<Matrix> layer_outputs;  // reduced output of every layer
  std::vector<std::optional<LayerDiagnostics>> diagnostics;
  std::size_t total_pairs = 0;
  double reduce_seconds = 0.0;
};

/// Layer by layer: every basis model evaluates its component, the components
/// are reduced and the sum is broadcast as the next layer's input.
ModelForward forward_expanded(const ExpandedModel& em, const Matrix& batch, const ForwardOptions& opts = {});

void softmax_rows(Matrix& m);
/// relu / flatten / softmax on a batch.
Matrix apply_elementwise_layer(LayerKind kind, const Matrix& x);

void save_expanded(const ExpandedModel& em, const std::filesystem::path& dir);
ExpandedModel load_expanded(const std::filesystem::path& dir);
bool is_expanded_dir(const std::filesystem::path& dir);

}  // namespace seriex
