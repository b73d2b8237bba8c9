#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seriex/tensor.hpp"

namespace seriex {

// ---------------------------------------------------------------------------
// Schemes

struct ClipRange {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const ClipRange&) const = default;
};

struct ClipMode {
  enum class Kind { None, Laplace, Fixed };
  Kind kind = Kind::None;
  double lo = 0.0;
  double hi = 0.0;

  static ClipMode none() { return {}; }
  static ClipMode laplace() { return {Kind::Laplace, 0.0, 0.0}; }
  static ClipMode fixed(double lo, double hi) { return {Kind::Fixed, lo, hi}; }
  bool operator==(const ClipMode&) const = default;
};

struct Granularity {
  bool per_channel = false;
  std::size_t axis = 0;

  static Granularity per_tensor() { return {}; }
  static Granularity channel(std::size_t axis) { return {true, axis}; }
  bool operator==(const Granularity&) const = default;
};

/// One single-step quantizer configuration.
///   clip.kind == None  <=>  !saturated
///   Fixed clip requires lo < hi
struct QuantScheme {
  int bits = 4;
  bool symmetric = true;
  bool saturated = false;
  ClipMode clip;
  Granularity granularity;

  void validate() const;
  std::string describe() const;
  bool operator==(const QuantScheme&) const = default;

  static QuantScheme symmetric_nonsat(int bits, Granularity g = {}) { return {bits, true, false, {}, g}; }
  static QuantScheme asymmetric_nonsat(int bits, Granularity g = {}) { return {bits, false, false, {}, g}; }
};

/// Largest digit magnitude used by the first term, 2^(X-1) - 1.
constexpr std::int32_t symmetric_levels(int bits) noexcept { return (std::int32_t{1} << (bits - 1)) - 1; }

// ---------------------------------------------------------------------------
// Rounding
//
// Every digit in the series is produced by
//   INTX(y) = ceil(y - U_X),  U_X = (2^(X-1) - 1) / (2^X - 1)
// which is nearest rounding shifted by 1 / (2 (2^X - 1)) of a quantum. With
// this rule the residual after a term with scale s lies in (-L_X s, U_X s],
// L_X = 1 - U_X, and the next term's digits never leave the two's-complement
// range [-2^(X-1), 2^(X-1) - 1]. Plain round-to-nearest would need the digit
// +2^(X-1) and break the geometric decay once clamped.

double rounding_offset(int bits) noexcept;
/// Upper bound of |residual| / scale after any term: L_X = 2^(X-1) / (2^X - 1).
double residual_factor(int bits) noexcept;
std::int64_t lattice_round(double y, int bits) noexcept;

// ---------------------------------------------------------------------------
// Expansion containers

/// Sparse M_sa: the excess clipped away by saturation.
struct SparseCorrection {
  std::vector<std::size_t> indices;  // strictly increasing flat positions
  std::vector<double> values;        // never zero
  Shape dense_shape;

  std::size_t nnz() const noexcept { return indices.size(); }
  void validate() const;
  std::vector<double> dense() const;
  bool operator==(const SparseCorrection&) const = default;
};

struct ExpansionTerm {
  /// One scale per channel (a single entry for per-tensor granularity). Zero
  /// marks an all-zero channel.
  std::vector<double> scales;
  /// Digits over the full source tensor, row-major.
  std::vector<std::int32_t> digits;

  bool operator==(const ExpansionTerm&) const = default;
};

/// M = M_sa + bias * M_nsy + sum_i scale_i * digits_i (+ residual).
struct TensorExpansion {
  QuantScheme scheme;
  Shape source_shape;
  std::size_t channels = 1;
  std::optional<SparseCorrection> saturation;
  std::vector<double> bias;  // per channel
  bool nsy_present = false;
  std::vector<ExpansionTerm> terms;

  std::size_t term_count() const noexcept { return terms.size(); }
  std::size_t size() const noexcept { return element_count(source_shape); }
  std::size_t channel_of(std::size_t flat) const noexcept;
  /// Product of source extents after the channel axis.
  std::size_t channel_stride() const noexcept;
  /// First-term scale of every channel.
  std::vector<double> base_scales() const;
  double max_base_scale() const;
  TensorExpansion truncated(std::size_t n) const;
  /// Checks the container invariants: ladder exactness, symmetric => no bias,
  /// non-saturated => no correction, digit ranges.
  void validate() const;
  bool operator==(const TensorExpansion&) const = default;
};

// ---------------------------------------------------------------------------
// Clipping

/// Optimal clip (in units of the Laplace scale b) for a Laplace(0,1) source
/// quantized with the symmetric 2^X - 1 level grid used by quantize_once.
double laplace_clip_constant(int bits);
/// Exact expected squared error of that quantizer with clip `alpha`.
double laplace_quantization_mse(double alpha, int bits);
/// Numerical minimization of laplace_quantization_mse (golden section).
double optimal_laplace_clip(int bits);

struct LaplaceFit {
  double median = 0.0;
  double scale = 0.0;  // mean |x - median|
};
LaplaceFit fit_laplace(std::span<const double> samples);

ClipRange compute_clip(std::span<const double> samples, const QuantScheme& scheme);

// ---------------------------------------------------------------------------
// Expansion

struct QuantizeOnceResult {
  ExpansionTerm term;
  std::vector<double> bias;
  std::optional<SparseCorrection> correction;
  Tensor residual;
};

/// First term of the series. When the scheme is saturated and `clip` is empty,
/// the clip range is derived per slice from the scheme.
QuantizeOnceResult quantize_once(const Tensor& m, const QuantScheme& scheme,
                                 std::optional<ClipRange> clip = std::nullopt);

TensorExpansion expand_tensor(const Tensor& m, const QuantScheme& scheme, std::size_t n_terms);

/// Expands until ||R_n||_inf < stop_threshold or max_terms is reached.
struct AdaptiveExpansion {
  TensorExpansion expansion;
  /// ||R_n||_inf after each prefix of n terms (n = 1..terms used).
  std::vector<double> residual_history;
  double residual_max = 0.0;
  /// True when max_terms was hit before the stop rule was satisfied.
  bool capped = false;
};
AdaptiveExpansion expand_tensor_until(const Tensor& m, const QuantScheme& scheme, std::size_t max_terms,
                                      double stop_threshold);

/// Symmetric non-saturated series of `adjusted` on the imposed ladder
/// scale_1 * 2^(-X(i-1)). Returns the residual after every term. This is the
/// core every other scheme reduces to.
std::vector<std::vector<double>> symmetric_residual_sequence(std::span<const double> adjusted, double scale_1,
                                                             int bits, std::size_t n_terms);

/// Digits of term k (k >= 2) straight from M:
///   INTX(M / scale_k) - INTX(M / scale_{k-1}) * 2^X
Tensor parallel_digits(const Tensor& m, double scale_1, int bits, std::size_t k);

/// saturation + bias + sum scale_i * digits_i, correctly rounded in float64.
Tensor reconstruct(const TensorExpansion& e);

/// Relaxed residual bound 2 * scale_1 * 2^(-X(n-1)).
double relaxed_bound(double scale_1, int bits, std::size_t n_terms) noexcept;

/// Multiplies every scale, the bias and the correction by u (digits unchanged).
TensorExpansion scale_expansion(const TensorExpansion& e, double u);

}  // namespace seriex
