#include <algorithm>
#include <cmath>

#include "seriex/numeric.hpp"
#include "seriex/packed.hpp"
#include "seriex/quantcore.hpp"

namespace seriex {

namespace {

/// Integral of (x - c)^2 * exp(-x) / 2 over [lo, hi] (hi may be +inf).
double half_laplace_moment(double lo, double hi, double c) {
  auto primitive = [c](double x) {
    const double u = x - c;
    return std::exp(-x) * (u * u + 2.0 * u + 2.0);
  };
  const double upper = std::isinf(hi) ? 0.0 : primitive(hi);
  return 0.5 * (primitive(lo) - upper);
}

}  // namespace

double laplace_quantization_mse(double alpha, int bits) {
  check_packed_bits(bits);
  require(alpha > 0.0, ErrorKind::InvalidArgument, "laplace_quantization_mse: clip must be positive");
  // Levels k * alpha / q for |k| <= q; the density is symmetric so integrate x >= 0 twice.
  const int q = symmetric_levels(bits);
  const double step = alpha / q;
  double one_side = 0.0;
  for (int k = 0; k < q; ++k) {
    const double lo = std::max(0.0, (k - 0.5) * step);
    one_side += half_laplace_moment(lo, (k + 0.5) * step, k * step);
  }
  one_side += half_laplace_moment((q - 0.5) * step, INFINITY, alpha);
  return 2.0 * one_side;
}

double optimal_laplace_clip(int bits) {
  check_packed_bits(bits);
  // The objective is unimodal on this bracket for every supported width.
  double a = 0.5, b = 30.0;
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
  double f1 = laplace_quantization_mse(x1, bits), f2 = laplace_quantization_mse(x2, bits);
  while (b - a > 1e-12) {
    if (f1 < f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - phi * (b - a);
      f1 = laplace_quantization_mse(x1, bits);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + phi * (b - a);
      f2 = laplace_quantization_mse(x2, bits);
    }
  }
  return 0.5 * (a + b);
}

double laplace_clip_constant(int bits) {
  // optimal_laplace_clip(bits), frozen
  switch (bits) {
    case 2: return 2.0;
    case 4: return 4.8199151888;
    case 8: return 9.8826518988;
    default: fail(ErrorKind::Unsupported, "no Laplace clip constant for " + std::to_string(bits) + " bits");
  }
}

LaplaceFit fit_laplace(std::span<const double> samples) {
  require(!samples.empty(), ErrorKind::InvalidArgument, "fit_laplace: empty input");
  check_finite(samples, "fit_laplace");
  std::vector<double> v(samples.begin(), samples.end());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double median = v[mid];
  if (v.size() % 2 == 0) {
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (lower + median);
  }
  ExactSum dev;
  for (double x : samples) dev.add(std::fabs(x - median));
  return {median, dev.result() / static_cast<double>(samples.size())};
}

ClipRange compute_clip(std::span<const double> samples, const QuantScheme& scheme) {
  require(scheme.saturated, ErrorKind::InvalidArgument, "compute_clip: scheme is not saturated");
  require(!samples.empty(), ErrorKind::InvalidArgument, "compute_clip: empty input");
  check_finite(samples, "compute_clip");
  switch (scheme.clip.kind) {
    case ClipMode::Kind::Fixed: return {scheme.clip.lo, scheme.clip.hi};
    case ClipMode::Kind::Laplace: {
      const auto fit = fit_laplace(samples);
      const double half = laplace_clip_constant(scheme.bits) * fit.scale;
      if (scheme.symmetric) return {-half, half};
      return {fit.median - half, fit.median + half};
    }
    case ClipMode::Kind::None: break;
  }
  fail(ErrorKind::InvalidArgument, "compute_clip: saturated scheme without a clip mode");
}

}  // namespace seriex
