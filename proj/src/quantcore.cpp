#include "seriex/quantcore.hpp"

#include <algorithm>
#include <cmath>

#include "seriex/numeric.hpp"
#include "seriex/packed.hpp"
#include "seriex/parallel.hpp"

namespace seriex {

void QuantScheme::validate() const {
  check_packed_bits(bits);
  require((clip.kind == ClipMode::Kind::None) == !saturated, ErrorKind::InvalidArgument,
          "scheme: a clip mode is required exactly when the scheme is saturated");
  if (clip.kind == ClipMode::Kind::Fixed)
    require(clip.lo < clip.hi, ErrorKind::InvalidArgument, "scheme: fixed clip requires lo < hi");
}

std::string QuantScheme::describe() const {
  std::string s = std::string(symmetric ? "sym" : "asym") + "-" + (saturated ? "sat" : "nonsat") + "/int" +
                  std::to_string(bits);
  if (clip.kind == ClipMode::Kind::Laplace) s += "/laplace";
  if (clip.kind == ClipMode::Kind::Fixed) s += "/fixed";
  if (granularity.per_channel) s += "/axis" + std::to_string(granularity.axis);
  return s;
}

double rounding_offset(int bits) noexcept {
  const double levels = std::ldexp(1.0, bits) - 1.0;
  return (std::ldexp(1.0, bits - 1) - 1.0) / levels;
}

double residual_factor(int bits) noexcept { return std::ldexp(1.0, bits - 1) / (std::ldexp(1.0, bits) - 1.0); }

std::int64_t lattice_round(double y, int bits) noexcept {
  return static_cast<std::int64_t>(std::ceil(y - rounding_offset(bits)));
}

double relaxed_bound(double scale_1, int bits, std::size_t n_terms) noexcept {
  return 2.0 * std::ldexp(scale_1, -bits * static_cast<int>(n_terms - 1));
}

// ---------------------------------------------------------------------------

void SparseCorrection::validate() const {
  require(indices.size() == values.size(), ErrorKind::InvalidArgument, "sparse correction: index/value count differ");
  const auto n = element_count(dense_shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < n, ErrorKind::InvalidArgument, "sparse correction: index out of range");
    require(i == 0 || indices[i] > indices[i - 1], ErrorKind::InvalidArgument,
            "sparse correction: indices must be strictly increasing");
    require(values[i] != 0.0, ErrorKind::InvalidArgument, "sparse correction: explicit zero");
  }
}

std::vector<double> SparseCorrection::dense() const {
  std::vector<double> out(element_count(dense_shape), 0.0);
  for (std::size_t i = 0; i < indices.size(); ++i) out[indices[i]] = values[i];
  return out;
}

std::size_t TensorExpansion::channel_stride() const noexcept {
  if (!scheme.granularity.per_channel) return 1;
  std::size_t inner = 1;
  for (std::size_t a = scheme.granularity.axis + 1; a < source_shape.size(); ++a) inner *= source_shape[a];
  return inner;
}

std::size_t TensorExpansion::channel_of(std::size_t flat) const noexcept {
  if (channels == 1) return 0;
  return (flat / channel_stride()) % channels;
}

std::vector<double> TensorExpansion::base_scales() const {
  if (terms.empty()) return std::vector<double>(channels, 0.0);
  return terms.front().scales;
}

double TensorExpansion::max_base_scale() const {
  const auto s = base_scales();
  return s.empty() ? 0.0 : *std::max_element(s.begin(), s.end());
}

TensorExpansion TensorExpansion::truncated(std::size_t n) const {
  TensorExpansion e = *this;
  if (e.terms.size() > n) e.terms.resize(n);
  return e;
}

void TensorExpansion::validate() const {
  scheme.validate();
  const std::size_t n = size();
  require(bias.size() == channels, ErrorKind::InvalidArgument, "expansion: bias length != channel count");
  if (scheme.symmetric) {
    require(!nsy_present, ErrorKind::InvalidArgument, "expansion: symmetric scheme carries a bias term");
    for (double b : bias) require(b == 0.0, ErrorKind::InvalidArgument, "expansion: symmetric scheme with bias");
  }
  if (!scheme.saturated)
    require(!saturation.has_value(), ErrorKind::InvalidArgument, "expansion: non-saturated scheme with correction");
  if (saturation) {
    saturation->validate();
    require(saturation->dense_shape == source_shape, ErrorKind::InvalidArgument, "expansion: correction shape");
  }
  for (std::size_t i = 0; i < terms.size(); ++i) {
    const auto& t = terms[i];
    require(t.scales.size() == channels && t.digits.size() == n, ErrorKind::InvalidArgument,
            "expansion: term " + std::to_string(i + 1) + " has wrong extents");
    for (double s : t.scales) require(s >= 0.0, ErrorKind::InvalidArgument, "expansion: negative scale");
    for (auto d : t.digits)
      require(d >= packed_min(scheme.bits) && d <= packed_max(scheme.bits), ErrorKind::InvalidArgument,
              "expansion: digit outside packed range");
    if (i + 1 < terms.size()) {
      for (std::size_t c = 0; c < channels; ++c)
        require(t.scales[c] == std::ldexp(terms[i + 1].scales[c], scheme.bits), ErrorKind::InvalidArgument,
                "expansion: scale ladder is not exact at term " + std::to_string(i + 1));
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

/// Flat indices belonging to each channel, in increasing order.
std::vector<std::vector<std::size_t>> channel_slices(const Shape& shape, const Granularity& g) {
  const std::size_t n = element_count(shape);
  if (!g.per_channel) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return {std::move(all)};
  }
  require(g.axis < shape.size(), ErrorKind::InvalidArgument,
          "per-channel axis " + std::to_string(g.axis) + " is not an axis of " + shape_string(shape));
  std::size_t inner = 1;
  for (std::size_t a = g.axis + 1; a < shape.size(); ++a) inner *= shape[a];
  const std::size_t channels = shape[g.axis];
  std::vector<std::vector<std::size_t>> slices(channels);
  for (std::size_t i = 0; i < n; ++i) slices[(i / inner) % channels].push_back(i);
  return slices;
}

/// Series of one slice. All channels of a tensor go through this routine
/// independently, which is what makes per-channel expansion equal to
/// expanding every slice on its own.
struct SliceSeries {
  double scale_1 = 0.0;
  double bias = 0.0;
  std::vector<double> correction;                 // m - clipped
  std::vector<std::vector<std::int32_t>> digits;  // per term
  std::vector<double> residual;                   // after the last term
  std::vector<double> residual_history;           // max |R| after each term
};

SliceSeries expand_slice(std::span<const double> m, int bits, bool symmetric, std::optional<ClipRange> clip,
                         std::size_t n_terms, double stop_threshold) {
  SliceSeries out;
  const std::size_t n = m.size();
  std::vector<double> clipped(m.begin(), m.end());
  if (clip) {
    out.correction.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      clipped[i] = std::clamp(m[i], clip->lo, clip->hi);
      out.correction[i] = m[i] - clipped[i];
    }
  }

  const std::int32_t q = symmetric_levels(bits);
  double lo = 0.0, hi = 0.0;
  if (!symmetric) {
    if (clip) {
      lo = clip->lo;
      hi = clip->hi;
    } else if (n > 0) {
      const auto [mn, mx] = std::minmax_element(clipped.begin(), clipped.end());
      lo = *mn;
      hi = *mx;
    }
    out.bias = (hi - lo) / 2.0 + lo;
  }

  // adjusted = clipped - bias; the remainder is the symmetric non-saturated case
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = clipped[i] - out.bias;
  double peak = max_abs(r);
  if (!symmetric) peak = std::max(std::fabs(hi - out.bias), std::fabs(lo - out.bias));
  out.scale_1 = peak / q;

  const std::int32_t dmin = packed_min(bits), dmax = packed_max(bits);
  for (std::size_t t = 0; t < n_terms; ++t) {
    std::vector<std::int32_t> d(n, 0);
    if (out.scale_1 > 0.0) {
      const double s = std::ldexp(out.scale_1, -bits * static_cast<int>(t));
      for (std::size_t i = 0; i < n; ++i) {
        const auto v = std::clamp<std::int64_t>(lattice_round(r[i] / s, bits), dmin, dmax);
        d[i] = static_cast<std::int32_t>(v);
        r[i] = std::fma(-s, static_cast<double>(v), r[i]);
      }
    }
    out.digits.push_back(std::move(d));
    out.residual_history.push_back(max_abs(r));
    if (out.residual_history.back() < stop_threshold) break;
  }
  out.residual = std::move(r);
  return out;
}

struct TensorSeries {
  TensorExpansion expansion;
  std::vector<double> residual;
  std::vector<double> residual_history;
};

TensorSeries expand_impl(const Tensor& m, const QuantScheme& scheme, std::optional<ClipRange> clip,
                         std::size_t n_terms, double stop_threshold) {
  scheme.validate();
  const auto values = m.to_f64();
  check_finite(values, "expand");
  if (clip) {
    require(scheme.saturated, ErrorKind::InvalidArgument, "clip range given for a non-saturated scheme");
    require(clip->lo <= clip->hi, ErrorKind::InvalidArgument, "clip range requires lo <= hi");
  }

  const auto slices = channel_slices(m.shape(), scheme.granularity);
  const std::size_t channels = slices.size();

  std::vector<SliceSeries> series(channels);
  parallel_for(channels, [&](std::size_t c) {
    std::vector<double> v(slices[c].size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = values[slices[c][i]];
    std::optional<ClipRange> slice_clip = clip;
    if (scheme.saturated && !slice_clip && !v.empty()) slice_clip = compute_clip(v, scheme);
    series[c] = expand_slice(v, scheme.bits, scheme.symmetric, slice_clip, n_terms, stop_threshold);
  });

  // Every channel stops at the same length: the longest any channel needed.
  std::size_t used = 0;
  for (const auto& s : series) used = std::max(used, s.digits.size());
  for (std::size_t c = 0; c < channels; ++c) {
    if (series[c].digits.size() < used) {
      std::vector<double> v(slices[c].size());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = values[slices[c][i]];
      std::optional<ClipRange> slice_clip = clip;
      if (scheme.saturated && !slice_clip && !v.empty()) slice_clip = compute_clip(v, scheme);
      series[c] = expand_slice(v, scheme.bits, scheme.symmetric, slice_clip, used, 0.0);
    }
  }

  const std::size_t n = values.size();
  TensorSeries out;
  auto& e = out.expansion;
  e.scheme = scheme;
  e.source_shape = m.shape();
  e.channels = channels;
  e.bias.assign(channels, 0.0);
  e.nsy_present = !scheme.symmetric;
  e.terms.resize(used);
  for (auto& t : e.terms) {
    t.scales.assign(channels, 0.0);
    t.digits.assign(n, 0);
  }
  out.residual.assign(n, 0.0);
  out.residual_history.assign(used, 0.0);

  std::vector<std::size_t> sat_idx;
  std::vector<double> sat_val;
  std::vector<double> correction_dense(scheme.saturated ? n : 0, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    const auto& s = series[c];
    e.bias[c] = s.bias;
    for (std::size_t t = 0; t < used; ++t) {
      e.terms[t].scales[c] = std::ldexp(s.scale_1, -scheme.bits * static_cast<int>(t));
      for (std::size_t i = 0; i < slices[c].size(); ++i) e.terms[t].digits[slices[c][i]] = s.digits[t][i];
      out.residual_history[t] = std::max(out.residual_history[t], s.residual_history[t]);
    }
    for (std::size_t i = 0; i < slices[c].size(); ++i) {
      out.residual[slices[c][i]] = s.residual[i];
      if (!s.correction.empty()) correction_dense[slices[c][i]] = s.correction[i];
    }
  }
  if (scheme.saturated) {
    for (std::size_t i = 0; i < n; ++i) {
      if (correction_dense[i] != 0.0) {
        sat_idx.push_back(i);
        sat_val.push_back(correction_dense[i]);
      }
    }
    e.saturation = SparseCorrection{std::move(sat_idx), std::move(sat_val), m.shape()};
  }
  return out;
}

}  // namespace

QuantizeOnceResult quantize_once(const Tensor& m, const QuantScheme& scheme, std::optional<ClipRange> clip) {
  auto s = expand_impl(m, scheme, clip, 1, 0.0);
  QuantizeOnceResult r;
  r.term = std::move(s.expansion.terms.front());
  r.bias = std::move(s.expansion.bias);
  r.correction = std::move(s.expansion.saturation);
  r.residual = Tensor::from_f64(m.shape(), s.residual);
  return r;
}

TensorExpansion expand_tensor(const Tensor& m, const QuantScheme& scheme, std::size_t n_terms) {
  require(n_terms >= 1, ErrorKind::InvalidArgument, "expand_tensor: n_terms must be >= 1");
  return expand_impl(m, scheme, std::nullopt, n_terms, 0.0).expansion;
}

AdaptiveExpansion expand_tensor_until(const Tensor& m, const QuantScheme& scheme, std::size_t max_terms,
                                      double stop_threshold) {
  require(max_terms >= 1, ErrorKind::InvalidArgument, "expand_tensor_until: max_terms must be >= 1");
  require(stop_threshold > 0.0, ErrorKind::InvalidArgument, "expand_tensor_until: threshold must be > 0");
  auto s = expand_impl(m, scheme, std::nullopt, max_terms, stop_threshold);
  AdaptiveExpansion out;
  out.residual_history = s.residual_history;
  out.residual_max = s.residual_history.empty() ? 0.0 : s.residual_history.back();
  out.capped = out.residual_max >= stop_threshold;
  out.expansion = std::move(s.expansion);
  return out;
}

std::vector<std::vector<double>> symmetric_residual_sequence(std::span<const double> adjusted, double scale_1,
                                                             int bits, std::size_t n_terms) {
  check_packed_bits(bits);
  std::vector<double> r(adjusted.begin(), adjusted.end());
  std::vector<std::vector<double>> seq;
  const std::int32_t dmin = packed_min(bits), dmax = packed_max(bits);
  for (std::size_t t = 0; t < n_terms; ++t) {
    if (scale_1 > 0.0) {
      const double s = std::ldexp(scale_1, -bits * static_cast<int>(t));
      for (auto& x : r) {
        const auto v = std::clamp<std::int64_t>(lattice_round(x / s, bits), dmin, dmax);
        x = std::fma(-s, static_cast<double>(v), x);
      }
    }
    seq.push_back(r);
  }
  return seq;
}

Tensor parallel_digits(const Tensor& m, double scale_1, int bits, std::size_t k) {
  check_packed_bits(bits);
  require(k >= 2, ErrorKind::InvalidArgument, "parallel_digits: term index must be >= 2");
  require(scale_1 > 0.0, ErrorKind::InvalidArgument, "parallel_digits: zero scale sentinel has no digits");
  const auto values = m.to_f64();
  check_finite(values, "parallel_digits");
  const double s_k = std::ldexp(scale_1, -bits * static_cast<int>(k - 1));
  const double s_prev = std::ldexp(scale_1, -bits * static_cast<int>(k - 2));
  std::vector<std::int32_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto fine = lattice_round(values[i] / s_k, bits);
    const auto coarse = lattice_round(values[i] / s_prev, bits);
    out[i] = static_cast<std::int32_t>(fine - coarse * (std::int64_t{1} << bits));
  }
  return Tensor::from_i32(m.shape(), out);
}

Tensor reconstruct(const TensorExpansion& e) {
  const std::size_t n = e.size();
  std::vector<double> sat;
  if (e.saturation) sat = e.saturation->dense();
  std::vector<double> out(n);
  ExactSum acc;
  for (std::size_t i = 0; i < n; ++i) {
    acc.clear();
    const std::size_t c = e.channel_of(i);
    if (!sat.empty()) acc.add(sat[i]);
    acc.add(e.bias.empty() ? 0.0 : e.bias[c]);
    for (const auto& t : e.terms) acc.add_product(t.scales[c], static_cast<double>(t.digits[i]));
    out[i] = acc.result();
  }
  return Tensor::from_f64(e.source_shape, out);
}

TensorExpansion scale_expansion(const TensorExpansion& e, double u) {
  require(std::isfinite(u), ErrorKind::NonFinite, "scale_expansion: non-finite multiplier");
  require(u > 0.0, ErrorKind::InvalidArgument, "scale_expansion: multiplier must be positive");
  TensorExpansion out = e;
  for (auto& b : out.bias) b *= u;
  for (auto& t : out.terms)
    for (auto& s : t.scales) s *= u;
  if (out.saturation)
    for (auto& v : out.saturation->values) v *= u;
  return out;
}

}  // namespace seriex
