#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "seriex/numeric.hpp"
#include "seriex/packed.hpp"
#include "seriex/quantcore.hpp"
#include "test_util.hpp"

using namespace seriex;

namespace {

double residual_inf(const Tensor& m, const TensorExpansion& e) {
  return max_abs_diff(m.to_f64(), reconstruct(e).to_f64());
}

// Sequential oracle written against the definition: quantize the running
// residual with the imposed scale, subtract, repeat.
struct OracleSeries {
  double scale_1 = 0;
  std::vector<std::vector<std::int32_t>> digits;
  std::vector<double> residual;
};

OracleSeries oracle_symmetric(const std::vector<double>& m, int bits, std::size_t n) {
  OracleSeries o;
  double peak = 0;
  for (double x : m) peak = std::max(peak, std::fabs(x));
  o.scale_1 = peak / ((1 << (bits - 1)) - 1);
  o.residual = m;
  const double u = (std::pow(2.0, bits - 1) - 1.0) / (std::pow(2.0, bits) - 1.0);
  for (std::size_t t = 0; t < n; ++t) {
    const double s = o.scale_1 / std::pow(2.0, bits * static_cast<double>(t));
    std::vector<std::int32_t> d(m.size(), 0);
    if (s > 0) {
      for (std::size_t i = 0; i < m.size(); ++i) {
        double q = std::ceil(o.residual[i] / s - u);
        q = std::clamp(q, -std::pow(2.0, bits - 1), std::pow(2.0, bits - 1) - 1);
        d[i] = static_cast<std::int32_t>(q);
        o.residual[i] = std::fma(-s, q, o.residual[i]);
      }
    }
    o.digits.push_back(d);
  }
  return o;
}

}  // namespace

TEST_CASE("rounding constants") {
  CHECK(rounding_offset(4) == doctest::Approx(7.0 / 15.0).epsilon(1e-15));
  CHECK(residual_factor(4) == doctest::Approx(8.0 / 15.0).epsilon(1e-15));
  CHECK(residual_factor(2) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(lattice_round(0.0, 4) == 0);
  CHECK(lattice_round(7.0, 4) == 7);
  CHECK(lattice_round(-7.0, 4) == -7);
  CHECK(lattice_round(0.5, 4) == 1);
  CHECK(lattice_round(-0.5, 4) == 0);
  CHECK(lattice_round(-0.54, 4) == -1);
}

TEST_CASE("quantize_once exact example") {
  const std::vector<double> v{0.7, -0.7, 0.3, 0.0};
  const auto m = Tensor::from_f64({2, 2}, v);
  const auto r = quantize_once(m, QuantScheme::symmetric_nonsat(4));
  CHECK(r.term.scales.at(0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(r.term.digits == std::vector<std::int32_t>{7, -7, 3, 0});
  CHECK(max_abs(r.residual.to_f64()) <= 1e-15);
  CHECK(r.bias == std::vector<double>{0.0});
  CHECK_FALSE(r.correction.has_value());
}

TEST_CASE("quantize_once zero tensor") {
  const auto m = Tensor::zeros({3, 3});
  for (const auto& s : {QuantScheme::symmetric_nonsat(4), QuantScheme::asymmetric_nonsat(2)}) {
    const auto r = quantize_once(m, s);
    CHECK(r.term.scales.at(0) == 0.0);
    CHECK(std::all_of(r.term.digits.begin(), r.term.digits.end(), [](auto d) { return d == 0; }));
    CHECK(max_abs(r.residual.to_f64()) == 0.0);
  }
}

TEST_CASE("quantize_once asymmetric residual bound") {
  std::mt19937_64 rng(21);
  const auto v = testutil::uniform(200, rng, -1, 1);
  const auto m = Tensor::from_f64({200}, v);
  const auto r = quantize_once(m, QuantScheme::asymmetric_nonsat(4));
  const double scale = r.term.scales[0];
  const auto lo = *std::min_element(v.begin(), v.end());
  const auto hi = *std::max_element(v.begin(), v.end());
  CHECK(r.bias[0] == doctest::Approx((hi - lo) / 2 + lo).epsilon(1e-15));
  CHECK(scale == doctest::Approx((hi - lo) / (2.0 * 7.0)).epsilon(1e-14));
  // direct reconstruction
  double worst = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    worst = std::max(worst, std::fabs(v[i] - (r.bias[0] + scale * r.term.digits[i])));
  CHECK(worst <= residual_factor(4) * scale + 1e-12);
  CHECK(max_abs(r.residual.to_f64()) <= residual_factor(4) * scale + 1e-12);
}

TEST_CASE("quantize_once saturated correction") {
  const std::vector<double> v{-3.0, -0.5, 0.25, 0.5, 2.0};
  const auto m = Tensor::from_f64({5}, v);
  QuantScheme s{4, true, true, ClipMode::fixed(-1, 1), {}};
  const auto r = quantize_once(m, s, ClipRange{-1, 1});
  REQUIRE(r.correction.has_value());
  CHECK(r.correction->indices == std::vector<std::size_t>{0, 4});
  CHECK(r.correction->values == std::vector<double>{-2.0, 1.0});
  CHECK(r.term.scales[0] == doctest::Approx(1.0 / 7.0));
  CHECK(testutil::error_kind_of([&] { quantize_once(m, QuantScheme::symmetric_nonsat(4), ClipRange{-1, 1}); }) ==
        ErrorKind::InvalidArgument);
}

TEST_CASE("non-finite input is rejected") {
  const std::vector<double> v{1.0, NAN};
  const auto m = Tensor::from_f64({2}, v);
  CHECK(testutil::error_kind_of([&] { expand_tensor(m, QuantScheme::symmetric_nonsat(4), 2); }) ==
        ErrorKind::NonFinite);
  CHECK(testutil::error_kind_of([&] { expand_tensor(Tensor::zeros({2}), QuantScheme::symmetric_nonsat(4), 0); }) ==
        ErrorKind::InvalidArgument);
}

TEST_CASE("expand_tensor examples") {
  const auto z = expand_tensor(Tensor::zeros({4, 4}), QuantScheme::symmetric_nonsat(4), 3);
  CHECK(z.term_count() == 3);
  CHECK(max_abs(reconstruct(z).to_f64()) == 0.0);

  const std::vector<double> v{0.7, -0.7, 0.3, 0.0};
  const auto m = Tensor::from_f64({2, 2}, v);
  const auto e = expand_tensor(m, QuantScheme::symmetric_nonsat(4), 2);
  for (auto d : e.terms[1].digits) CHECK(d == 0);
  CHECK(reconstruct(e).to_f64() == v);

  std::mt19937_64 rng(5);
  const auto g = testutil::gaussian(64, rng);
  const auto mg = Tensor::from_f64({8, 8}, g);
  const auto eg = expand_tensor(mg, QuantScheme::symmetric_nonsat(2), 4);
  const double s1 = eg.terms[0].scales[0];
  CHECK(residual_inf(mg, eg) <= 2 * s1 * std::pow(2.0, -6));
  for (std::size_t i = 0; i + 1 < 4; ++i) CHECK(eg.terms[i].scales[0] / eg.terms[i + 1].scales[0] == 4.0);
  eg.validate();
}

TEST_CASE("expand_tensor matches the sequential oracle") {
  std::mt19937_64 rng(8);
  for (int bits : {2, 4, 8}) {
    const auto g = testutil::gaussian(120, rng, 3.0);
    const auto e = expand_tensor(Tensor::from_f64({120}, g), QuantScheme::symmetric_nonsat(bits), 5);
    const auto o = oracle_symmetric(g, bits, 5);
    CHECK(e.terms[0].scales[0] == o.scale_1);
    for (std::size_t t = 0; t < 5; ++t) CHECK(e.terms[t].digits == o.digits[t]);
  }
}

TEST_CASE("reconstruct") {
  TensorExpansion empty;
  empty.scheme = QuantScheme::symmetric_nonsat(4);
  empty.source_shape = {2, 3};
  empty.bias = {0.0};
  CHECK(reconstruct(empty).to_f64() == std::vector<double>(6, 0.0));

  const std::vector<double> v{0.5, -0.25, 0.125, 0.75};
  const auto m = Tensor::from_f64({4}, v);
  const auto e = expand_tensor(m, QuantScheme::symmetric_nonsat(8), 1);
  const auto back = reconstruct(e).to_f64();
  double worst = 0;
  for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, std::fabs(back[i] - v[i]));
  CHECK(worst <= residual_factor(8) * e.terms[0].scales[0]);
}

TEST_CASE("asymmetric and saturated reduce to the symmetric core") {
  std::mt19937_64 rng(31);
  std::vector<QuantScheme> schemes{
      QuantScheme::asymmetric_nonsat(4),
      QuantScheme{4, false, true, ClipMode::laplace(), {}},
      QuantScheme{2, true, true, ClipMode::fixed(-0.8, 0.8), {}},
      QuantScheme{8, false, true, ClipMode::fixed(-0.5, 1.0), {}},
  };
  for (const auto& s : schemes) {
    auto v = testutil::uniform(300, rng, -1, 1.5);
    const auto m = Tensor::from_f64({300}, v);
    const auto e = expand_tensor(m, s, 4);
    e.validate();
    std::vector<double> clipped = v;
    if (s.saturated) {
      const auto range = compute_clip(v, s);
      const auto sat = e.saturation->dense();
      for (std::size_t i = 0; i < v.size(); ++i) {
        clipped[i] = std::clamp(v[i], range.lo, range.hi);
        CHECK(sat[i] == v[i] - clipped[i]);
      }
    }
    std::vector<double> adjusted(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) adjusted[i] = clipped[i] - e.bias[0];
    const double s1 = e.terms[0].scales[0];
    const auto seq = symmetric_residual_sequence(adjusted, s1, s.bits, 4);
    std::vector<double> r = adjusted;
    for (std::size_t t = 0; t < 4; ++t) {
      const double st = e.terms[t].scales[0];
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::fma(-st, e.terms[t].digits[i], r[i]);
      CHECK(r == seq[t]);
    }
  }
}

TEST_CASE("per-channel expansion equals per-slice expansions") {
  std::mt19937_64 rng(12);
  const std::size_t rows = 5, cols = 7;
  std::vector<double> v = testutil::gaussian(rows * cols, rng);
  for (std::size_t c = 0; c < cols; ++c) v[2 * cols + c] *= 50.0;
  for (std::size_t c = 0; c < cols; ++c) v[4 * cols + c] = 0.0;
  const auto m = Tensor::from_f64({rows, cols}, v);
  const auto e = expand_tensor(m, QuantScheme::symmetric_nonsat(4, Granularity::channel(0)), 3);
  REQUIRE(e.channels == rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> slice(v.begin() + static_cast<std::ptrdiff_t>(r * cols),
                              v.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
    const auto es = expand_tensor(Tensor::from_f64({cols}, slice), QuantScheme::symmetric_nonsat(4), 3);
    for (std::size_t t = 0; t < 3; ++t) {
      CHECK(e.terms[t].scales[r] == es.terms[t].scales[0]);
      for (std::size_t c = 0; c < cols; ++c) CHECK(e.terms[t].digits[r * cols + c] == es.terms[t].digits[c]);
    }
  }
  CHECK(e.terms[0].scales[4] == 0.0);

  // axis 1 on a 3-d tensor
  const auto v3 = testutil::gaussian(2 * 3 * 4, rng);
  const auto m3 = Tensor::from_f64({2, 3, 4}, v3);
  const auto e3 = expand_tensor(m3, QuantScheme::symmetric_nonsat(4, Granularity::channel(1)), 2);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    std::vector<double> slice;
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t b = 0; b < 4; ++b) slice.push_back(v3[a * 12 + ch * 4 + b]);
    const auto es = expand_tensor(Tensor::from_f64({slice.size()}, slice), QuantScheme::symmetric_nonsat(4), 2);
    CHECK(e3.terms[1].scales[ch] == es.terms[1].scales[0]);
  }
}

TEST_CASE("adaptive expansion stop rule") {
  std::mt19937_64 rng(2);
  const auto v = testutil::gaussian(50, rng);
  const auto m = Tensor::from_f64({50}, v);
  const auto a = expand_tensor_until(m, QuantScheme::symmetric_nonsat(4), 10, 1e-4);
  CHECK_FALSE(a.capped);
  CHECK(a.residual_max < 1e-4);
  CHECK(a.residual_history.size() == a.expansion.term_count());
  if (a.residual_history.size() > 1) CHECK(a.residual_history[a.residual_history.size() - 2] >= 1e-4);
  const auto capped = expand_tensor_until(m, QuantScheme::symmetric_nonsat(4), 2, 1e-9);
  CHECK(capped.capped);
  CHECK(capped.expansion.term_count() == 2);
}

TEST_CASE("parallel digits on an exactly representable grid") {
  const int bits = 4;
  const double s1 = 1.0 / 7.0;
  const double s3 = s1 / 256.0;
  std::vector<double> v;
  for (int k = -200; k <= 200; ++k) v.push_back(k * s3);
  const auto m = Tensor::from_f64({v.size()}, v);
  const auto e = expand_tensor(m, QuantScheme::symmetric_nonsat(bits), 3);
  for (std::size_t k = 2; k <= 3; ++k) {
    const auto p = parallel_digits(m, e.terms[0].scales[0], bits, k).to_i32();
    CHECK(p == e.terms[k - 1].digits);
  }
  const auto zero = parallel_digits(Tensor::zeros({3}), 1.0, 4, 2).to_i32();
  CHECK(zero == std::vector<std::int32_t>{0, 0, 0});
  CHECK(testutil::error_kind_of([&] { parallel_digits(m, 1.0, 4, 1); }) == ErrorKind::InvalidArgument);
  CHECK(testutil::error_kind_of([&] { parallel_digits(m, 0.0, 4, 2); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("scale_expansion") {
  std::mt19937_64 rng(4);
  const auto v = testutil::gaussian(20, rng);
  const auto e = expand_tensor(Tensor::from_f64({20}, v), QuantScheme::asymmetric_nonsat(4), 3);
  const auto s = scale_expansion(e, 2.0);
  CHECK(s.terms[2].digits == e.terms[2].digits);
  CHECK(s.terms[0].scales[0] == 2.0 * e.terms[0].scales[0]);
  CHECK(s.bias[0] == 2.0 * e.bias[0]);
  s.validate();
  CHECK(testutil::error_kind_of([&] { scale_expansion(e, -1.0); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("validate catches broken ladders") {
  auto e = expand_tensor(Tensor::from_f64({3}, std::vector<double>{1, 2, 3}), QuantScheme::symmetric_nonsat(4), 3);
  e.validate();
  e.terms[1].scales[0] *= 1.0000001;
  CHECK(testutil::error_kind_of([&] { e.validate(); }) == ErrorKind::InvalidArgument);
}
