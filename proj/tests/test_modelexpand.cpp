#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "seriex/modelexpand.hpp"
#include "seriex/numeric.hpp"
#include "seriex/runtime.hpp"
#include "test_util.hpp"

using namespace seriex;

namespace {

ExpansionPolicy precise_policy(int bits, std::size_t k, std::size_t t) {
  ExpansionPolicy p;
  p.bits = bits;
  p.first_last_bits = 0;
  p.weight_terms_max = k;
  p.activation_terms_max = t;
  p.weight_stop_threshold = 1e-300;
  p.activation_stop_threshold = 1e-300;
  return p;
}

// One lattice member per term pair of W x A.
std::vector<LatticeAccumulator> pair_members(const TensorExpansion& we, const TensorExpansion& ae) {
  auto grid = evaluate_pair_grid(we, ae);
  std::vector<LatticeAccumulator> out;
  for (const auto& p : grid.pairs) {
    out.emplace_back(grid.rows, grid.cols, grid.row_scale, grid.col_scale);
    out.back().add(p.product, p.shift);
  }
  return out;
}

ModelManifest scaled_mlp(const ModelManifest& m, const std::vector<double>& u) {
  ModelManifest out = m;
  const auto params = m.parameterized_layers();
  for (std::size_t n = 0; n < params.size(); ++n) {
    for (const auto& role : {"weight", "bias"}) {
      const auto& name = m.layers[params[n]].params.at(role);
      auto v = m.blobs.at(name).to_f64();
      for (double& x : v) x *= u[n];
      out.blobs[name] = Tensor::from_f64(m.blobs.at(name).shape(), v);
    }
  }
  return out;
}

Matrix linear_forward(const std::vector<double>& w, const Matrix& x, std::size_t out, std::size_t in,
                      const ExpansionPolicy& p) {
  const auto em = expand_model(testutil::linear_model(out, in, w, {}), p);
  return forward_expanded(em, x, {p.activation_terms_max, false}).logits;
}

}  // namespace

TEST_CASE("replication weights sum to one exactly") {
  for (std::size_t n = 1; n <= 200; ++n) {
    const auto w = replication_weights(n);
    REQUIRE(w.size() == n);
    CHECK(exact_sum(w) == 1.0);
    for (std::size_t i = 0; i + 1 < n; ++i) CHECK(w[i] == 1.0 / static_cast<double>(n));
  }
  CHECK(testutil::error_kind_of([] { replication_weights(0); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("abelian_add basics") {
  std::mt19937_64 rng(1);
  const auto a = testutil::random_matrix(3, 4, rng);
  CHECK(abelian_add({a}, {1.0}) == a);
  CHECK(abelian_add({Matrix(3, 4), Matrix(3, 4)}, {0.5, 2.0}) == Matrix(3, 4));
  CHECK(testutil::error_kind_of([&] { abelian_add({a, Matrix(2, 2)}, {1.0, 1.0}); }) == ErrorKind::ShapeMismatch);
  const auto b = testutil::random_matrix(3, 4, rng);
  const auto c = testutil::random_matrix(3, 4, rng);
  CHECK(abelian_add({a, b, c}, {0.1, 0.2, 0.3}) == abelian_add({c, a, b}, {0.3, 0.1, 0.2}));
}

TEST_CASE("lattice abelian_add is commutative and associative") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto we = expand_tensor(Tensor::from_f64({4, 6}, testutil::gaussian(24, rng)),
                                  QuantScheme::symmetric_nonsat(4, Granularity::channel(0)), 2);
    const auto ae = expand_tensor(Tensor::from_f64({6, 3}, testutil::gaussian(18, rng)),
                                  QuantScheme::symmetric_nonsat(4), 2);
    auto members = pair_members(we, ae);
    REQUIRE(members.size() == 4);
    const auto ref = abelian_add(members);
    std::vector<std::size_t> order{0, 1, 2, 3};
    do {
      std::vector<LatticeAccumulator> perm;
      for (auto i : order) perm.push_back(members[i]);
      CHECK(abelian_add(perm) == ref);
    } while (std::next_permutation(order.begin(), order.end()));
    const auto left = abelian_add({abelian_add({members[0], members[1]}), members[2]});
    const auto right = abelian_add({members[0], abelian_add({members[1], members[2]})});
    CHECK(left == right);
  }
}

TEST_CASE("zero model is the identity and digit negation the inverse") {
  std::mt19937_64 rng(3);
  const auto we = expand_tensor(Tensor::from_f64({3, 5}, testutil::gaussian(15, rng)),
                                QuantScheme::symmetric_nonsat(4, Granularity::channel(0)), 2);
  const auto ae = expand_tensor(Tensor::from_f64({5, 2}, testutil::gaussian(10, rng)),
                                QuantScheme::symmetric_nonsat(4), 3);
  auto zero_w = we;
  for (auto& t : zero_w.terms) std::fill(t.digits.begin(), t.digits.end(), 0);
  auto neg_w = we;
  for (auto& t : neg_w.terms)
    for (auto& d : t.digits) d = -d;
  const auto a = pair_members(we, ae);
  const auto z = pair_members(zero_w, ae);
  const auto n = pair_members(neg_w, ae);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(abelian_add({a[i], z[i]}) == a[i]);
    CHECK(abelian_add({a[i], n[i]}) == z[i]);
  }
}

TEST_CASE("single-layer linearity in weights and activations") {
  std::mt19937_64 rng(4);
  const auto p = precise_policy(8, 6, 6);
  for (int trial = 0; trial < 5; ++trial) {
    const auto w1 = testutil::gaussian(4 * 8, rng), w2 = testutil::gaussian(4 * 8, rng);
    std::vector<double> w12(w1.size());
    for (std::size_t i = 0; i < w1.size(); ++i) w12[i] = w1[i] + w2[i];
    const auto x = testutil::random_matrix(3, 8, rng);
    const auto sum = abelian_add({linear_forward(w1, x, 4, 8, p), linear_forward(w2, x, 4, 8, p)}, {1.0, 1.0});
    CHECK(max_abs_diff(sum.data, linear_forward(w12, x, 4, 8, p).data) <= 1e-10);

    const auto x2 = testutil::random_matrix(3, 8, rng);
    Matrix x12(3, 8);
    for (std::size_t i = 0; i < x12.data.size(); ++i) x12.data[i] = x.data[i] + x2.data[i];
    const auto asum = abelian_add({linear_forward(w1, x, 4, 8, p), linear_forward(w1, x2, 4, 8, p)}, {1.0, 1.0});
    CHECK(max_abs_diff(asum.data, linear_forward(w1, x12, 4, 8, p).data) <= 1e-10);
  }

  // on the lattice: digits add, products add, bit for bit
  std::uniform_int_distribution<int> d(-7, 7);
  Int32Matrix d1(4, 6), d2(4, 6), d12(4, 6), da(6, 3);
  for (std::size_t i = 0; i < d1.data.size(); ++i) {
    d1.data[i] = d(rng);
    d2.data[i] = d(rng);
    d12.data[i] = d1.data[i] + d2.data[i];
  }
  for (auto& v : da.data) v = d(rng);
  LatticeAccumulator l1(4, 3, std::vector<double>(4, 1.0), std::vector<double>(3, 1.0));
  auto l2 = l1, l12 = l1;
  l1.add(int_gemm(d1, da).acc, 3);
  l2.add(int_gemm(d2, da).acc, 3);
  l12.add(int_gemm(d12, da).acc, 3);
  CHECK(abelian_add({l1, l2}) == l12);
}

TEST_CASE("abelian_mul action") {
  const auto m = init_model(ArchSpec::mlp({3, 5, 4}), 7);
  const auto em = expand_model(m, precise_policy(8, 6, 6));
  CHECK(abelian_mul({1.0, 1.0}, em) == em);
  CHECK(abelian_mul({0.5, 3.0}, abelian_mul({2.0, 0.25}, em)) == abelian_mul({1.0, 0.75}, em));
  CHECK(testutil::error_kind_of([&] { abelian_mul({1.0}, em); }) == ErrorKind::ShapeMismatch);
  CHECK(testutil::error_kind_of([&] { abelian_mul({1.0, -1.0}, em); }) == ErrorKind::InvalidArgument);

  const auto basis = em.basis_models();
  REQUIRE(basis.size() == em.basis_count);
  CHECK(abelian_mul({1.0, 1.0}, basis[0]) == basis[0]);
  CHECK(abelian_mul({2.0, 3.0}, abelian_mul({0.5, 0.5}, basis[1])).scales == std::vector<double>{1.0, 1.5});

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> uu(0.25, 4.0);
  for (int trial = 0; trial < 5; ++trial) {
    const std::vector<double> u{uu(rng), uu(rng)};
    const auto x = testutil::random_matrix(6, 3, rng);
    const auto direct = expand_model(scaled_mlp(m, u), precise_policy(8, 6, 6));
    const auto a = forward_expanded(abelian_mul(u, em), x, {6, false}).logits;
    const auto b = forward_expanded(direct, x, {6, false}).logits;
    CHECK(max_abs_diff(a.data, b.data) <= 1e-10 * std::max(1.0, max_abs(b.data)));
  }
}

TEST_CASE("argmax is invariant under scaling of the final layer") {
  const auto m = init_model(ArchSpec::mlp({2, 8, 3}), 9);
  ExpansionPolicy p;
  const auto em = expand_model(m, p);
  std::mt19937_64 rng(10);
  const auto x = testutil::random_matrix(50, 2, rng, 2.0);
  const auto base = argmax_rows(forward_expanded(em, x).logits);
  for (double u : {0.01, 0.5, 3.0, 100.0})
    CHECK(argmax_rows(forward_expanded(abelian_mul({1.0, u}, em), x).logits) == base);
}

TEST_CASE("models without parameterized layers reduce to the original") {
  ModelManifest m;
  m.name = "plain";
  m.input_shape = {2, 3};
  m.layers.push_back({LayerKind::ReLU, "relu", {}, 1, 0});
  m.layers.push_back({LayerKind::Flatten, "flatten", {}, 1, 0});
  m.layers.push_back({LayerKind::Softmax, "softmax", {}, 1, 0});
  ExpansionPolicy p;
  p.scheme_a = QuantScheme::asymmetric_nonsat(4);
  p.activation_terms_max = 5;
  const auto em = expand_model(m, p);
  CHECK(em.basis_count == 2 * 6);
  std::mt19937_64 rng(11);
  const auto x = testutil::random_matrix(7, 6, rng);
  const auto f = forward_expanded(em, x);
  CHECK(f.output == fp_forward(m, x).output);
  CHECK(f.logits == fp_forward(m, x).logits);
}

TEST_CASE("exact expansions reproduce FP exactly") {
  const std::vector<double> w{0.875, -0.5, 0.25, 0.0, -0.875, 0.125};
  const auto m = testutil::linear_model(2, 3, w, {0.5, -0.25}, {LayerKind::Softmax});
  ExpansionPolicy p;
  p.first_last_bits = 0;
  const auto em = expand_model(m, p);
  const Matrix x(2, 3, std::vector<double>{0.875, 0.25, -0.5, 0.0, -0.875, 0.625});
  const auto f = forward_expanded(em, x);
  const auto fp = fp_forward(m, x);
  CHECK(f.logits == fp.logits);
  CHECK(f.output == fp.output);

  const auto zero = forward_expanded(expand_model(testutil::linear_model(2, 3, w, {}), p),
                                     Matrix(4, 3, 0.0));
  CHECK(zero.logits == Matrix(4, 2, 0.0));
}

TEST_CASE("two-layer MLP converges as t grows") {
  const auto m = init_model(ArchSpec::mlp({4, 12, 3}), 12);
  ExpansionPolicy p;
  p.activation_terms_max = 6;
  p.first_last_bits = 0;
  p.weight_terms_max = 4;
  p.weight_stop_threshold = 1e-12;
  const auto em = expand_model(m, p);
  // FP model carrying the reconstructed weights: the activation series alone
  // closes the gap to it.
  auto rec = m;
  for (auto l : em.parameterized())
    rec.blobs[m.layers[l].params.at("weight")] = reconstruct(em.layers[l]->weight);
  std::mt19937_64 rng(13);
  const auto x = testutil::random_matrix(16, 4, rng);
  const auto ref = fp_forward(rec, x);
  double prev = INFINITY;
  for (std::size_t t = 1; t <= 6; ++t) {
    const auto f = forward_expanded(em, x, {t, false});
    const double d = max_abs_diff(f.logits.data, ref.logits.data);
    CHECK(d <= prev);
    prev = d;
  }
  CHECK(prev < 1e-6);
  const auto f6 = forward_expanded(em, x, {6, false});
  CHECK(max_abs_diff(f6.logits.data, fp_forward(m, x).logits.data) < 1e-3);
}

TEST_CASE("first and last layers use the wider width") {
  const auto m = init_model(ArchSpec::mlp({2, 8, 8, 8, 3}), 14);
  ExpansionPolicy p;
  p.bits = 2;
  p.first_last_bits = 8;
  const auto em = expand_model(m, p);
  const auto idx = em.parameterized();
  REQUIRE(idx.size() == 4);
  CHECK(em.layers[idx[0]]->bits == 8);
  CHECK(em.layers[idx[1]]->bits == 2);
  CHECK(em.layers[idx[2]]->bits == 2);
  CHECK(em.layers[idx[3]]->bits == 8);
  p.first_last_bits = 0;
  CHECK(expand_model(m, p).layers[idx[0]]->bits == 2);
}

TEST_CASE("tree reduce plan gives the same forward") {
  const auto m = init_model(ArchSpec::smallconv({1, 6, 6}, 3, 3, 3), 15);
  ExpansionPolicy p;
  p.scheme_a = QuantScheme::asymmetric_nonsat(4);
  auto em = expand_model(m, p);
  std::mt19937_64 rng(16);
  const auto x = Matrix(5, 36, testutil::uniform(180, rng, 0, 1));
  const auto flat = forward_expanded(em, x);
  em.reduce_plan = ReducePlan::Tree;
  CHECK(forward_expanded(em, x).output == flat.output);
}

TEST_CASE("expanded model persistence is bit exact") {
  const auto dir = testutil::temp_dir("mexp");
  const auto m = init_model(ArchSpec::smallconv({1, 6, 6}, 3, 3, 3), 17);
  ExpansionPolicy p;
  p.scheme_w = QuantScheme{4, false, true, ClipMode::laplace(), Granularity::channel(0)};
  auto em = abelian_mul({1.5, 0.75}, expand_model(m, p));
  em.reduce_plan = ReducePlan::Tree;
  save_expanded(em, dir / "em");
  CHECK(is_expanded_dir(dir / "em"));
  CHECK_FALSE(is_expanded_dir(dir));
  const auto back = load_expanded(dir / "em");
  CHECK(back == em);
  std::mt19937_64 rng(18);
  const auto x = Matrix(3, 36, testutil::uniform(108, rng, 0, 1));
  CHECK(forward_expanded(back, x).output == forward_expanded(em, x).output);
  CHECK(testutil::error_kind_of([&] { load_expanded(dir / "missing"); }) == ErrorKind::Io);
}
