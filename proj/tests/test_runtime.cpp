#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "fixture.hpp"
#include "seriex/parallel.hpp"
#include "seriex/runtime.hpp"
#include "test_util.hpp"

using namespace seriex;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

void put_be32(std::string& s, std::uint32_t v) {
  for (int sh = 24; sh >= 0; sh -= 8) s.push_back(static_cast<char>((v >> sh) & 0xFF));
}

// Multinomial logistic regression by full-batch gradient descent.
double logistic_probe_accuracy(const Dataset& d) {
  const std::size_t n = d.size(), f = d.features.cols, c = d.num_classes;
  std::vector<double> w(c * (f + 1), 0.0);
  for (int it = 0; it < 300; ++it) {
    std::vector<double> g(w.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> z(c);
      double mx = -INFINITY;
      for (std::size_t k = 0; k < c; ++k) {
        z[k] = w[k * (f + 1) + f];
        for (std::size_t j = 0; j < f; ++j) z[k] += w[k * (f + 1) + j] * d.features(i, j);
        mx = std::max(mx, z[k]);
      }
      double s = 0;
      for (auto& v : z) s += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < c; ++k) {
        const double err = z[k] / s - (static_cast<int>(k) == d.labels[i] ? 1.0 : 0.0);
        for (std::size_t j = 0; j < f; ++j) g[k * (f + 1) + j] += err * d.features(i, j);
        g[k * (f + 1) + f] += err;
      }
    }
    for (std::size_t q = 0; q < w.size(); ++q) w[q] -= 0.5 * g[q] / static_cast<double>(n);
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double bv = -INFINITY;
    for (std::size_t k = 0; k < c; ++k) {
      double z = w[k * (f + 1) + f];
      for (std::size_t j = 0; j < f; ++j) z += w[k * (f + 1) + j] * d.features(i, j);
      if (z > bv) bv = z, best = k;
    }
    hit += static_cast<int>(best) == d.labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(n);
}

nlohmann::json without_timings(nlohmann::json j) {
  j.erase("timings");
  if (j.contains("reports"))
    for (auto& r : j["reports"]) r.erase("timings");
  return j;
}

}  // namespace

TEST_CASE("csv loading") {
  const auto dir = testutil::temp_dir("rt_csv");
  write_text(dir / "three.csv", "0.1,0.2,0\n0.3,0.4,1\n0.5,0.6,2");
  const auto d = load_dataset(dir / "three.csv", DatasetFormat::Csv);
  CHECK(d.features.rows == 3);
  CHECK(d.features.cols == 2);
  CHECK(d.labels == std::vector<int>{0, 1, 2});
  CHECK(d.num_classes == 3);
  CHECK(d.features(2, 1) == 0.6);
  CHECK_FALSE(d.has(Split::Test));

  write_text(dir / "bad.csv", "0.1,x,0\n");
  CHECK(testutil::error_kind_of([&] { load_dataset(dir / "bad.csv", DatasetFormat::Csv); }) == ErrorKind::Format);
  write_text(dir / "ragged.csv", "0.1,0.2,0\n0.3,1\n");
  CHECK(testutil::error_kind_of([&] { load_dataset(dir / "ragged.csv", DatasetFormat::Csv); }) == ErrorKind::Format);
  write_text(dir / "range.csv", "# seriex-dataset classes=2 test_from=2\n0.1,0\n0.2,5\n");
  CHECK(testutil::error_kind_of([&] { load_dataset(dir / "range.csv", DatasetFormat::Csv); }) ==
        ErrorKind::ShapeMismatch);
  CHECK(testutil::error_kind_of([&] { load_dataset(dir / "none.csv", DatasetFormat::Csv); }) == ErrorKind::Io);
}

TEST_CASE("idx loading") {
  const auto dir = testutil::temp_dir("rt_idx");
  std::string img, lab;
  put_be32(img, 0x803);
  put_be32(img, 2);
  put_be32(img, 2);
  put_be32(img, 2);
  for (int i = 0; i < 8; ++i) img.push_back(static_cast<char>(i * 30));
  put_be32(lab, 0x801);
  put_be32(lab, 2);
  lab.push_back(1);
  lab.push_back(0);
  write_text(dir / "img.idx", img);
  write_text(dir / "lab.idx", lab);
  const auto d = load_dataset(dir / "img.idx", DatasetFormat::Idx, dir / "lab.idx");
  CHECK(d.features.rows == 2);
  CHECK(d.features.cols == 4);
  CHECK(d.features(1, 3) == 210.0 / 255.0);
  CHECK(d.labels == std::vector<int>{1, 0});
  CHECK(dataset_format_from_path(dir / "img.idx") == DatasetFormat::Idx);

  auto wrong = img;
  wrong[3] = 0x01;
  write_text(dir / "wrong.idx", wrong);
  CHECK(testutil::error_kind_of([&] { load_dataset(dir / "wrong.idx", DatasetFormat::Idx, dir / "lab.idx"); }) ==
        ErrorKind::Format);
}

TEST_CASE("blobs round trip through csv") {
  const auto dir = testutil::temp_dir("rt_blobs");
  const auto d = make_blobs(4, 3, 1000, 5);
  save_csv(d, dir / "b.csv");
  const auto back = load_dataset(dir / "b.csv", DatasetFormat::Csv);
  CHECK(back.features == d.features);
  CHECK(back.labels == d.labels);
  CHECK(back.split == d.split);
  CHECK(back.num_classes == d.num_classes);
}

TEST_CASE("make_blobs") {
  const auto one = make_blobs(1, 2, 50, 3);
  for (int l : one.labels) CHECK(l == 0);

  const auto a = make_blobs(3, 2, 300, 11), b = make_blobs(3, 2, 300, 11);
  CHECK(a == b);
  CHECK_FALSE(make_blobs(3, 2, 300, 12) == a);

  const auto big = make_blobs(5, 2, 20000, 4);
  std::vector<std::vector<double>> mean(5, std::vector<double>(2, 0.0));
  std::vector<double> count(5, 0.0);
  for (std::size_t i = 0; i < big.size(); ++i) {
    count[static_cast<std::size_t>(big.labels[i])] += 1;
    for (std::size_t k = 0; k < 2; ++k) mean[static_cast<std::size_t>(big.labels[i])][k] += big.features(i, k);
  }
  for (std::size_t c = 0; c < 5; ++c)
    for (auto& v : mean[c]) v /= count[c];
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = i + 1; j < 5; ++j)
      CHECK(std::hypot(mean[i][0] - mean[j][0], mean[i][1] - mean[j][1]) >= 3.8);

  CHECK(big.select(Split::Test).size() == 4000);
  CHECK(logistic_probe_accuracy(fixture::blobs().select(Split::Train)) >= 0.95);
}

TEST_CASE("arch specs") {
  const auto a = ArchSpec::parse("mlp:2-16-16-3");
  CHECK(a.widths == std::vector<std::size_t>{2, 16, 16, 3});
  CHECK(ArchSpec::parse(a.describe()).widths == a.widths);
  const auto c = ArchSpec::parse("smallconv:1x8x8-4-3-3");
  CHECK(c.kind == ArchSpec::Kind::SmallConv);
  CHECK(c.input == Shape{1, 8, 8});
  CHECK(c.filters == 4);
  CHECK(testutil::error_kind_of([] { ArchSpec::parse("rnn:3"); }) == ErrorKind::Unsupported);
  CHECK(testutil::error_kind_of([] { ArchSpec::parse("mlp"); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("training") {
  const auto& m = fixture::mlp();
  CHECK(m.metadata.at("test_accuracy").get<double>() >= 0.95);

  TrainOptions o;
  o.epochs = 50;
  o.seed = 1;
  CHECK(train_fixture(ArchSpec::mlp({2, 16, 16, 3}), fixture::blobs(), o) == m);

  o.epochs = 0;
  const auto untrained = train_fixture(ArchSpec::mlp({2, 16, 16, 3}), fixture::blobs(), o);
  CHECK(untrained.blobs == init_model(ArchSpec::mlp({2, 16, 16, 3}), 1).blobs);
  CHECK(untrained.metadata.at("train_accuracy").get<double>() ==
        evaluate(untrained, fixture::blobs(), {Split::Train}).accuracy);

  o.epochs = 2;
  o.learning_rate = 1e300;
  CHECK(testutil::error_kind_of([&] { train_fixture(ArchSpec::mlp({2, 16, 16, 3}), fixture::blobs(), o); }) ==
        ErrorKind::NonFinite);
}

TEST_CASE("convnet trains on image-shaped blobs") {
  const auto d = make_blobs(3, 16, 600, 2);
  TrainOptions o;
  o.epochs = 10;
  const auto m = train_fixture(ArchSpec::smallconv({1, 4, 4}, 2, 3, 3), d, o);
  CHECK(m.metadata.at("test_accuracy").get<double>() >= 0.9);
  ExpansionPolicy p;
  const auto r = evaluate(expand_model(m, p), d);
  CHECK(r.accuracy >= r.fp_accuracy - 0.02);
}

TEST_CASE("FP evaluation matches the recorded accuracy") {
  const auto& m = fixture::mlp();
  const auto train = evaluate(m, fixture::blobs(), {Split::Train});
  CHECK(train.accuracy == m.metadata.at("train_accuracy").get<double>());
  const auto test = evaluate(m, fixture::blobs());
  CHECK(test.split == "test");
  CHECK(test.accuracy == m.metadata.at("test_accuracy").get<double>());
  CHECK(test.to_json().at("report_version") == 1);

  Dataset empty = fixture::blobs().select(Split::Train);
  empty.features = Matrix(0, 2);
  empty.labels.clear();
  empty.split.clear();
  CHECK(testutil::error_kind_of([&] { evaluate(m, empty); }) == ErrorKind::ShapeMismatch);
  const auto wide = make_blobs(3, 5, 30, 1);
  CHECK(testutil::error_kind_of([&] { evaluate(m, wide); }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("exact expansion has FP accuracy and zero differences") {
  const std::vector<double> w{0.875, -0.375, -1.75, 0.25, 0.4375, 0.3125};
  const auto m = testutil::linear_model(3, 2, w, {0.0, 0.5, -0.5}, {LayerKind::Softmax});
  Dataset d;
  d.num_classes = 3;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> v(-7, 7);
  std::vector<double> f(200 * 2);
  for (auto& x : f) x = v(rng);
  f[0] = 7;
  d.features = Matrix(200, 2, f);
  d.labels.resize(200);
  for (std::size_t i = 0; i < 200; ++i) d.labels[i] = static_cast<int>(i % 3);
  d.split.assign(200, Split::Test);
  ExpansionPolicy p;
  p.first_last_bits = 0;
  const auto r = evaluate(expand_model(m, p), d);
  CHECK(r.accuracy == r.fp_accuracy);
  CHECK(r.max_logit_diff == 0.0);
  for (double x : r.layer_max_diff) CHECK(x == 0.0);
}

TEST_CASE("expanded evaluation report") {
  const auto& m = fixture::mlp();
  ExpansionPolicy p;
  const auto em = expand_model(m, p);
  const auto r = evaluate(em, fixture::blobs());
  CHECK(r.model_kind == "expanded");
  CHECK(r.layer_max_diff.size() == m.layers.size());
  for (double x : r.layer_max_diff) CHECK(x >= 0.0);
  CHECK(r.term_counts.size() == 3);
  std::size_t pairs = 0;
  for (const auto& t : r.term_counts) pairs += t.pairs;
  CHECK(pairs == r.pair_count_total);
  CHECK(r.accuracy >= 0.0);
  CHECK(r.accuracy <= 1.0);
  CHECK(std::abs(r.accuracy - r.fp_accuracy) <= 0.005);

  const auto j = r.to_json();
  CHECK(j.at("policy").at("bits") == 4);
  CHECK(j.at("probe").at("per_layer_max_diff").size() == m.layers.size());
  CHECK_FALSE(r.to_json(false).contains("probe"));
}

TEST_CASE("evaluation is deterministic and thread-count independent") {
  const auto& m = fixture::mlp();
  ExpansionPolicy p;
  p.scheme_a = QuantScheme::asymmetric_nonsat(4);
  const auto saved = thread_count();
  set_thread_count(1);
  const auto one = without_timings(evaluate(expand_model(m, p), fixture::blobs()).to_json());
  set_thread_count(4);
  const auto four = without_timings(evaluate(expand_model(m, p), fixture::blobs()).to_json());
  set_thread_count(saved);
  CHECK(one.dump() == four.dump());
}

TEST_CASE("sweeps") {
  const auto& m = fixture::mlp();
  ExpansionPolicy p;
  const auto s = sweep_expansions(m, fixture::blobs(), p, {1, 2, 3, 4, 5});
  CHECK(s.monotone);
  REQUIRE(s.reports.size() == 5);
  for (std::size_t i = 1; i < 5; ++i) CHECK(s.reports[i].max_logit_diff < s.reports[i - 1].max_logit_diff);
  for (std::size_t i = 0; i < 5; ++i) CHECK(s.reports[i].act_terms == i + 1);
  std::istringstream plot(s.plot_data());
  std::string line;
  std::size_t rows = 0;
  while (std::getline(plot, line))
    if (!line.empty() && line[0] != '#') ++rows;
  CHECK(rows == 5);
  CHECK(s.to_json().at("reports").size() == 5);

  const auto single = sweep_expansions(m, fixture::blobs(), p, {1});
  CHECK(single.reports.size() == 1);
  CHECK(single.reports[0].act_terms == 1);

  SweepOptions faulty;
  faulty.fault_at = 3;
  CHECK(testutil::error_kind_of([&] { sweep_expansions(m, fixture::blobs(), p, {1, 2, 3, 4, 5}, faulty); }) ==
        ErrorKind::Assertion);
  faulty.assert_monotone = false;
  const auto quiet = sweep_expansions(m, fixture::blobs(), p, {1, 2, 3, 4, 5}, faulty);
  CHECK_FALSE(quiet.monotone);
  CHECK(quiet.violation.find("t=3 -> t=4") != std::string::npos);
  CHECK(testutil::error_kind_of([&] { sweep_expansions(m, fixture::blobs(), p, {}); }) ==
        ErrorKind::InvalidArgument);
}
