#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "seriex/modelexpand.hpp"

namespace seriex {

// ---------------------------------------------------------------------------
// Datasets

enum class DatasetFormat { Csv, Idx };
enum class Split : std::uint8_t { Train = 0, Test = 1 };

struct Dataset {
  Matrix features;  // rows = samples
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::vector<Split> split;  // one tag per sample
  std::string source = "memory";

  std::size_t size() const noexcept { return labels.size(); }
  /// rows == labels == split tags; labels in [0, num_classes).
  void validate() const;
  Dataset select(Split s) const;
  bool has(Split s) const;
  bool operator==(const Dataset&) const = default;
};

/// CSV: numeric feature columns then an integer label per line. Lines starting
/// with '#' are comments; "# seriex-dataset classes=C test_from=N" restores the
/// class count and the train/test boundary written by save_csv.
/// IDX: `path` is the image file (magic 0x00000803), `labels_path` the label
/// file (magic 0x00000801); pixels are scaled to [0, 1].
Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                     const std::optional<std::filesystem::path>& labels_path = std::nullopt);
DatasetFormat dataset_format_from_path(const std::filesystem::path& path);
void save_csv(const Dataset& d, const std::filesystem::path& path);

/// Gaussian clusters (unit standard deviation) around centers at least 4
/// standard deviations apart. The last 20% of the shuffled samples are the
/// test split.
Dataset make_blobs(std::size_t classes, std::size_t dim, std::size_t samples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Fixture models

struct ArchSpec {
  enum class Kind { Mlp, SmallConv };
  Kind kind = Kind::Mlp;
  /// Mlp: layer widths, input first, classes last.
  std::vector<std::size_t> widths = {2, 16, 16, 3};
  /// SmallConv: input (C, H, W), one conv with `filters` kernels of size
  /// `kernel` (stride 1, padding kernel/2), relu, flatten, linear to `classes`.
  Shape input = {1, 8, 8};
  std::size_t filters = 4;
  std::size_t kernel = 3;
  std::size_t classes = 3;

  static ArchSpec mlp(std::vector<std::size_t> widths);
  static ArchSpec smallconv(Shape input, std::size_t filters, std::size_t kernel, std::size_t classes);
  /// "mlp:2-16-16-3" or "smallconv:1x8x8-4-3-3" (input, filters, kernel, classes).
  static ArchSpec parse(const std::string& text);
  std::string describe() const;
};

/// Initialized (untrained) model for the architecture.
ModelManifest init_model(const ArchSpec& arch, std::uint64_t seed);

struct TrainOptions {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 1;
};

/// Minibatch SGD on softmax cross-entropy over the train split. Single
/// threaded and seeded, so the result is bit-reproducible. Records
/// train_accuracy / test_accuracy in the manifest metadata.
ModelManifest train_fixture(const ArchSpec& arch, const Dataset& data, const TrainOptions& opts);

// ---------------------------------------------------------------------------
// Reference inference and evaluation

struct FpTrace {
  Matrix logits;
  Matrix output;
  std::vector<Matrix> layer_outputs;
};

FpTrace fp_forward(const ModelManifest& m, const Matrix& batch);

std::vector<int> argmax_rows(const Matrix& m);
double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

struct LayerTermCount {
  std::size_t layer = 0;
  std::string name;
  int bits = 0;
  std::size_t weight_terms = 0;
  std::size_t act_terms = 0;
  std::size_t pairs = 0;
};

struct EvalReport {
  std::string model_id;
  std::string model_kind = "fp";  // "fp" or "expanded"
  std::optional<ExpansionPolicy> policy;
  std::size_t act_terms = 0;
  std::string split = "test";
  std::size_t samples = 0;
  double accuracy = 0.0;
  double fp_accuracy = 0.0;
  /// Max |FP - expanded| of the final logits and of every layer output on the probe batch.
  double max_logit_diff = 0.0;
  std::vector<double> layer_max_diff;
  std::vector<LayerTermCount> term_counts;
  std::size_t pair_count_total = 0;
  /// Wall-clock seconds per phase; excluded from report comparisons.
  std::vector<std::pair<std::string, double>> timings;

  nlohmann::json to_json(bool include_probe = true) const;
};

struct EvalOptions {
  /// Empty = test split when present, else the whole dataset.
  std::optional<Split> split;
  std::size_t probe_size = 256;
  std::size_t act_terms = 0;  // 0 = policy maximum
  bool use_stop_rule = true;
};

EvalReport evaluate(const ModelManifest& m, const Dataset& data, const EvalOptions& opts = {});
EvalReport evaluate(const ExpandedModel& em, const Dataset& data, const EvalOptions& opts = {});

struct SweepOptions {
  EvalOptions eval;
  bool assert_monotone = true;
  double knee_threshold = 1e-4;
  /// Test hook: corrupts the expansion at this position of t_range.
  std::optional<std::size_t> fault_at;
};

struct SweepResult {
  std::vector<std::size_t> t_values;
  std::vector<EvalReport> reports;
  std::optional<std::size_t> knee;  // first t with max diff below the threshold
  bool monotone = true;
  std::string violation;  // "t=a -> t=b: x >= y" when not monotone

  nlohmann::json to_json() const;
  /// Whitespace separated columns: t accuracy max_diff.
  std::string plot_data() const;
};

/// One report per t with exactly t activation terms (no early stop), all on
/// one weight expansion. Throws ErrorKind::Assertion when the max logit
/// difference is not strictly decreasing and assert_monotone is set.
SweepResult sweep_expansions(const ModelManifest& m, const Dataset& data, const ExpansionPolicy& policy,
                             const std::vector<std::size_t>& t_range, const SweepOptions& opts = {});

}  // namespace seriex
