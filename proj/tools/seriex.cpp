#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "seriex/modelexpand.hpp"
#include "seriex/parallel.hpp"
#include "seriex/runtime.hpp"
#include "seriex/tensorio.hpp"

using namespace seriex;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Exit codes
constexpr int kOk = 0;
constexpr int kGeneric = 1;
constexpr int kIo = 2;
constexpr int kUnsupported = 3;
constexpr int kDataMismatch = 4;
constexpr int kAssertion = 5;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io:
    case ErrorKind::Format: return kIo;
    case ErrorKind::Unsupported: return kUnsupported;
    case ErrorKind::ShapeMismatch:
    case ErrorKind::NonFinite: return kDataMismatch;
    case ErrorKind::Assertion: return kAssertion;
    case ErrorKind::InvalidArgument:
    case ErrorKind::Overflow: return kGeneric;
  }
  return kGeneric;
}

struct SchemeFlag {
  bool symmetric = true;
  bool saturated = false;
};

SchemeFlag parse_scheme(const std::string& s) {
  std::string norm = s;
  for (char& c : norm)
    if (c == 'x' && &c != &norm.front()) c = '-';
  if (norm == "sym-nonsat") return {true, false};
  if (norm == "sym-sat") return {true, true};
  if (norm == "asym-nonsat") return {false, false};
  if (norm == "asym-sat") return {false, true};
  fail(ErrorKind::InvalidArgument, "unknown scheme '" + s + "' (expected sym-nonsat, sym-sat, asym-nonsat, asym-sat)");
}

ClipMode parse_clip(const std::string& s) {
  if (s == "laplace") return ClipMode::laplace();
  if (s.rfind("fixed:", 0) == 0) {
    const auto body = s.substr(6);
    const auto comma = body.find(',');
    require(comma != std::string::npos, ErrorKind::InvalidArgument, "--clip fixed:<lo>,<hi>");
    try {
      return ClipMode::fixed(std::stod(body.substr(0, comma)), std::stod(body.substr(comma + 1)));
    } catch (const std::exception&) {
      fail(ErrorKind::InvalidArgument, "--clip fixed:<lo>,<hi> needs two numbers");
    }
  }
  fail(ErrorKind::InvalidArgument, "unknown clip mode '" + s + "' (expected laplace or fixed:<lo>,<hi>)");
}

void apply_scheme(QuantScheme& q, const std::optional<std::string>& scheme, const std::optional<std::string>& clip) {
  if (scheme) {
    const auto f = parse_scheme(*scheme);
    q.symmetric = f.symmetric;
    q.saturated = f.saturated;
    q.clip = f.saturated ? (q.clip.kind == ClipMode::Kind::None ? ClipMode::laplace() : q.clip) : ClipMode::none();
  }
  if (clip) {
    require(q.saturated, ErrorKind::InvalidArgument, "--clip requires a saturated scheme (sym-sat or asym-sat)");
    q.clip = parse_clip(*clip);
  }
}

std::vector<std::size_t> parse_t_range(const std::string& s) {
  std::vector<std::size_t> out;
  const auto dots = s.find("..");
  try {
    if (dots != std::string::npos) {
      const auto a = std::stoul(s.substr(0, dots)), b = std::stoul(s.substr(dots + 2));
      require(a >= 1 && a <= b, ErrorKind::InvalidArgument, "--t-range a..b needs 1 <= a <= b");
      for (auto t = a; t <= b; ++t) out.push_back(t);
      return out;
    }
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoul(tok));
  } catch (const std::logic_error&) {
    fail(ErrorKind::InvalidArgument, "bad --t-range '" + s + "'");
  }
  require(!out.empty(), ErrorKind::InvalidArgument, "--t-range is empty");
  return out;
}

json read_config(const std::optional<std::string>& path) {
  if (!path) return json::object();
  std::ifstream in(*path);
  require(static_cast<bool>(in), ErrorKind::Io, "input not found: " + *path);
  try {
    json j;
    in >> j;
    require(j.is_object(), ErrorKind::Format, *path + ": config must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, *path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open for writing: " + path);
  out << text;
  require(static_cast<bool>(out), ErrorKind::Io, "write failed: " + path);
}

void emit(const json& j, const std::optional<std::string>& path) {
  const std::string text = j.dump(2) + "\n";
  if (path)
    write_text(*path, text);
  else
    std::cout << text;
}

/// Options shared by quantize / eval / sweep. Values left empty fall back to
/// the config file, then to the defaults.
struct PolicyFlags {
  std::optional<int> bits;
  std::optional<std::size_t> terms;
  std::optional<std::size_t> weight_terms;
  std::optional<std::size_t> act_terms;
  std::optional<std::string> scheme;
  std::optional<std::string> clip;
  std::optional<int> first_last_bits;

  void add_to(CLI::App* app) {
    app->add_option("--bits", bits, "Digit width X (2, 4 or 8)");
    app->add_option("--terms", terms, "Shorthand for --weight-terms and --act-terms");
    app->add_option("--weight-terms", weight_terms, "Maximum weight terms k");
    app->add_option("--act-terms", act_terms, "Maximum activation terms t");
    app->add_option("--scheme", scheme, "sym-nonsat | sym-sat | asym-nonsat | asym-sat");
    app->add_option("--clip", clip, "laplace | fixed:<lo>,<hi>");
    app->add_option("--first-last-bits", first_last_bits, "Width of the first and last layers (0 = --bits)");
  }

  ExpansionPolicy resolve(const json& config) const {
    ExpansionPolicy p;
    if (config.contains("policy")) p = policy_from_json(config["policy"]);
    if (bits) p.bits = *bits;
    if (terms) p.weight_terms_max = p.activation_terms_max = *terms;
    if (weight_terms) p.weight_terms_max = *weight_terms;
    if (act_terms) p.activation_terms_max = *act_terms;
    if (first_last_bits) p.first_last_bits = *first_last_bits;
    apply_scheme(p.scheme_w, scheme, clip);
    apply_scheme(p.scheme_a, scheme, clip);
    p.scheme_w.bits = p.scheme_a.bits = p.bits;
    p.validate();
    return p;
  }
};

std::string fmt(double v, int prec = 6) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

// ---------------------------------------------------------------------------

struct ExpandTensorArgs {
  std::string input;
  int bits = 4;
  std::size_t terms = 2;
  std::string scheme = "sym-nonsat";
  std::optional<std::string> clip;
  std::optional<std::size_t> axis;
  std::optional<std::string> out_dir;
};

int cmd_expand_tensor(const ExpandTensorArgs& a) {
  const Tensor m = read_tensor(a.input);
  QuantScheme q;
  q.bits = a.bits;
  apply_scheme(q, a.scheme, a.clip);
  if (a.axis) q.granularity = Granularity::channel(*a.axis);
  q.validate();
  const auto e = expand_tensor(m, q, a.terms);
  const auto rec = reconstruct(e).to_f64();
  const auto values = m.to_f64();

  // Per-channel bound check on the symmetric part (the correction is exact).
  const std::size_t n = values.size();
  std::vector<double> channel_residual(e.channels, 0.0);
  double residual_max = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::fabs(values[i] - rec[i]);
    const auto c = e.channel_of(i);
    channel_residual[c] = std::max(channel_residual[c], r);
    residual_max = std::max(residual_max, r);
  }
  bool bound_ok = true;
  json channels = json::array();
  for (std::size_t c = 0; c < e.channels; ++c) {
    const double bound = relaxed_bound(e.terms.front().scales[c], q.bits, a.terms);
    const bool ok = channel_residual[c] <= bound;
    bound_ok = bound_ok && ok;
    channels.push_back({{"channel", c}, {"residual_max", channel_residual[c]}, {"bound", bound}, {"ok", ok}});
  }

  json terms = json::array();
  for (std::size_t t = 0; t < e.terms.size(); ++t) {
    std::int32_t peak = 0;
    std::size_t nonzero = 0;
    for (auto d : e.terms[t].digits) {
      peak = std::max(peak, d < 0 ? -d : d);
      nonzero += d != 0;
    }
    json tj = {{"index", t + 1}, {"scales", e.terms[t].scales}, {"max_abs_digit", peak}, {"nonzero", nonzero}};
    if (a.out_dir) {
      fs::create_directories(*a.out_dir);
      const auto file = fs::path(*a.out_dir) / ("term" + std::to_string(t + 1) + ".sqtf");
      write_tensor(Tensor::from_packed(m.shape(), e.terms[t].digits, q.bits), file);
      tj["digits_file"] = file.string();
    }
    terms.push_back(tj);
  }
  json out = {{"report_version", 1},
              {"command", "expand-tensor"},
              {"input", a.input},
              {"shape", m.shape()},
              {"scheme", scheme_to_json(q)},
              {"terms", terms},
              {"bias", e.bias},
              {"saturation_nnz", e.saturation ? e.saturation->nnz() : 0},
              {"residual_max", residual_max},
              {"channels", channels},
              {"bound_ok", bound_ok}};
  std::cout << out.dump(2) << "\n";
  std::cerr << "expand-tensor: " << e.terms.size() << " terms, residual " << fmt(residual_max) << ", bound "
            << (bound_ok ? "ok" : "VIOLATED") << "\n";
  return bound_ok ? kOk : kAssertion;
}

// ---------------------------------------------------------------------------

struct ModelArgs {
  std::string model;
  std::optional<std::string> out;
  std::optional<std::string> config;
  PolicyFlags policy;
};

int cmd_quantize(const ModelArgs& a) {
  const json config = read_config(a.config);
  const auto policy = a.policy.resolve(config);
  const auto model = load_model(a.model);
  const auto em = expand_model(model, policy);
  require(a.out.has_value(), ErrorKind::InvalidArgument, "quantize: --out is required");
  save_expanded(em, *a.out);

  json layers = json::array();
  std::cerr << "layer          kind     bits  weight_terms\n";
  for (std::size_t l = 0; l < em.layers.size(); ++l) {
    if (!em.layers[l]) continue;
    const auto& el = *em.layers[l];
    layers.push_back({{"layer", l},
                      {"name", el.name},
                      {"kind", layer_kind_name(el.kind)},
                      {"bits", el.bits},
                      {"weight_terms", el.weight.term_count()}});
    std::cerr << std::left << std::setw(15) << el.name << std::setw(9) << layer_kind_name(el.kind) << std::setw(6)
              << el.bits << el.weight.term_count() << "\n";
  }
  json out = {{"report_version", 1},
              {"command", "quantize"},
              {"model", model.name},
              {"output", *a.out},
              {"policy", policy_to_json(policy)},
              {"grid_shape", {policy.weight_terms_max, policy.activation_terms_max}},
              {"basis_count", em.basis_count},
              {"replication_factor", em.replication_factor},
              {"layers", layers}};
  std::cout << out.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct DataArgs {
  std::string path;
  std::optional<std::string> labels;
  std::optional<std::string> format;
  std::optional<std::string> split;
};

Dataset load_data(const DataArgs& d) {
  DatasetFormat f = dataset_format_from_path(d.path);
  if (d.format) {
    if (*d.format == "csv")
      f = DatasetFormat::Csv;
    else if (*d.format == "idx")
      f = DatasetFormat::Idx;
    else
      fail(ErrorKind::InvalidArgument, "--format must be csv or idx");
  }
  return load_dataset(d.path, f, d.labels ? std::optional<fs::path>(*d.labels) : std::nullopt);
}

std::optional<Split> parse_split(const std::optional<std::string>& s) {
  if (!s || *s == "auto") return std::nullopt;
  if (*s == "train") return Split::Train;
  if (*s == "test") return Split::Test;
  fail(ErrorKind::InvalidArgument, "--split must be train, test or auto");
}

void print_report_table(const EvalReport& r) {
  std::cerr << "model " << r.model_id << " (" << r.model_kind << "), " << r.samples << " " << r.split
            << " samples\n  accuracy " << fmt(r.accuracy) << "  fp " << fmt(r.fp_accuracy);
  if (r.model_kind == "expanded") std::cerr << "  max logit diff " << fmt(r.max_logit_diff);
  std::cerr << "\n";
  for (const auto& t : r.term_counts)
    std::cerr << "  " << std::left << std::setw(12) << t.name << " int" << t.bits << "  k=" << t.weight_terms
              << " t=" << t.act_terms << " pairs=" << t.pairs << "\n";
}

struct EvalArgs {
  ModelArgs model;
  DataArgs data;
  bool probe = false;
  bool no_stop = false;
  std::size_t probe_size = 256;
};

/// An FP model directory evaluates as FP unless policy flags ask for an expansion.
bool wants_expansion(const PolicyFlags& p, const json& config) {
  return p.bits || p.terms || p.weight_terms || p.act_terms || p.scheme || p.clip || p.first_last_bits ||
         config.contains("policy");
}

int cmd_eval(const EvalArgs& a) {
  const json config = read_config(a.model.config);
  const Dataset data = load_data(a.data);
  EvalOptions eo;
  eo.split = parse_split(a.data.split);
  eo.probe_size = a.probe_size;
  eo.use_stop_rule = !a.no_stop;
  EvalReport r;
  if (is_expanded_dir(a.model.model)) {
    const auto em = load_expanded(a.model.model);
    if (a.model.policy.act_terms) eo.act_terms = *a.model.policy.act_terms;
    r = evaluate(em, data, eo);
  } else {
    const auto model = load_model(a.model.model);
    if (wants_expansion(a.model.policy, config)) {
      const auto policy = a.model.policy.resolve(config);
      r = evaluate(expand_model(model, policy), data, eo);
    } else {
      r = evaluate(model, data, eo);
    }
  }
  emit(r.to_json(a.probe), a.model.out);
  print_report_table(r);
  return kOk;
}

struct SweepArgs {
  ModelArgs model;
  DataArgs data;
  std::string t_range = "1..5";
  std::optional<std::string> plot;
  bool no_assert = false;
  std::optional<std::size_t> inject_fault;
  std::size_t probe_size = 256;
};

int cmd_sweep(const SweepArgs& a) {
  const json config = read_config(a.model.config);
  const auto policy = a.model.policy.resolve(config);
  const auto model = load_model(a.model.model);
  const Dataset data = load_data(a.data);
  const auto ts = parse_t_range(config.contains("t_range") && a.t_range == "1..5"
                                    ? config["t_range"].get<std::string>()
                                    : a.t_range);
  SweepOptions so;
  so.assert_monotone = false;
  so.eval.split = parse_split(a.data.split);
  so.eval.probe_size = a.probe_size;
  if (a.inject_fault) so.fault_at = *a.inject_fault;
  const auto res = sweep_expansions(model, data, policy, ts, so);

  emit(res.to_json(), a.model.out);
  if (a.plot) write_text(*a.plot, res.plot_data());
  std::cerr << "t    accuracy   max_diff\n";
  for (std::size_t i = 0; i < res.reports.size(); ++i)
    std::cerr << std::left << std::setw(5) << res.t_values[i] << std::setw(11) << fmt(res.reports[i].accuracy)
              << fmt(res.reports[i].max_logit_diff) << (res.knee && *res.knee == res.t_values[i] ? "  <- knee" : "")
              << "\n";
  if (!res.monotone && !a.no_assert) {
    std::cerr << "error: max difference is not strictly decreasing in t (" << res.violation << ")\n";
    return kAssertion;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct BlobsArgs {
  std::size_t classes = 3, dim = 2, samples = 3000;
  std::uint64_t seed = 7;
  std::string out;
};

int cmd_make_blobs(const BlobsArgs& a) {
  save_csv(make_blobs(a.classes, a.dim, a.samples, a.seed), a.out);
  std::cerr << "wrote " << a.samples << " samples to " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  DataArgs data;
  std::string arch = "mlp:2-16-16-3";
  TrainOptions opts;
  std::string out;
};

int cmd_train(const TrainArgs& a) {
  const Dataset data = load_data(a.data);
  const auto m = train_fixture(ArchSpec::parse(a.arch), data, a.opts);
  save_model(m, a.out);
  std::cerr << "trained " << m.name << ": train accuracy " << fmt(m.metadata["train_accuracy"].get<double>());
  if (m.metadata.contains("test_accuracy"))
    std::cerr << ", test accuracy " << fmt(m.metadata["test_accuracy"].get<double>());
  std::cerr << "\n";
  std::cout << json{{"report_version", 1}, {"command", "train"}, {"model", m.name}, {"output", a.out},
                    {"metadata", m.metadata}}
                   .dump(2)
            << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seriex: low-bit series expansion of tensors and models"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::size_t> threads;
  std::optional<std::uint64_t> seed;
  app.add_option("--threads", threads, "Worker cap (default: SERIEX_THREADS or all cores)");

  ExpandTensorArgs et;
  auto* c_et = app.add_subcommand("expand-tensor", "Expand one SQTF tensor and check the residual bound");
  c_et->add_option("input", et.input, "SQTF tensor")->required();
  c_et->add_option("--bits", et.bits, "Digit width X (2, 4 or 8)");
  c_et->add_option("--terms", et.terms, "Number of terms n");
  c_et->add_option("--scheme", et.scheme, "sym-nonsat | sym-sat | asym-nonsat | asym-sat");
  c_et->add_option("--clip", et.clip, "laplace | fixed:<lo>,<hi>");
  c_et->add_option("--axis", et.axis, "Per-channel axis (default per-tensor)");
  c_et->add_option("--out-dir", et.out_dir, "Write term digit tensors here");
  c_et->add_option("--seed", seed, "Accepted for uniformity; unused");

  ModelArgs qa;
  auto* c_q = app.add_subcommand("quantize", "Expand a model and persist the expanded model");
  c_q->add_option("model", qa.model, "Model directory")->required();
  c_q->add_option("-o,--out", qa.out, "Output directory")->required();
  c_q->add_option("--config", qa.config, "JSON config file");
  c_q->add_option("--seed", seed, "Accepted for uniformity; unused");
  qa.policy.add_to(c_q);

  EvalArgs ea;
  auto* c_e = app.add_subcommand("eval", "Evaluate an FP or expanded model");
  c_e->add_option("model", ea.model.model, "Model or expanded-model directory")->required();
  c_e->add_option("dataset", ea.data.path, "Dataset (csv or idx images)")->required();
  c_e->add_option("--labels", ea.data.labels, "idx label file");
  c_e->add_option("--format", ea.data.format, "csv | idx");
  c_e->add_option("--split", ea.data.split, "train | test | auto");
  c_e->add_option("-o,--out", ea.model.out, "Write the report here instead of stdout");
  c_e->add_option("--config", ea.model.config, "JSON config file");
  c_e->add_flag("--probe", ea.probe, "Add per-layer difference arrays");
  c_e->add_option("--probe-size", ea.probe_size, "Probe batch size");
  c_e->add_flag("--no-stop", ea.no_stop, "Use exactly --act-terms activation terms");
  c_e->add_option("--seed", seed, "Accepted for uniformity; unused");
  ea.model.policy.add_to(c_e);

  SweepArgs sa;
  auto* c_s = app.add_subcommand("sweep", "Accuracy and max difference for a range of activation terms");
  c_s->add_option("model", sa.model.model, "Model directory")->required();
  c_s->add_option("dataset", sa.data.path, "Dataset")->required();
  c_s->add_option("--labels", sa.data.labels, "idx label file");
  c_s->add_option("--format", sa.data.format, "csv | idx");
  c_s->add_option("--split", sa.data.split, "train | test | auto");
  c_s->add_option("--t-range", sa.t_range, "a..b or a,b,c");
  c_s->add_option("--plot", sa.plot, "Columnar plot data (t accuracy max_diff)");
  c_s->add_option("-o,--out", sa.model.out, "Write the report list here instead of stdout");
  c_s->add_option("--config", sa.model.config, "JSON config file");
  c_s->add_flag("--no-assert", sa.no_assert, "Do not fail on a non-decreasing max difference");
  c_s->add_option("--probe-size", sa.probe_size, "Probe batch size");
  c_s->add_option("--inject-fault", sa.inject_fault, "Testing: corrupt the expansion at this sweep position")
      ->group("");
  c_s->add_option("--seed", seed, "Accepted for uniformity; unused");
  sa.model.policy.add_to(c_s);

  BlobsArgs ba;
  auto* c_b = app.add_subcommand("make-blobs", "Write a Gaussian-blobs fixture dataset as csv");
  c_b->add_option("--classes", ba.classes);
  c_b->add_option("--dim", ba.dim);
  c_b->add_option("--samples", ba.samples);
  c_b->add_option("--seed", ba.seed);
  c_b->add_option("-o,--out", ba.out)->required();

  TrainArgs ta;
  auto* c_t = app.add_subcommand("train", "Train a fixture model with plain SGD");
  c_t->add_option("dataset", ta.data.path, "Dataset")->required();
  c_t->add_option("--labels", ta.data.labels, "idx label file");
  c_t->add_option("--format", ta.data.format, "csv | idx");
  c_t->add_option("--arch", ta.arch, "mlp:2-16-16-3 | smallconv:1x8x8-4-3-3");
  c_t->add_option("--epochs", ta.opts.epochs);
  c_t->add_option("--batch-size", ta.opts.batch_size);
  c_t->add_option("--lr", ta.opts.learning_rate);
  c_t->add_option("--seed", ta.opts.seed);
  c_t->add_option("-o,--out", ta.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kGeneric;
  }

  try {
    auto config_threads = [&](const std::optional<std::string>& cfg) -> std::optional<std::size_t> {
      const auto j = read_config(cfg);
      if (j.contains("threads")) return j["threads"].get<std::size_t>();
      return std::nullopt;
    };
    std::optional<std::string> cfg = c_q->parsed() ? qa.config : c_e->parsed() ? ea.model.config
                                     : c_s->parsed()                           ? sa.model.config
                                                                               : std::nullopt;
    if (threads)
      set_thread_count(*threads);
    else if (auto t = config_threads(cfg))
      set_thread_count(*t);

    if (c_et->parsed()) return cmd_expand_tensor(et);
    if (c_q->parsed()) return cmd_quantize(qa);
    if (c_e->parsed()) return cmd_eval(ea);
    if (c_s->parsed()) return cmd_sweep(sa);
    if (c_b->parsed()) return cmd_make_blobs(ba);
    if (c_t->parsed()) return cmd_train(ta);
  } catch (const Error& e) {
    std::cerr << "error (" << error_kind_name(e.kind()) << "): " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error (format): " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kGeneric;
  }
  return kGeneric;
}
