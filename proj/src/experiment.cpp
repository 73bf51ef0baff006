/**
 * Copyright 2026 The cmwnet Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "cmwnet/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "cmwnet/errors.hpp"

namespace cmwnet {

using nlohmann::json;

namespace {

// Reads typed fields out of one JSON object and remembers which keys were used.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string prefix, std::vector<std::string>& errors)
      : obj_(obj), prefix_(std::move(prefix)), errors_(errors) {
    if (!obj_.is_object()) errors_.push_back(label("") + "must be an object");
  }

  bool has(const std::string& key) const { return obj_.is_object() && obj_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!has(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      errors_.push_back(label(key) + ": wrong type");
    }
  }

  template <typename T, typename Parse>
  void read_enum(const std::string& key, T& out, Parse parse) {
    std::string name;
    seen_.insert(key);
    if (!has(key)) return;
    if (!obj_.at(key).is_string()) {
      errors_.push_back(label(key) + ": expected a string");
      return;
    }
    try {
      out = parse(obj_.at(key).get<std::string>());
    } catch (const std::exception& e) {
      errors_.push_back(label(key) + ": " + e.what());
    }
  }

  const json& child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return has(key) ? obj_.at(key) : empty;
  }

  std::string label(const std::string& key) const { return prefix_ + key; }

  void finish() {
    if (!obj_.is_object()) return;
    for (const auto& item : obj_.items()) {
      if (!seen_.count(item.key())) errors_.push_back(label(item.key()) + ": unknown key");
    }
  }

 private:
  const json& obj_;
  std::string prefix_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

WeightNorm parse_norm(const std::string& s) {
  if (s == "none") return WeightNorm::none;
  if (s == "batch_sum") return WeightNorm::batch_sum;
  throw ConfigError("expected none or batch_sum, got '" + s + "'");
}
std::string norm_name(WeightNorm n) { return n == WeightNorm::none ? "none" : "batch_sum"; }

LrSchedule parse_schedule(const std::string& s) {
  if (s == "piecewise") return LrSchedule::piecewise;
  if (s == "decaying") return LrSchedule::decaying;
  throw ConfigError("expected piecewise or decaying, got '" + s + "'");
}
std::string schedule_name(LrSchedule s) { return s == LrSchedule::piecewise ? "piecewise" : "decaying"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd_momentum;
  throw ConfigError("expected adam or sgd, got '" + s + "'");
}
std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

NoiseKind parse_noise(const std::string& s) {
  if (s == "symmetric") return NoiseKind::symmetric;
  if (s == "asymmetric") return NoiseKind::asymmetric;
  throw ConfigError("expected symmetric or asymmetric, got '" + s + "'");
}
std::string noise_name(NoiseKind k) { return k == NoiseKind::symmetric ? "symmetric" : "asymmetric"; }

std::uint64_t default_bias_seed(std::uint64_t dataset_seed, std::size_t stage) {
  return splitmix64(dataset_seed ^ (0x5bd1e995ULL * (stage + 1)));
}

BiasSpec parse_bias(const json& j, const std::string& prefix, std::uint64_t default_seed,
                    std::vector<std::string>& errors) {
  BiasSpec b;
  b.seed = default_seed;
  FieldReader r(j, prefix, errors);
  r.read_enum("kind", b.kind, parse_bias_kind);
  if (!r.has("kind")) errors.push_back(r.label("kind") + ": required");
  r.read("level", b.level);
  r.read("imbalance_factor", b.imbalance_factor);
  r.read("seed", b.seed);
  r.read_enum("extra_kind", b.extra_kind, parse_noise);
  r.read("extra_level", b.extra_level);
  r.read("hybrid_pmd_type", b.hybrid_pmd_type);
  r.read("exclude_current", b.exclude_current);
  r.finish();
  try {
    validate(b);
  } catch (const std::exception& e) {
    errors.push_back(prefix + ": " + e.what());
  }
  return b;
}

json bias_json(const BiasSpec& b) {
  return {{"kind", to_string(b.kind)},
          {"level", b.level},
          {"imbalance_factor", b.imbalance_factor},
          {"seed", b.seed},
          {"extra_kind", noise_name(b.extra_kind)},
          {"extra_level", b.extra_level},
          {"hybrid_pmd_type", b.hybrid_pmd_type},
          {"exclude_current", b.exclude_current}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::vector<double> curve_grid(const ReportConfig& cfg) { return linear_grid(cfg.curve_max_loss, cfg.curve_points); }

}  // namespace

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig cfg;
  std::vector<std::string> errors;
  FieldReader top(doc, "", errors);
  top.read("seed", cfg.seed);
  top.read("output_dir", cfg.output_dir);
  top.read_enum("variant", cfg.train.variant, parse_variant);

  DatasetConfig& d = cfg.dataset;
  d.seed = cfg.seed;
  FieldReader ds(top.child("dataset"), "dataset.", errors);
  ds.read("classes", d.classes);
  ds.read("dim", d.dim);
  ds.read("per_class", d.per_class);
  ds.read("test_per_class", d.test_per_class);
  ds.read("separation", d.separation);
  ds.read("sigma", d.sigma);
  ds.read("seed", d.seed);
  const json& biases = ds.child("biases");
  if (ds.has("biases")) {
    if (!biases.is_array()) {
      errors.push_back("dataset.biases: expected an array");
    } else {
      for (std::size_t i = 0; i < biases.size(); ++i) {
        d.biases.push_back(parse_bias(biases[i], "dataset.biases[" + std::to_string(i) + "].",
                                      default_bias_seed(d.seed, i), errors));
      }
    }
  }
  ds.finish();
  if (d.classes < 2) errors.push_back("dataset.classes: must be >= 2");
  if (d.dim < 2) errors.push_back("dataset.dim: must be >= 2");
  if (d.per_class < 1) errors.push_back("dataset.per_class: must be >= 1");
  if (d.test_per_class < 1) errors.push_back("dataset.test_per_class: must be >= 1");
  if (!(d.separation > 0.0)) errors.push_back("dataset.separation: must be > 0");
  if (!(d.sigma > 0.0)) errors.push_back("dataset.sigma: must be > 0");

  TrainConfig& t = cfg.train;
  t.seed = cfg.seed;
  FieldReader model(top.child("model"), "model.", errors);
  model.read("hidden", t.hidden);
  model.read("families", t.families);
  model.read("weightnet_hidden", t.weightnet_hidden);
  model.read_enum("normalization", t.norm, parse_norm);
  model.read("loss_clamp", t.loss_clamp);
  model.finish();

  FieldReader sch(top.child("schedule"), "schedule.", errors);
  sch.read("epochs", t.epochs);
  sch.read("max_iterations", t.max_iterations);
  sch.read("batch_size", t.batch_size);
  sch.read("meta_batch_size", t.meta_batch_size);
  sch.read("lr", t.lr);
  sch.read("momentum", t.momentum);
  sch.read("weight_decay", t.weight_decay);
  sch.read("lr_milestones", t.lr_milestones);
  sch.read("lr_decay", t.lr_decay);
  sch.read_enum("lr_schedule", t.schedule, parse_schedule);
  sch.read("decay_c", t.decay_c);
  sch.read_enum("meta_optimizer", t.meta_optimizer, parse_optimizer);
  sch.read("meta_lr", t.meta_lr);
  sch.read("meta_weight_decay", t.meta_weight_decay);
  sch.read("meta_period", t.meta_period);
  sch.read("warmup_epochs", t.warmup_epochs);
  sch.read("meta_per_class", t.meta_per_class);
  sch.read("meta_mixup", t.meta_mixup);
  sch.read("meta_pseudo_labels", t.meta_pseudo_labels);
  sch.read("kmeans_restarts", t.kmeans_restarts);
  sch.finish();

  FieldReader sl(top.child("sl"), "sl.", errors);
  sl.read("te_momentum", t.te_momentum);
  sl.read("wa_momentum", t.wa_momentum);
  sl.read("mixup_gamma", t.mixup_gamma);
  sl.finish();

  FieldReader mt(top.child("meta_test"), "meta_test.", errors);
  mt.read("checkpoint", cfg.meta_test_checkpoint);
  mt.finish();

  FieldReader rep(top.child("report"), "report.", errors);
  rep.read("curve_points", cfg.report.curve_points);
  rep.read("curve_max_loss", cfg.report.curve_max_loss);
  rep.read("histogram_bins", cfg.report.histogram_bins);
  rep.finish();
  if (cfg.report.curve_points < 1) errors.push_back("report.curve_points: must be >= 1");
  if (!(cfg.report.curve_max_loss >= 0.0)) errors.push_back("report.curve_max_loss: must be >= 0");
  if (cfg.report.histogram_bins < 1) errors.push_back("report.histogram_bins: must be >= 1");
  top.finish();

  if (t.variant == Variant::meta_test && cfg.meta_test_checkpoint.empty()) {
    errors.push_back("meta_test.checkpoint: required for variant meta-test");
  }
  if (errors.empty()) {
    try {
      validate(t);
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

json to_json(const ExperimentConfig& cfg) {
  const TrainConfig& t = cfg.train;
  json biases = json::array();
  for (const auto& b : cfg.dataset.biases) biases.push_back(bias_json(b));
  return {
      {"seed", cfg.seed},
      {"output_dir", cfg.output_dir},
      {"variant", to_string(t.variant)},
      {"dataset",
       {{"classes", cfg.dataset.classes},
        {"dim", cfg.dataset.dim},
        {"per_class", cfg.dataset.per_class},
        {"test_per_class", cfg.dataset.test_per_class},
        {"separation", cfg.dataset.separation},
        {"sigma", cfg.dataset.sigma},
        {"seed", cfg.dataset.seed},
        {"biases", biases}}},
      {"model",
       {{"hidden", t.hidden},
        {"families", t.families},
        {"weightnet_hidden", t.weightnet_hidden},
        {"normalization", norm_name(t.norm)},
        {"loss_clamp", t.loss_clamp}}},
      {"schedule",
       {{"epochs", t.epochs},
        {"max_iterations", t.max_iterations},
        {"batch_size", t.batch_size},
        {"meta_batch_size", t.meta_batch_size},
        {"lr", t.lr},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"lr_milestones", t.lr_milestones},
        {"lr_decay", t.lr_decay},
        {"lr_schedule", schedule_name(t.schedule)},
        {"decay_c", t.decay_c},
        {"meta_optimizer", optimizer_name(t.meta_optimizer)},
        {"meta_lr", t.meta_lr},
        {"meta_weight_decay", t.meta_weight_decay},
        {"meta_period", t.meta_period},
        {"warmup_epochs", t.warmup_epochs},
        {"meta_per_class", t.meta_per_class},
        {"meta_mixup", t.meta_mixup},
        {"meta_pseudo_labels", t.meta_pseudo_labels},
        {"kmeans_restarts", t.kmeans_restarts}}},
      {"sl", {{"te_momentum", t.te_momentum}, {"wa_momentum", t.wa_momentum}, {"mixup_gamma", t.mixup_gamma}}},
      {"meta_test", {{"checkpoint", cfg.meta_test_checkpoint}}},
      {"report",
       {{"curve_points", cfg.report.curve_points},
        {"curve_max_loss", cfg.report.curve_max_loss},
        {"histogram_bins", cfg.report.histogram_bins}}}};
}

std::filesystem::path resolve_output_dir(const std::string& output_dir) {
  std::filesystem::path p(output_dir);
  const char* root = std::getenv("CMWNET_OUTPUT_ROOT");
  if (root != nullptr && *root != '\0' && p.is_relative()) return std::filesystem::path(root) / p;
  return p;
}

ExperimentData build_datasets(const DatasetConfig& cfg) {
  const GaussianMixtureSpec spec = make_mixture_spec(cfg.classes, cfg.dim, cfg.separation, cfg.sigma);
  Rng root(cfg.seed);
  Rng train_rng = root.fork(1);
  Rng test_rng = root.fork(2);
  ExperimentData data;
  data.train = sample_mixture(spec, cfg.per_class, train_rng);
  for (const auto& b : cfg.biases) data.train = apply_bias(data.train, b);
  data.test = sample_mixture(spec, cfg.test_per_class, test_rng);
  return data;
}

namespace {

void write_snapshot_and_data(const ExperimentConfig& cfg, const std::filesystem::path& out, const ExperimentData& data) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  write_text(out / "config.resolved.json", to_json(cfg).dump(2) + "\n");
  write_dataset(out / "train.cmwd", data.train);
  write_dataset(out / "test.cmwd", data.test);
}

}  // namespace

void generate(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  const ExperimentData data = build_datasets(cfg.dataset);
  write_snapshot_and_data(cfg, out, data);
  write_dataset_csv(out / "train.csv", data.train);
}

RunSummary run(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  const ExperimentData data = build_datasets(cfg.dataset);
  write_snapshot_and_data(cfg, out, data);
  const auto ckpt = out / "checkpoint";
  const TrainConfig& t = cfg.train;

  std::vector<MetricRow> rows;
  int families = 0;
  const EpochObserver observer = [&](const TrainState& state, const MetricRow& row) {
    families = state.theta.families;
    rows.push_back(row);
    save_checkpoint(ckpt, state, t);
  };

  RunSummary summary;
  try {
    if (t.variant == Variant::meta_test) {
      const TrainState source = load_checkpoint(cfg.meta_test_checkpoint);
      families = source.theta.families;
      summary.result = meta_test(source.theta, data.train, t, &data.test, observer);
    } else {
      summary.result = meta_train(data.train, t, &data.test, observer);
    }
  } catch (const NumericError&) {
    write_metrics_csv(out / "metrics.csv", rows, families);
    throw;
  }
  const TrainState& state = summary.result.state;
  write_metrics_csv(out / "metrics.csv", summary.result.log, state.theta.families);
  save_checkpoint(ckpt, state, t);

  MetricsReport& report = summary.report;
  report = evaluate(state.w, data.test);
  const bool weighted = t.variant != Variant::erm;
  if (weighted) {
    report.weight_split = weight_split(data.train, state.w, state.theta, state.omega, t.loss_clamp);
    const auto grid = curve_grid(cfg.report);
    report.loss_grid = Eigen::Map<const Vector>(grid.data(), static_cast<Eigen::Index>(grid.size()));
    report.weight_curves = weight_curve(state.theta, state.omega, grid);
    write_weight_curve_csv(out / "weight_curve.csv", grid, report.weight_curves);
  }
  write_confusion_csv(out / "confusion.csv", report.confusion);
  write_histogram_csv(out / "loss_histogram.csv", loss_histogram(data.train, state.w, cfg.report.histogram_bins));

  json per_class = json::array();
  for (Eigen::Index c = 0; c < report.per_class_accuracy.size(); ++c) per_class.push_back(nan_to_null(report.per_class_accuracy(c)));
  json doc = {{"variant", to_string(t.variant)},
              {"iterations", state.iteration},
              {"test_fingerprint", hex64(dataset_fingerprint(data.test))},
              {"test_size", data.test.size()},
              {"num_classes", data.test.num_classes},
              {"accuracy", report.accuracy},
              {"per_class_accuracy", per_class},
              {"train_size", data.train.size()},
              {"train_noise_rate", data.train.noise_rate()},
              {"train_class_counts", data.train.class_counts()},
              {"family_centers", state.omega.centers},
              {"class_to_family", state.omega.class_to_family}};
  if (weighted) {
    doc["weight_split"] = {{"noisy_mean", nan_to_null(report.weight_split.noisy_mean)},
                           {"clean_mean", nan_to_null(report.weight_split.clean_mean)},
                           {"noisy_count", report.weight_split.noisy_count},
                           {"clean_count", report.weight_split.clean_count}};
  }
  write_text(out / "report.json", doc.dump(2) + "\n");
  return summary;
}

std::string CompareTable::to_csv() const {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

CompareTable compare(const std::filesystem::path& run_a, const std::filesystem::path& run_b) {
  const json a = read_json(run_a / "report.json");
  const json b = read_json(run_b / "report.json");
  try {
    if (a.at("test_fingerprint") != b.at("test_fingerprint")) {
      throw ConfigError("compare: runs were evaluated on different test sets");
    }
    const int C = a.at("num_classes").get<int>();
    auto cell = [](const json& v) {
      if (v.is_null()) return std::string("nan");
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", v.get<double>());
      return std::string(buf);
    };
    auto delta = [&](const json& x, const json& y) {
      if (x.is_null() || y.is_null()) return std::string("nan");
      return cell(json(x.get<double>() - y.get<double>()));
    };
    CompareTable t;
    t.header = {"run", "overall"};
    for (int c = 0; c < C; ++c) t.header.push_back("class_" + std::to_string(c));
    std::vector<std::string> ra{"acc_a", cell(a.at("accuracy"))}, rb{"acc_b", cell(b.at("accuracy"))},
        rd{"delta", delta(a.at("accuracy"), b.at("accuracy"))};
    for (int c = 0; c < C; ++c) {
      const json& xa = a.at("per_class_accuracy").at(static_cast<std::size_t>(c));
      const json& xb = b.at("per_class_accuracy").at(static_cast<std::size_t>(c));
      ra.push_back(cell(xa));
      rb.push_back(cell(xb));
      rd.push_back(delta(xa, xb));
    }
    t.rows = {ra, rb, rd};
    return t;
  } catch (const json::exception& e) {
    throw IoError("compare: malformed report.json: " + std::string(e.what()));
  }
}

void emit_curves(const std::filesystem::path& run_dir, const std::filesystem::path& out, const ReportConfig& cfg) {
  const TrainState state = load_checkpoint(run_dir / "checkpoint");
  const Dataset train = read_dataset(run_dir / "train.cmwd");
  std::filesystem::create_directories(out);
  const auto grid = curve_grid(cfg);
  write_weight_curve_csv(out / "weight_curve.csv", grid, weight_curve(state.theta, state.omega, grid));
  write_histogram_csv(out / "loss_histogram.csv", loss_histogram(train, state.w, cfg.histogram_bins));
}

}  // namespace cmwnet
