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
// Acceptance runner: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "cmwnet/biasgen.hpp"
#include "cmwnet/experiment.hpp"
#include "cmwnet/metaloop.hpp"
#include "cmwnet/taskfam.hpp"

namespace {

using namespace cmwnet;
using nlohmann::json;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

fs::path scratch_root() { return fs::temp_directory_path() / "cmwnet_acceptance"; }

fs::path fresh(const std::string& name) {
  const fs::path dir = scratch_root() / name;
  fs::remove_all(dir);
  return dir;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Desk benchmark: 10 classes in 8 dimensions, 500 clean rows per class.
json desk(std::uint64_t seed, const std::string& variant, const json& biases) {
  json doc;
  doc["seed"] = seed;
  doc["variant"] = variant;
  doc["dataset"] = {{"separation", 3.0}, {"sigma", 1.0}, {"biases", biases}};
  doc["model"] = {{"hidden", {256, 256}}};
  doc["schedule"] = {{"epochs", 60}, {"weight_decay", 0.0}, {"lr_milestones", {40, 50}}};
  if (variant != "erm") {
    doc["model"]["normalization"] = "none";
    doc["schedule"]["lr"] = 0.002;
    doc["schedule"]["meta_mixup"] = false;
  }
  return doc;
}

json symmetric40() { return json::array({{{"kind", "symmetric"}, {"level", 0.4}}}); }
json asymmetric40() { return json::array({{{"kind", "asymmetric"}, {"level", 0.4}}}); }

RunSummary run_doc(const json& doc, const fs::path& out) { return run(parse_config(doc), out); }

// ---------------------------------------------------------------------------

struct Instance {
  ClassifierParams w;
  WeightNetParams theta;
  TrainBatch batch;
  MetaBatch meta;
  Matrix z;
  std::vector<int> perm;
  double lambda = 0.0;
};

Instance random_instance(std::uint64_t seed) {
  Rng rng(seed);
  const int d = 3 + static_cast<int>(rng.uniform_index(4));
  const int h = 4 + static_cast<int>(rng.uniform_index(7));
  const int C = 3 + static_cast<int>(rng.uniform_index(3));
  const int n = 8, m = 8, K = 3;
  Instance in;
  in.w = init_classifier({d, h, C}, rng);
  in.theta = init_weightnet(8, K, rng);
  for (Eigen::Index i = 0; i < in.theta.size(); ++i) in.theta.flat(i) += 0.3 * rng.normal();
  in.batch.features.resize(n, d);
  for (Eigen::Index i = 0; i < in.batch.features.size(); ++i) in.batch.features.data()[i] = rng.normal();
  for (int i = 0; i < n; ++i) {
    in.batch.indices.push_back(i);
    in.batch.labels.push_back(static_cast<int>(rng.uniform_index(static_cast<std::size_t>(C))));
    in.batch.families.push_back(static_cast<int>(rng.uniform_index(K)));
  }
  in.meta.features.resize(m, d);
  for (Eigen::Index i = 0; i < in.meta.features.size(); ++i) in.meta.features.data()[i] = rng.normal();
  in.meta.targets = Matrix::Zero(m, C);
  for (int i = 0; i < m; ++i) in.meta.targets(i, static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::size_t>(C)))) = 1.0;
  in.z.resize(n, C);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < C; ++c) in.z(i, c) = rng.uniform() + 0.05;
    in.z.row(i) /= in.z.row(i).sum();
  }
  in.perm = rng.permutation(n);
  in.lambda = 0.5 + 0.5 * rng.uniform();
  return in;
}

Outcome hypergradient_exactness() {
  const double alpha = 0.5;
  double worst = 0.0;
  long max_params = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Instance in = random_instance(seed);
    max_params = std::max<long>(max_params, in.w.flat.size());
    for (int mode = 0; mode < 3; ++mode) {
      auto prepare = [&](const WeightNetParams& t) {
        if (mode == 2) return prepare_sl_step(in.w, t, in.batch, in.z, in.lambda, in.perm, 0.0);
        return prepare_step(in.w, t, in.batch, mode == 0 ? WeightNorm::none : WeightNorm::batch_sum, 0.0);
      };
      auto meta_loss_at = [&](const Vector& flat) {
        WeightNetParams t = in.theta;
        t.flat = flat;
        VirtualStepCache c = prepare(t);
        return meta_loss_and_grad(virtual_step(in.w, c, alpha), in.meta).first;
      };
      VirtualStepCache cache = prepare(in.theta);
      const ClassifierParams w_hat = virtual_step(in.w, cache, alpha);
      const Vector g = hypergrad(cache, w_hat, in.meta, in.theta).grad;
      const Vector fd = finite_diff_grad(meta_loss_at, in.theta.flat, 1e-6);
      const double rel = (g - fd).cwiseAbs().maxCoeff() / std::max(fd.cwiseAbs().maxCoeff(), 1e-12);
      worst = std::max(worst, rel);
    }
  }
  return {worst <= 1e-4 && max_params <= 200,
          "max relative error " + fmt("%.3e", worst) + " over 20 instances x 3 modes, max classifier size " +
              std::to_string(max_params)};
}

json reduction_doc(const std::string& variant) {
  json doc = desk(5, variant, symmetric40());
  doc["model"]["hidden"] = {64, 64};
  doc["schedule"]["epochs"] = 12;
  doc["schedule"]["lr_milestones"] = json::array();
  if (variant != "cmwnet-sl") doc["model"]["families"] = 1;
  return doc;
}

Outcome mwnet_reduction() {
  const fs::path a = fresh("c2_cmwnet_k1"), b = fresh("c2_mwnet");
  run_doc(reduction_doc("cmwnet"), a);
  run_doc(reduction_doc("mwnet"), b);
  const std::string ca = slurp(a / "metrics.csv"), cb = slurp(b / "metrics.csv");
  return {!ca.empty() && ca == cb, ca == cb ? "metrics.csv byte-identical" : "metrics.csv differs"};
}

double brute_force_wcss(std::vector<double> counts, int k) {
  std::sort(counts.begin(), counts.end());
  const int n = static_cast<int>(counts.size());
  auto group_cost = [&](int lo, int hi) {
    double mean = 0.0;
    for (int i = lo; i < hi; ++i) mean += counts[static_cast<std::size_t>(i)];
    mean /= hi - lo;
    double s = 0.0;
    for (int i = lo; i < hi; ++i) s += (counts[static_cast<std::size_t>(i)] - mean) * (counts[static_cast<std::size_t>(i)] - mean);
    return s;
  };
  double best = std::numeric_limits<double>::infinity();
  for (unsigned mask = 0; mask < (1u << (n - 1)); ++mask) {
    if (__builtin_popcount(mask) + 1 > k) continue;
    double cost = 0.0;
    int lo = 0;
    for (int i = 0; i < n - 1; ++i) {
      if (mask & (1u << i)) {
        cost += group_cost(lo, i + 1);
        lo = i + 1;
      }
    }
    best = std::min(best, cost + group_cost(lo, n));
  }
  return best;
}

Outcome kmeans_optimality() {
  Rng rng(2026);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = 1 + rng.uniform_index(8);
    const int k = 1 + static_cast<int>(rng.uniform_index(3));
    std::vector<double> counts;
    for (std::size_t i = 0; i < n; ++i) counts.push_back(static_cast<double>(1 + rng.uniform_index(1000)));
    Rng km(static_cast<std::uint64_t>(trial));
    const auto f = kmeans_1d(counts, k, 10, km);
    worst = std::max(worst, std::abs(wcss(counts, f.centers) - brute_force_wcss(counts, k)));
  }
  return {worst <= 1e-9, "max |WCSS - optimum| " + fmt("%.3e", worst) + " over 100 cases"};
}

Outcome noise_calibration() {
  const Dataset base = make_gaussian_classes(10, 8, 1000, 3.0, 1.0, 11);
  Rng sym_rng(12), pmd_rng(13);
  const double sym = inject_symmetric(base, 0.4, sym_rng).noise_rate();
  const PmdInjection pmd = inject_pmd(base, PmdType::type1, 0.35, pmd_rng);
  const double achieved = pmd.data.noise_rate();
  return {std::abs(sym - 0.36) <= 0.015 && pmd.feasible && std::abs(achieved - 0.35) <= 0.01,
          "symmetric 40% observed " + fmt("%.4f", sym) + ", PMD type-I 0.35 achieved " + fmt("%.4f", achieved)};
}

Outcome symmetric_efficacy() {
  const auto erm = run_doc(desk(1, "erm", symmetric40()), fresh("c5_erm"));
  const auto cmw = run_doc(desk(1, "cmwnet", symmetric40()), fresh("c5_cmwnet"));
  const double delta = 100.0 * (cmw.report.accuracy - erm.report.accuracy);
  const WeightSplit& s = cmw.report.weight_split;
  return {delta >= 3.0 && s.noisy_mean <= s.clean_mean - 0.2,
          "ERM " + fmt("%.4f", erm.report.accuracy) + ", CMW-Net " + fmt("%.4f", cmw.report.accuracy) + " (+" +
              fmt("%.2f", delta) + " pts); mean weight noisy " + fmt("%.3f", s.noisy_mean) + " vs clean " +
              fmt("%.3f", s.clean_mean)};
}

double tail_accuracy(const RunSummary& r, const std::vector<int>& counts) {
  std::vector<int> order(counts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return counts[a] < counts[b]; });
  double s = 0.0;
  for (int i = 0; i < 3; ++i) s += r.report.per_class_accuracy(order[static_cast<std::size_t>(i)]);
  return s / 3.0;
}

Outcome longtail_efficacy() {
  const json lt = json::array({{{"kind", "longtail"}, {"imbalance_factor", 100}}});
  std::vector<double> deltas;
  std::string detail = "tail-3 accuracy delta per seed:";
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto erm = run_doc(desk(seed, "erm", lt), fresh("c6_erm_" + std::to_string(seed)));
    const auto cmw = run_doc(desk(seed, "cmwnet", lt), fresh("c6_cmwnet_" + std::to_string(seed)));
    const auto counts = build_datasets(parse_config(desk(seed, "erm", lt)).dataset).train.class_counts();
    deltas.push_back(tail_accuracy(cmw, counts) - tail_accuracy(erm, counts));
    detail += " " + fmt("%+.4f", deltas.back());
  }
  const double med = median(deltas);
  return {med > 0.0, detail + "; median " + fmt("%+.4f", med)};
}

Outcome asymmetric_heterogeneity() {
  const auto r = run_doc(desk(1, "cmwnet", asymmetric40()), fresh("c7_cmwnet"));
  const Matrix& curves = r.report.weight_curves;
  double spread = 0.0;
  for (Eigen::Index a = 0; a < curves.rows(); ++a) {
    for (Eigen::Index b = a + 1; b < curves.rows(); ++b) {
      spread = std::max(spread, (curves.row(a) - curves.row(b)).cwiseAbs().maxCoeff());
    }
  }
  return {curves.rows() == 3 && spread >= 0.05,
          std::to_string(curves.rows()) + " curves, max pairwise sup-distance " + fmt("%.4f", spread)};
}

json transfer_doc(std::uint64_t seed, const std::string& variant, const fs::path& checkpoint) {
  json doc = desk(seed, variant == "meta-test" ? "cmwnet" : variant, asymmetric40());
  if (variant == "meta-test") {
    doc["variant"] = "meta-test";
    doc["meta_test"] = {{"checkpoint", checkpoint.string()}};
  }
  return doc;
}

Outcome transfer() {
  const fs::path source = fresh("c8_source");
  run_doc(desk(1, "cmwnet", symmetric40()), source);
  std::vector<double> deltas;
  std::string detail = "accuracy delta on query seeds:";
  for (std::uint64_t seed = 11; seed <= 13; ++seed) {
    const auto erm = run_doc(transfer_doc(seed, "erm", {}), fresh("c8_erm_" + std::to_string(seed)));
    const auto mt = run_doc(transfer_doc(seed, "meta-test", source / "checkpoint"),
                            fresh("c8_meta_test_" + std::to_string(seed)));
    deltas.push_back(100.0 * (mt.report.accuracy - erm.report.accuracy));
    detail += " " + fmt("%+.2f", deltas.back());
  }
  const double med = median(deltas);
  return {med > 0.0, detail + " pts; median " + fmt("%+.2f", med)};
}

json convergence_doc() {
  json doc = desk(1, "cmwnet", symmetric40());
  doc["model"]["normalization"] = "batch_sum";
  doc["schedule"] = {{"epochs", 60},        {"max_iterations", 2000}, {"weight_decay", 0.0},
                     {"lr_schedule", "decaying"}, {"decay_c", 0.1},  {"meta_optimizer", "sgd"},
                     {"warmup_epochs", 0},  {"meta_mixup", false}};
  return doc;
}

Outcome convergence_trend() {
  const auto r = run_doc(convergence_doc(), fresh("c9_decaying"));
  const auto& sq = r.result.hypergrad_sq;
  if (sq.size() < 2000) return {false, "only " + std::to_string(sq.size()) + " meta steps"};
  const double at50 = *std::min_element(sq.begin(), sq.begin() + 50);
  const double atT = *std::min_element(sq.begin(), sq.begin() + 2000);
  return {atT <= 0.5 * at50, "running min ||grad||^2 at t=50 " + fmt("%.4e", at50) + ", at T=2000 " +
                                 fmt("%.4e", atT) + " (ratio " + fmt("%.4f", atT / at50) + ")"};
}

Outcome sl_identity() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Instance in = random_instance(seed);
    in.z.setZero();
    for (int i = 0; i < 8; ++i) in.z(i, in.batch.labels[static_cast<std::size_t>(i)]) = 1.0;
    VirtualStepCache cache = prepare_sl_step(in.w, in.theta, in.batch, in.z, in.lambda, in.perm, 0.0);
    const ClassifierParams w_hat = virtual_step(in.w, cache, 0.5);
    worst = std::max(worst, hypergrad(cache, w_hat, in.meta, in.theta).grad.cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-10, "max |hypergradient| " + fmt("%.3e", worst) + " over 20 instances"};
}

Outcome determinism() {
  json sl = reduction_doc("cmwnet-sl");
  sl["schedule"]["epochs"] = 6;
  const std::vector<std::pair<std::string, json>> docs{{"cmwnet", reduction_doc("cmwnet")}, {"cmwnet-sl", sl}};
  std::string detail;
  bool ok = true;
  for (const auto& [name, doc] : docs) {
    const fs::path a = fresh("c11_" + name + "_a"), b = fresh("c11_" + name + "_b");
    run_doc(doc, a);
    run_doc(doc, b);
    const bool same = slurp(a / "metrics.csv") == slurp(b / "metrics.csv") &&
                      slurp(a / "weight_curve.csv") == slurp(b / "weight_curve.csv");
    ok = ok && same;
    detail += name + (same ? " identical; " : " differs; ");
  }
  // The transfer runs, when present, are repeated as well.
  const fs::path source = scratch_root() / "c8_source" / "checkpoint";
  if (fs::exists(source)) {
    const fs::path a = fresh("c11_meta_test");
    run_doc(transfer_doc(11, "meta-test", source), a);
    const bool same = slurp(a / "metrics.csv") == slurp(scratch_root() / "c8_meta_test_11" / "metrics.csv");
    ok = ok && same;
    detail += std::string("meta-test ") + (same ? "identical" : "differs");
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"hypergradient exactness", hypergradient_exactness},
      {"MW-Net reduction", mwnet_reduction},
      {"K-means optimality", kmeans_optimality},
      {"noise calibration", noise_calibration},
      {"symmetric-noise efficacy", symmetric_efficacy},
      {"long-tail efficacy", longtail_efficacy},
      {"asymmetric heterogeneity", asymmetric_heterogeneity},
      {"transfer", transfer},
      {"convergence trend", convergence_trend},
      {"SL identity", sl_identity},
      {"determinism", determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::printf("criterion %2d %-26s %s  %s  [%.1f s]\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
