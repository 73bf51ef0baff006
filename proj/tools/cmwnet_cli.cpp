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
// cmwnet: generate datasets, train and meta-test weighting networks, compare runs.
//
//   cmwnet generate  --config exp.json [--seed S] [--out DIR]
//   cmwnet train     --config exp.json [--seed S] [--out DIR]
//   cmwnet meta-test --config exp.json --checkpoint RUN/checkpoint [--seed S] [--out DIR]
//   cmwnet compare   RUN_A RUN_B
//   cmwnet curves    RUN [--out DIR] [--points N] [--max-loss X] [--bins N]
//
// Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmwnet/errors.hpp"
#include "cmwnet/experiment.hpp"

namespace {

using nlohmann::json;

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

cmwnet::ExperimentConfig resolve(const GlobalOptions& g, const std::optional<std::string>& variant = {},
                                 const std::string& checkpoint = "") {
  if (g.config.empty()) throw cmwnet::ConfigError("--config is required");
  std::ifstream is(g.config);
  if (!is) throw cmwnet::IoError("cannot open config " + g.config);
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::exception& e) {
    throw cmwnet::ConfigError("config " + g.config + " is not valid JSON: " + e.what());
  }
  if (!doc.is_object()) throw cmwnet::ConfigError("config root must be an object");
  if (g.seed) doc["seed"] = *g.seed;
  if (!g.out.empty()) doc["output_dir"] = g.out;
  if (variant) doc["variant"] = *variant;
  if (!checkpoint.empty()) doc["meta_test"]["checkpoint"] = checkpoint;
  return cmwnet::parse_config(doc);
}

void print_summary(const cmwnet::RunSummary& s, const std::filesystem::path& out) {
  std::printf("accuracy %.4f after %ld iterations -> %s\n", s.report.accuracy, s.result.state.iteration,
              out.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-aware meta-learned sample re-weighting on synthetic benchmarks"};
  app.require_subcommand(1);
  GlobalOptions g;
  std::uint64_t seed = 0;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config, "experiment config (JSON)");
    sub->add_option("--seed", seed, "override the top-level seed")->each([&](const std::string&) { g.seed = seed; });
    sub->add_option("--out", g.out, "override output_dir");
  };

  auto* gen = app.add_subcommand("generate", "write the biased training set and clean test set");
  add_globals(gen);
  auto* train = app.add_subcommand("train", "meta-train (or ERM) per the config's variant");
  add_globals(train);
  auto* mtest = app.add_subcommand("meta-test", "train a fresh classifier with a frozen weight net");
  add_globals(mtest);
  std::string checkpoint;
  mtest->add_option("--checkpoint", checkpoint, "checkpoint directory holding the weight net");

  auto* cmp = app.add_subcommand("compare", "paired accuracy table of two runs");
  std::string run_a, run_b;
  cmp->add_option("run_a", run_a, "first run directory")->required();
  cmp->add_option("run_b", run_b, "second run directory")->required();

  auto* curves = app.add_subcommand("curves", "weight curves and loss histograms from a finished run");
  std::string run_dir, curves_out;
  cmwnet::ReportConfig report;
  curves->add_option("run", run_dir, "finished run directory")->required();
  curves->add_option("--out", curves_out, "destination (default: the run directory)");
  curves->add_option("--points", report.curve_points, "loss grid points per curve")->check(CLI::PositiveNumber);
  curves->add_option("--max-loss", report.curve_max_loss, "upper end of the loss grid")->check(CLI::NonNegativeNumber);
  curves->add_option("--bins", report.histogram_bins, "loss histogram bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve(g);
      const auto out = cmwnet::resolve_output_dir(cfg.output_dir);
      cmwnet::generate(cfg, out);
      std::printf("datasets -> %s\n", out.string().c_str());
    } else if (train->parsed()) {
      const auto cfg = resolve(g);
      if (cfg.train.variant == cmwnet::Variant::meta_test) {
        throw cmwnet::ConfigError("variant meta-test runs through the meta-test subcommand");
      }
      const auto out = cmwnet::resolve_output_dir(cfg.output_dir);
      print_summary(cmwnet::run(cfg, out), out);
    } else if (mtest->parsed()) {
      const auto cfg = resolve(g, std::string("meta-test"), checkpoint);
      const auto out = cmwnet::resolve_output_dir(cfg.output_dir);
      print_summary(cmwnet::run(cfg, out), out);
    } else if (cmp->parsed()) {
      std::cout << cmwnet::compare(run_a, run_b).to_csv();
    } else if (curves->parsed()) {
      const std::filesystem::path out = curves_out.empty() ? run_dir : curves_out;
      cmwnet::emit_curves(run_dir, out, report);
      std::printf("curves -> %s\n", out.string().c_str());
    }
  } catch (const cmwnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const cmwnet::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const cmwnet::IoError& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
