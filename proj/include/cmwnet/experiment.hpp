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
#ifndef CMWNET_EXPERIMENT_HPP
#define CMWNET_EXPERIMENT_HPP

// Declarative experiments: a JSON config resolves to a fully materialized
// snapshot, and every artifact of a run is a function of that snapshot.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmwnet/biasgen.hpp"
#include "cmwnet/metaloop.hpp"
#include "cmwnet/metrics.hpp"

namespace cmwnet {

struct DatasetConfig {
  int classes = 10;
  int dim = 8;
  int per_class = 500;
  int test_per_class = 200;
  double separation = 3.0;
  double sigma = 1.0;
  std::uint64_t seed = 0;
  std::vector<BiasSpec> biases;  // applied in order
};

struct ReportConfig {
  int curve_points = 101;
  double curve_max_loss = 10.0;
  int histogram_bins = 20;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  DatasetConfig dataset;
  TrainConfig train;
  std::string meta_test_checkpoint;  // weight net source for variant meta-test
  ReportConfig report;
};

/// Parses a config document, filling defaults. Unknown keys and invalid values
/// are collected and reported together as a ConfigError.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
/// The resolved snapshot: every field, defaults included.
nlohmann::json to_json(const ExperimentConfig& cfg);

/// output_dir, placed under $CMWNET_OUTPUT_ROOT when that is set and the path is relative.
std::filesystem::path resolve_output_dir(const std::string& output_dir);

struct ExperimentData {
  Dataset train;
  Dataset test;  // clean draw from the same mixture
};

ExperimentData build_datasets(const DatasetConfig& cfg);

/// generate: config.resolved.json, train.cmwd, test.cmwd, train.csv.
void generate(const ExperimentConfig& cfg, const std::filesystem::path& out);

struct RunSummary {
  MetricsReport report;
  TrainResult result;
};

/// train / meta-test: config.resolved.json, train.cmwd, test.cmwd, metrics.csv,
/// checkpoint/, report.json, confusion.csv, weight_curve.csv, loss_histogram.csv.
/// The checkpoint is refreshed after every epoch, so a numeric abort leaves the
/// last good one in place.
RunSummary run(const ExperimentConfig& cfg, const std::filesystem::path& out);

struct CompareTable {
  std::vector<std::string> header;  // "run", "overall", "class_0", ...
  std::vector<std::vector<std::string>> rows;
  std::string to_csv() const;
};

/// Paired accuracy of two finished runs; throws ConfigError when their test sets differ.
CompareTable compare(const std::filesystem::path& run_a, const std::filesystem::path& run_b);

/// Weight curves and the loss histogram from a finished run's checkpoint and training set.
void emit_curves(const std::filesystem::path& run_dir, const std::filesystem::path& out, const ReportConfig& cfg);

}  // namespace cmwnet

#endif  // CMWNET_EXPERIMENT_HPP
