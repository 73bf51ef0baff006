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
#ifndef CMWNET_METRICS_HPP
#define CMWNET_METRICS_HPP

// Evaluation and the tabular data behind loss/weight plots.

#include <filesystem>
#include <span>
#include <vector>

#include "cmwnet/biasgen.hpp"
#include "cmwnet/models.hpp"
#include "cmwnet/taskfam.hpp"

namespace cmwnet {

using IntMatrix = Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct WeightSplit {
  double noisy_mean = 0.0;  // NaN when there are no noisy rows
  double clean_mean = 0.0;
  long noisy_count = 0;
  long clean_count = 0;
};

struct MetricsReport {
  double accuracy = 0.0;
  Vector per_class_accuracy;  // NaN for classes absent from the test set
  IntMatrix confusion;        // [true x predicted]
  WeightSplit weight_split;
  Vector loss_grid;
  Matrix weight_curves;  // [K x grid]
};

/// Accuracy and confusion of `predictions` against `truth`. Throws
/// std::invalid_argument on empty or mismatched input.
MetricsReport evaluate_predictions(std::span<const int> predictions, std::span<const int> truth, int classes);

/// Argmax predictions of w against the clean labels of `test`.
MetricsReport evaluate(const ClassifierParams& w, const Dataset& test);

/// Row k is head k of the weight net over `loss_grid`. Throws
/// std::invalid_argument unless the grid is ascending and nonnegative.
Matrix weight_curve(const WeightNetParams& theta, const FamilyIndex& omega, std::span<const double> loss_grid);

/// `points` evenly spaced losses on [0, max_loss].
std::vector<double> linear_grid(double max_loss, int points);

/// Mean learned weight of noisy (observed != clean) and clean training rows
/// under the current classifier.
WeightSplit weight_split(const Dataset& train, const ClassifierParams& w, const WeightNetParams& theta,
                         const FamilyIndex& omega, double loss_clamp = 0.0);

struct LossHistogram {
  int classes = 0;
  Vector edges;       // bins + 1, edges(0) = 0
  IntMatrix clean;    // [C x bins]
  IntMatrix noisy;    // [C x bins]
};

/// Training-loss counts per observed class on [0, max loss], split by whether
/// the observed label is correct. The last bin is closed on the right.
LossHistogram loss_histogram(const Dataset& data, const ClassifierParams& w, int bins);

void write_weight_curve_csv(const std::filesystem::path& path, std::span<const double> grid, const Matrix& curves);
void write_histogram_csv(const std::filesystem::path& path, const LossHistogram& hist);
void write_confusion_csv(const std::filesystem::path& path, const IntMatrix& confusion);

}  // namespace cmwnet

#endif  // CMWNET_METRICS_HPP
