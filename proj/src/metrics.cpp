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
#include "cmwnet/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

#include "cmwnet/errors.hpp"

namespace cmwnet {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  return os;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

MetricsReport evaluate_predictions(std::span<const int> predictions, std::span<const int> truth, int classes) {
  if (predictions.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (predictions.size() != truth.size()) throw DimensionError("evaluate: predictions and labels differ in length");
  if (classes < 1) throw std::invalid_argument("evaluate: classes must be >= 1");
  MetricsReport r;
  r.confusion = IntMatrix::Zero(classes, classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i];
    const int p = predictions[i];
    if (t < 0 || t >= classes || p < 0 || p >= classes) throw IndexError("evaluate: label out of range");
    ++r.confusion(t, p);
  }
  r.accuracy = static_cast<double>(r.confusion.trace()) / static_cast<double>(truth.size());
  r.per_class_accuracy.resize(classes);
  for (int c = 0; c < classes; ++c) {
    const long total = r.confusion.row(c).sum();
    r.per_class_accuracy(c) = total > 0 ? static_cast<double>(r.confusion(c, c)) / static_cast<double>(total) : kNaN;
  }
  r.weight_split.noisy_mean = kNaN;
  r.weight_split.clean_mean = kNaN;
  return r;
}

MetricsReport evaluate(const ClassifierParams& w, const Dataset& test) {
  if (test.size() == 0) throw std::invalid_argument("evaluate: empty test set");
  if (test.dim() != w.input_dim()) throw DimensionError("evaluate: feature dimension does not match the classifier");
  const Labels pred = classifier_predict(w, test.features);
  return evaluate_predictions(pred, test.clean_labels, test.num_classes);
}

Matrix weight_curve(const WeightNetParams& theta, const FamilyIndex& omega, std::span<const double> loss_grid) {
  if (omega.families() != theta.families) throw ConfigError("weight_curve: family count does not match the weight net");
  for (std::size_t i = 0; i < loss_grid.size(); ++i) {
    if (!(loss_grid[i] >= 0.0) || (i > 0 && loss_grid[i] < loss_grid[i - 1])) {
      throw std::invalid_argument("weight_curve: grid must be ascending and nonnegative");
    }
  }
  Matrix curves(theta.families, static_cast<Eigen::Index>(loss_grid.size()));
  for (std::size_t i = 0; i < loss_grid.size(); ++i) {
    curves.col(static_cast<Eigen::Index>(i)) = weightnet_forward(theta, loss_grid[i]);
  }
  return curves;
}

std::vector<double> linear_grid(double max_loss, int points) {
  if (points < 1 || !(max_loss >= 0.0)) throw std::invalid_argument("linear_grid: need points >= 1 and max_loss >= 0");
  std::vector<double> grid(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) grid[static_cast<std::size_t>(i)] = points == 1 ? 0.0 : max_loss * i / (points - 1);
  return grid;
}

WeightSplit weight_split(const Dataset& train, const ClassifierParams& w, const WeightNetParams& theta,
                         const FamilyIndex& omega, double loss_clamp) {
  const Vector losses = classifier_forward(w, train.features, train.observed_labels).losses;
  double noisy = 0.0, clean = 0.0;
  WeightSplit s;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const int fam = omega.class_to_family[static_cast<std::size_t>(train.observed_labels[i])];
    double l = losses(static_cast<Eigen::Index>(i));
    if (loss_clamp > 0.0) l = std::min(l, loss_clamp);
    const double v = weightnet_head(theta, l, fam);
    if (train.observed_labels[i] != train.clean_labels[i]) {
      noisy += v;
      ++s.noisy_count;
    } else {
      clean += v;
      ++s.clean_count;
    }
  }
  s.noisy_mean = s.noisy_count > 0 ? noisy / static_cast<double>(s.noisy_count) : kNaN;
  s.clean_mean = s.clean_count > 0 ? clean / static_cast<double>(s.clean_count) : kNaN;
  return s;
}

LossHistogram loss_histogram(const Dataset& data, const ClassifierParams& w, int bins) {
  if (bins < 1) throw std::invalid_argument("loss_histogram: bins must be >= 1");
  LossHistogram h;
  h.classes = data.num_classes;
  h.clean = IntMatrix::Zero(data.num_classes, bins);
  h.noisy = IntMatrix::Zero(data.num_classes, bins);
  const Vector losses = data.size() > 0 ? classifier_forward(w, data.features, data.observed_labels).losses : Vector();
  const double top = losses.size() > 0 ? losses.maxCoeff() : 0.0;
  h.edges.resize(bins + 1);
  for (int b = 0; b <= bins; ++b) h.edges(b) = top * b / bins;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double l = losses(static_cast<Eigen::Index>(i));
    int b = top > 0.0 ? static_cast<int>(std::floor(l / top * bins)) : 0;
    b = std::clamp(b, 0, bins - 1);
    auto& target = data.observed_labels[i] == data.clean_labels[i] ? h.clean : h.noisy;
    ++target(data.observed_labels[i], b);
  }
  return h;
}

void write_weight_curve_csv(const std::filesystem::path& path, std::span<const double> grid, const Matrix& curves) {
  if (curves.cols() != static_cast<Eigen::Index>(grid.size())) throw DimensionError("weight curve / grid size mismatch");
  auto os = open_csv(path);
  os << "loss";
  for (Eigen::Index k = 0; k < curves.rows(); ++k) os << ",family_" << k;
  os << '\n';
  for (std::size_t i = 0; i < grid.size(); ++i) {
    os << fmt(grid[i]);
    for (Eigen::Index k = 0; k < curves.rows(); ++k) os << ',' << fmt(curves(k, static_cast<Eigen::Index>(i)));
    os << '\n';
  }
}

void write_histogram_csv(const std::filesystem::path& path, const LossHistogram& hist) {
  auto os = open_csv(path);
  os << "class,bin_lo,bin_hi,clean_count,noisy_count\n";
  for (int c = 0; c < hist.classes; ++c) {
    for (Eigen::Index b = 0; b < hist.clean.cols(); ++b) {
      os << c << ',' << fmt(hist.edges(b)) << ',' << fmt(hist.edges(b + 1)) << ',' << hist.clean(c, b) << ','
         << hist.noisy(c, b) << '\n';
    }
  }
}

void write_confusion_csv(const std::filesystem::path& path, const IntMatrix& confusion) {
  auto os = open_csv(path);
  for (Eigen::Index j = 0; j < confusion.cols(); ++j) os << (j ? "," : "") << "pred_" << j;
  os << '\n';
  for (Eigen::Index i = 0; i < confusion.rows(); ++i) {
    for (Eigen::Index j = 0; j < confusion.cols(); ++j) os << (j ? "," : "") << confusion(i, j);
    os << '\n';
  }
}

}  // namespace cmwnet
