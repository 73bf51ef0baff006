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
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "cmwnet/metrics.hpp"

namespace cmwnet {
namespace {

TEST(Evaluate, PerfectPredictionsGiveDiagonalConfusion) {
  const std::vector<int> y{0, 1, 2, 2, 1, 0};
  const auto r = evaluate_predictions(y, y, 3);
  EXPECT_EQ(r.accuracy, 1.0);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_EQ(r.confusion(i, j), i == j ? 2 : 0);
  }
}

TEST(Evaluate, ConstantPredictorOnBalancedData) {
  std::vector<int> y, p;
  for (int c = 0; c < 4; ++c) {
    for (int k = 0; k < 5; ++k) {
      y.push_back(c);
      p.push_back(2);
    }
  }
  const auto r = evaluate_predictions(p, y, 4);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.25);
  EXPECT_EQ(r.per_class_accuracy(2), 1.0);
  EXPECT_EQ(r.per_class_accuracy(0), 0.0);
}

TEST(Evaluate, AgreesWithNaiveRecount) {
  Rng rng(1);
  std::vector<int> y, p;
  for (int i = 0; i < 500; ++i) {
    y.push_back(static_cast<int>(rng.uniform_index(7)));
    p.push_back(rng.uniform() < 0.6 ? y.back() : static_cast<int>(rng.uniform_index(7)));
  }
  const auto r = evaluate_predictions(p, y, 7);
  int hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hits += y[i] == p[i];
  EXPECT_EQ(r.accuracy, hits / 500.0);
  EXPECT_EQ(static_cast<double>(r.confusion.trace()) / 500.0, r.accuracy);
  for (int c = 0; c < 7; ++c) {
    long total = 0;
    for (int t : y) total += t == c;
    EXPECT_EQ(r.confusion.row(c).sum(), total);
  }
}

TEST(Evaluate, EmptyOrMismatchedInputThrows) {
  const std::vector<int> none;
  EXPECT_THROW(evaluate_predictions(none, none, 3), std::invalid_argument);
  const std::vector<int> a{1, 2}, b{1};
  EXPECT_THROW(evaluate_predictions(a, b, 3), std::invalid_argument);
  Dataset empty;
  empty.num_classes = 3;
  EXPECT_THROW(evaluate(ClassifierParams::zeros({2, 3}), empty), std::invalid_argument);
}

TEST(WeightCurve, ZeroWeightNetIsOneHalfEverywhere) {
  const auto theta = WeightNetParams::zeros(100, 3);
  FamilyIndex omega{{10.0, 100.0, 500.0}, {0, 1, 2}, 3};
  const auto grid = linear_grid(5.0, 11);
  const Matrix c = weight_curve(theta, omega, grid);
  ASSERT_EQ(c.rows(), 3);
  ASSERT_EQ(c.cols(), 11);
  EXPECT_TRUE((c.array() == 0.5).all());
}

TEST(WeightCurve, ColumnsMatchDirectEvaluation) {
  Rng rng(2);
  const auto theta = init_weightnet(30, 2, rng);
  FamilyIndex omega{{5.0, 50.0}, {0, 1}, 2};
  const std::vector<double> grid{0.0, 0.3, 1.7, 9.0};
  const Matrix c = weight_curve(theta, omega, grid);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    EXPECT_EQ(Vector(c.col(static_cast<Eigen::Index>(i))), weightnet_forward(theta, grid[i]));
  }
  EXPECT_TRUE((c.array() > 0.0).all() && (c.array() < 1.0).all());
  const std::vector<double> bad{1.0, 0.5};
  EXPECT_THROW(weight_curve(theta, omega, bad), std::invalid_argument);
}

Dataset noisy_toy() {
  Dataset d = make_gaussian_classes(4, 3, 40, 2.0, 1.0, 3);
  for (std::size_t i = 0; i < d.size(); i += 5) d.observed_labels[i] = (d.observed_labels[i] + 1) % 4;
  return d;
}

TEST(LossHistogram, UniformModelOccupiesOneBin) {
  const Dataset d = noisy_toy();
  const auto w = ClassifierParams::zeros({3, 4});
  const auto h = loss_histogram(d, w, 10);
  EXPECT_NEAR(h.edges(10), std::log(4.0), 1e-12);
  long occupied = 0;
  for (Eigen::Index b = 0; b < 10; ++b) occupied += (h.clean.col(b).sum() + h.noisy.col(b).sum()) > 0;
  EXPECT_EQ(occupied, 1);
}

TEST(LossHistogram, ConservationAndRecount) {
  const Dataset d = noisy_toy();
  Rng rng(4);
  const auto w = init_classifier({3, 6, 4}, rng);
  const int bins = 7;
  const auto h = loss_histogram(d, w, bins);
  long noisy = 0;
  for (std::size_t i = 0; i < d.size(); ++i) noisy += d.observed_labels[i] != d.clean_labels[i];
  EXPECT_EQ(h.noisy.sum(), noisy);
  EXPECT_EQ(h.clean.sum() + h.noisy.sum(), static_cast<long>(d.size()));
  const Vector losses = classifier_forward(w, d.features, d.observed_labels).losses;
  IntMatrix expect = IntMatrix::Zero(4, bins);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.observed_labels[i] != d.clean_labels[i]) continue;
    const double l = losses(static_cast<Eigen::Index>(i));
    int b = 0;
    while (b < bins - 1 && l >= h.edges(b + 1)) ++b;
    ++expect(d.observed_labels[i], b);
  }
  EXPECT_EQ(h.clean, expect);
}

TEST(WeightSplit, SeparatesNoisyAndCleanRows) {
  const Dataset d = noisy_toy();
  const auto theta = WeightNetParams::zeros(10, 1);
  FamilyIndex omega{{40.0}, {0, 0, 0, 0}, 1};
  const auto s = weight_split(d, ClassifierParams::zeros({3, 4}), theta, omega);
  EXPECT_EQ(s.noisy_count, 32);
  EXPECT_EQ(s.clean_count, 128);
  EXPECT_EQ(s.noisy_mean, 0.5);
  EXPECT_EQ(s.clean_mean, 0.5);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

TEST(Csv, Schemas) {
  const auto dir = std::filesystem::temp_directory_path() / "cmwnet_metrics_csv";
  std::filesystem::create_directories(dir);
  const std::vector<double> grid{0.0, 1.0};
  Matrix curves(2, 2);
  curves << 0.5, 0.25, 0.75, 0.125;
  write_weight_curve_csv(dir / "wc.csv", grid, curves);
  EXPECT_EQ(slurp(dir / "wc.csv"), "loss,family_0,family_1\n0,0.5,0.75\n1,0.25,0.125\n");
  IntMatrix conf(2, 2);
  conf << 3, 1, 0, 4;
  write_confusion_csv(dir / "c.csv", conf);
  EXPECT_EQ(slurp(dir / "c.csv"), "pred_0,pred_1\n3,1\n0,4\n");
  const auto h = loss_histogram(noisy_toy(), ClassifierParams::zeros({3, 4}), 2);
  write_histogram_csv(dir / "h.csv", h);
  const std::string text = slurp(dir / "h.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), "class,bin_lo,bin_hi,clean_count,noisy_count");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1 + 4 * 2);
}

}  // namespace
}  // namespace cmwnet
