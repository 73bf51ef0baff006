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

#include <gtest/gtest.h>

#include "cmwnet/biasgen.hpp"
#include "cmwnet/errors.hpp"

namespace cmwnet {
namespace {

Dataset base(int per_class = 500, std::uint64_t seed = 7) { return make_gaussian_classes(10, 8, per_class, 3.0, 1.0, seed); }

TEST(Mixture, AdjacentMeansAreSeparationApart) {
  for (auto [C, d] : {std::pair{10, 8}, {4, 8}, {3, 2}}) {
    const auto spec = make_mixture_spec(C, d, 2.5, 1.0);
    ASSERT_EQ(spec.means.rows(), C);
    ASSERT_EQ(spec.means.cols(), d);
    double nearest = 1e300;
    for (int a = 0; a < C; ++a) {
      for (int b = a + 1; b < C; ++b) nearest = std::min(nearest, (spec.means.row(a) - spec.means.row(b)).norm());
    }
    EXPECT_NEAR(nearest, 2.5, 1e-12) << C << "x" << d;
    EXPECT_NEAR(spec.priors.sum(), 1.0, 1e-15);
  }
}

TEST(Mixture, PosteriorIsBayesOracle) {
  const auto spec = make_mixture_spec(3, 4, 2.0, 0.8);
  const Vector at_mean = posterior(spec.means.row(1).transpose(), spec);
  EXPECT_NEAR(at_mean.sum(), 1.0, 1e-15);
  Eigen::Index k;
  at_mean.maxCoeff(&k);
  EXPECT_EQ(k, 1);
  // Midpoint of two means is equidistant from both.
  const Vector mid = 0.5 * (spec.means.row(0) + spec.means.row(1)).transpose();
  const Vector p = posterior(mid, spec);
  EXPECT_NEAR(p(0), p(1), 1e-12);
}

TEST(Mixture, SamplingIsDeterministicAndBalanced) {
  const Dataset a = base(50), b = base(50);
  EXPECT_EQ(a.features, b.features);
  for (int c : a.class_counts()) EXPECT_EQ(c, 50);
  EXPECT_EQ(a.noise_rate(), 0.0);
}

TEST(Symmetric, ZeroRateIsIdentity) {
  const Dataset d = base(100);
  Rng rng(1);
  EXPECT_EQ(inject_symmetric(d, 0.0, rng).observed_labels, d.observed_labels);
}

TEST(Symmetric, ExpectedObservedNoise) {
  const Dataset d = base(1000);
  Rng rng(3);
  const Dataset n = inject_symmetric(d, 0.4, rng);
  EXPECT_EQ(n.features, d.features);
  EXPECT_NEAR(n.noise_rate(), 0.36, 0.015);
  Rng rng2(3);
  EXPECT_NEAR(inject_symmetric(d, 0.4, rng2, true).noise_rate(), 0.4, 1e-12);
}

TEST(Symmetric, RejectsBadRate) {
  const Dataset d = base(10);
  Rng rng(1);
  EXPECT_THROW(inject_symmetric(d, 1.5, rng), std::invalid_argument);
}

TEST(Asymmetric, CircleMappingFlipsToNearestNeighbour) {
  const auto spec = make_mixture_spec(10, 8, 3.0, 1.0);
  const auto m = default_asymmetric_mapping(spec);
  for (int c = 0; c < 10; ++c) {
    EXPECT_NE(m[static_cast<std::size_t>(c)], c);
    const double d = (spec.means.row(c) - spec.means.row(m[static_cast<std::size_t>(c)])).norm();
    EXPECT_NEAR(d, 3.0, 1e-9);
  }
}

TEST(Asymmetric, FlipsExactFractionPerClass) {
  const Dataset d = base(500);
  Rng rng(2);
  const auto mapping = default_asymmetric_mapping(*d.mixture);
  const Dataset n = inject_asymmetric(d, 0.4, mapping, rng);
  std::vector<int> flipped(10, 0);
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (n.observed_labels[i] != n.clean_labels[i]) {
      ++flipped[static_cast<std::size_t>(n.clean_labels[i])];
      EXPECT_EQ(n.observed_labels[i], mapping[static_cast<std::size_t>(n.clean_labels[i])]);
    }
  }
  for (int f : flipped) EXPECT_EQ(f, 200);
}

TEST(Asymmetric, MappingToSelfIsRejected) {
  const Dataset d = base(10);
  std::vector<int> mapping{0, 2, 3, 4, 5, 6, 7, 8, 9, 0};
  Rng rng(1);
  EXPECT_THROW(inject_asymmetric(d, 0.4, mapping, rng), std::invalid_argument);
}

TEST(LongTail, ExponentialProfile) {
  const Dataset d = base(500);
  Rng rng(4);
  const Dataset lt = apply_longtail(d, 100.0, rng);
  const auto counts = lt.class_counts();
  EXPECT_EQ(counts[0], 500);
  EXPECT_EQ(counts[9], 5);
  EXPECT_NEAR(imbalance_factor(lt), 100.0, 1e-12);
  for (int c = 1; c < 10; ++c) EXPECT_LE(counts[static_cast<std::size_t>(c)], counts[static_cast<std::size_t>(c - 1)]);
  Rng rng2(4);
  EXPECT_EQ(apply_longtail(d, 1.0, rng2).size(), d.size());
}

TEST(Pmd, TauShapes) {
  EXPECT_DOUBLE_EQ(pmd_tau(PmdType::type1, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(pmd_tau(PmdType::type1, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(pmd_tau(PmdType::type2, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(pmd_tau(PmdType::type2, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(pmd_tau(PmdType::type3, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(pmd_tau(PmdType::type3, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(pmd_tau(PmdType::type2, 0.5), 0.875);
}

TEST(Pmd, HitsRequestedLevel) {
  const Dataset d = base(1000);
  Rng rng(5);
  const auto r = inject_pmd(d, PmdType::type1, 0.35, rng);
  EXPECT_TRUE(r.feasible);
  EXPECT_NEAR(r.expected_rate, 0.35, 1e-9);
  EXPECT_NEAR(r.data.noise_rate(), 0.35, 0.01);
  EXPECT_LE(std::abs(r.data.noise_rate() * static_cast<double>(d.size()) - 0.35 * static_cast<double>(d.size())), 1.0);
}

TEST(Pmd, FlipsGoToSecondMostLikelyClass) {
  const Dataset d = base(300);
  Rng rng(6);
  const auto r = inject_pmd(d, PmdType::type2, 0.3, rng);
  const Matrix post = posterior_rows(d.features, *d.mixture);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (r.data.observed_labels[i] == d.observed_labels[i]) continue;
    Eigen::RowVectorXd p = post.row(static_cast<Eigen::Index>(i));
    Eigen::Index u, s;
    p.maxCoeff(&u);
    EXPECT_EQ(d.observed_labels[i], u);
    p(u) = -1.0;
    p.maxCoeff(&s);
    EXPECT_EQ(r.data.observed_labels[i], s);
  }
}

TEST(Pmd, UnreachableLevelIsFlagged) {
  const Dataset d = base(100);
  Rng rng(7);
  const auto r = inject_pmd(d, PmdType::type1, 0.99, rng);
  EXPECT_FALSE(r.feasible);
  EXPECT_LT(r.expected_rate, 0.99);
}

TEST(Hybrid, AddsFeatureIndependentNoiseOnTop) {
  const Dataset d = base(500);
  Rng rng(8);
  const Dataset h = inject_hybrid(d, PmdType::type1, 0.35, NoiseKind::symmetric, 0.3, rng);
  EXPECT_GT(h.noise_rate(), 0.35);
}

TEST(BiasChain, ParseAndValidate) {
  EXPECT_EQ(parse_bias_kind("pmd2"), BiasKind::pmd2);
  EXPECT_THROW(parse_bias_kind("gaussian"), ConfigError);
  BiasSpec s;
  s.kind = BiasKind::symmetric;
  s.level = 1.2;
  EXPECT_THROW(validate(s), ConfigError);
  s.kind = BiasKind::longtail;
  s.imbalance_factor = 0.5;
  EXPECT_THROW(validate(s), ConfigError);
}

TEST(BiasChain, ApplyIsReproducible) {
  const Dataset d = base(200);
  BiasSpec s;
  s.kind = BiasKind::asymmetric;
  s.level = 0.4;
  s.seed = 9;
  EXPECT_EQ(apply_bias(d, s).observed_labels, apply_bias(d, s).observed_labels);
}

TEST(DatasetIo, BinaryRoundTripAndFingerprint) {
  const Dataset d = base(20);
  const auto path = std::filesystem::temp_directory_path() / "cmwnet_ds_test.cmwd";
  write_dataset(path, d);
  const Dataset r = read_dataset(path);
  EXPECT_EQ(r.features, d.features);
  EXPECT_EQ(r.observed_labels, d.observed_labels);
  EXPECT_EQ(r.clean_labels, d.clean_labels);
  ASSERT_TRUE(r.mixture.has_value());
  EXPECT_EQ(r.mixture->means, d.mixture->means);
  EXPECT_EQ(dataset_fingerprint(r), dataset_fingerprint(d));
  Dataset changed = d;
  changed.observed_labels[3] = (changed.observed_labels[3] + 1) % 10;
  EXPECT_NE(dataset_fingerprint(changed), dataset_fingerprint(d));
}

TEST(DatasetIo, TruncatedFileIsIoError) {
  const auto path = std::filesystem::temp_directory_path() / "cmwnet_ds_trunc.cmwd";
  {
    std::ofstream os(path, std::ios::binary);
    os << "CMWD";
  }
  EXPECT_THROW(read_dataset(path), IoError);
}

}  // namespace
}  // namespace cmwnet
