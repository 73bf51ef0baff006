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
#ifndef CMWNET_BIASGEN_HPP
#define CMWNET_BIASGEN_HPP

// Synthetic Gaussian-mixture classification data with an exact Bayes
// posterior, plus the bias injectors: long-tail subsampling, symmetric,
// asymmetric, posterior-margin-dependent (PMD) and hybrid label noise.
//
// Every injector returns a copy that differs from its input only in
// observed_labels (or, for long-tail, in which rows are kept).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmwnet/numkit.hpp"

namespace cmwnet {

struct GaussianMixtureSpec {
  Matrix means;  // [C x d]
  double sigma = 1.0;
  Vector priors;  // [C], sums to 1

  int num_classes() const { return static_cast<int>(means.rows()); }
  int dim() const { return static_cast<int>(means.cols()); }
};

/// Class means with every adjacent pair `separation` apart: a regular simplex
/// when d >= C - 1, otherwise a regular C-gon in the first two coordinates.
/// Priors are uniform.
GaussianMixtureSpec make_mixture_spec(int classes, int dim, double separation, double sigma);

/// Bayes posterior eta(x), computed in log space.
Vector posterior(const Eigen::Ref<const Vector>& x, const GaussianMixtureSpec& spec);
Matrix posterior_rows(const Matrix& x, const GaussianMixtureSpec& spec);

struct Dataset {
  Matrix features;  // [n x d]
  Labels observed_labels;
  Labels clean_labels;  // evaluation only
  int num_classes = 0;
  std::optional<GaussianMixtureSpec> mixture;

  std::size_t size() const { return observed_labels.size(); }
  int dim() const { return static_cast<int>(features.cols()); }
  /// Per observed class.
  std::vector<int> class_counts() const;
  /// Fraction of rows with observed != clean.
  double noise_rate() const;
};

/// n_per_class i.i.d. draws per class, ordered by class.
Dataset sample_mixture(const GaussianMixtureSpec& spec, int n_per_class, Rng& rng);
Dataset make_gaussian_classes(int classes, int dim, int n_per_class, double separation, double sigma,
                              std::uint64_t seed);

/// Class i keeps ceil(n_0 * mu^i) rows with mu = factor^(-1/(C-1)).
Dataset apply_longtail(const Dataset& data, double imbalance_factor, Rng& rng);
double imbalance_factor(const Dataset& data);

/// round(rate * n) rows, chosen uniformly, get a label drawn uniformly over all
/// C classes (or over the C - 1 other classes when exclude_current is set).
Dataset inject_symmetric(const Dataset& data, double rate, Rng& rng, bool exclude_current = false);

/// Nearest other class mean, ties toward the lower index.
std::vector<int> default_asymmetric_mapping(const GaussianMixtureSpec& spec);

/// In every observed class c, round(rate * n_c) rows flip to mapping[c].
Dataset inject_asymmetric(const Dataset& data, double rate, std::span<const int> mapping, Rng& rng);

enum class PmdType { type1 = 1, type2 = 2, type3 = 3 };

/// Raw flip propensity for a posterior margin eta_u - eta_s.
double pmd_tau(PmdType type, double margin);

struct PmdInjection {
  Dataset data;
  double scale = 0.0;          // c in min(1, c * tau)
  double expected_rate = 0.0;  // mean flip probability after scaling
  bool feasible = true;        // false when even saturated probabilities fall short of the level
};

/// Flips u_x -> s_x with probability min(1, c * tau(x)) for rows whose observed
/// and clean label both equal u_x; c is bisected so the mean flip probability
/// over all rows equals `level`. Flips are drawn by systematic sampling, so the
/// realized count is within one row of level * n.
PmdInjection inject_pmd(const Dataset& data, PmdType type, double level, Rng& rng);

enum class NoiseKind { symmetric, asymmetric };

/// PMD first, then the feature-independent injector on the already-noisy labels.
Dataset inject_hybrid(const Dataset& data, PmdType pmd_type, double pmd_level, NoiseKind extra,
                      double extra_level, Rng& rng);

enum class BiasKind { longtail, symmetric, asymmetric, pmd1, pmd2, pmd3, hybrid };

std::string to_string(BiasKind kind);
BiasKind parse_bias_kind(const std::string& name);

/// One stage of a bias chain.
struct BiasSpec {
  BiasKind kind = BiasKind::symmetric;
  double level = 0.0;             // noise rate, or PMD level for hybrid
  double imbalance_factor = 1.0;  // longtail only
  std::uint64_t seed = 0;
  // hybrid only
  NoiseKind extra_kind = NoiseKind::symmetric;
  double extra_level = 0.0;
  int hybrid_pmd_type = 1;
  // symmetric only
  bool exclude_current = false;
};

void validate(const BiasSpec& spec);
Dataset apply_bias(const Dataset& data, const BiasSpec& spec);

// Binary container: magic "CMWD", u32 version, u64 n, u64 d, u64 C, u32 flags
// (bit 0: mixture present), features (f64, row-major), observed labels (i32),
// clean labels (i32), then if present means (C x d f64), sigma (f64), priors (C f64).
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);
/// One row per sample: x0..x{d-1}, observed, clean.
void write_dataset_csv(const std::filesystem::path& path, const Dataset& data);

/// FNV-1a over the binary encoding; identifies a test set across runs.
std::uint64_t dataset_fingerprint(const Dataset& data);

}  // namespace cmwnet

#endif  // CMWNET_BIASGEN_HPP
