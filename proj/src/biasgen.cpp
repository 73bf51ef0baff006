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
#include "cmwnet/biasgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "cmwnet/binio.hpp"

namespace cmwnet {

namespace {

void check_rate(double rate, const char* what) {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw std::invalid_argument(std::string(what) + ": rate " + std::to_string(rate) + " outside [0, 1]");
  }
}

Dataset subset(const Dataset& data, std::span<const int> rows) {
  Dataset out;
  out.num_classes = data.num_classes;
  out.mixture = data.mixture;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), data.features.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<std::size_t>(rows[i]);
    out.features.row(static_cast<Eigen::Index>(i)) = data.features.row(static_cast<Eigen::Index>(r));
    out.observed_labels.push_back(data.observed_labels[r]);
    out.clean_labels.push_back(data.clean_labels[r]);
  }
  return out;
}

std::vector<std::vector<int>> rows_by_class(const Labels& labels, int classes) {
  std::vector<std::vector<int>> by(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) by[static_cast<std::size_t>(labels[i])].push_back(static_cast<int>(i));
  return by;
}

}  // namespace

GaussianMixtureSpec make_mixture_spec(int classes, int dim, double separation, double sigma) {
  if (classes < 2 || dim < 1) throw std::invalid_argument("mixture needs C >= 2 and d >= 1");
  if (!(sigma > 0.0) || separation < 0.0) throw std::invalid_argument("mixture needs sigma > 0, separation >= 0");
  GaussianMixtureSpec spec;
  spec.sigma = sigma;
  spec.priors = Vector::Constant(classes, 1.0 / classes);
  spec.means = Matrix::Zero(classes, dim);
  if (dim >= classes - 1) {
    // Helmert basis of the sum-zero subspace: the standard basis vectors
    // e_0..e_{C-1} project to a regular simplex with edge sqrt(2).
    const double scale = separation / std::sqrt(2.0);
    for (int k = 1; k < classes; ++k) {
      const double norm = std::sqrt(static_cast<double>(k) * (k + 1));
      for (int i = 0; i < k; ++i) spec.means(i, k - 1) = scale / norm;
      spec.means(k, k - 1) = -scale * k / norm;
    }
  } else {
    const double radius = separation / (2.0 * std::sin(M_PI / classes));
    for (int i = 0; i < classes; ++i) {
      const double angle = 2.0 * M_PI * i / classes;
      spec.means(i, 0) = radius * std::cos(angle);
      spec.means(i, 1) = radius * std::sin(angle);
    }
  }
  return spec;
}

Vector posterior(const Eigen::Ref<const Vector>& x, const GaussianMixtureSpec& spec) {
  if (x.size() != spec.dim()) throw DimensionError("posterior: feature dimension mismatch");
  Eigen::RowVectorXd logit(spec.num_classes());
  for (int c = 0; c < spec.num_classes(); ++c) {
    logit(c) = std::log(spec.priors(c)) -
               (x - spec.means.row(c).transpose()).squaredNorm() / (2.0 * spec.sigma * spec.sigma);
  }
  return softmax_rows(logit).transpose();
}

Matrix posterior_rows(const Matrix& x, const GaussianMixtureSpec& spec) {
  Matrix out(x.rows(), spec.num_classes());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = posterior(x.row(i).transpose(), spec).transpose();
  return out;
}

std::vector<int> Dataset::class_counts() const {
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : observed_labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

double Dataset::noise_rate() const {
  if (observed_labels.empty()) return 0.0;
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < observed_labels.size(); ++i) flipped += observed_labels[i] != clean_labels[i];
  return static_cast<double>(flipped) / static_cast<double>(observed_labels.size());
}

Dataset sample_mixture(const GaussianMixtureSpec& spec, int n_per_class, Rng& rng) {
  if (n_per_class < 0) throw std::invalid_argument("sample_mixture: negative class size");
  Dataset d;
  d.num_classes = spec.num_classes();
  d.mixture = spec;
  const Eigen::Index n = Eigen::Index(n_per_class) * spec.num_classes();
  d.features.resize(n, spec.dim());
  Eigen::Index row = 0;
  for (int c = 0; c < spec.num_classes(); ++c) {
    for (int i = 0; i < n_per_class; ++i, ++row) {
      for (int j = 0; j < spec.dim(); ++j) d.features(row, j) = spec.means(c, j) + spec.sigma * rng.normal();
      d.observed_labels.push_back(c);
      d.clean_labels.push_back(c);
    }
  }
  return d;
}

Dataset make_gaussian_classes(int classes, int dim, int n_per_class, double separation, double sigma,
                              std::uint64_t seed) {
  Rng rng(seed);
  return sample_mixture(make_mixture_spec(classes, dim, separation, sigma), n_per_class, rng);
}

Dataset apply_longtail(const Dataset& data, double factor, Rng& rng) {
  if (!(factor >= 1.0)) throw std::invalid_argument("apply_longtail: imbalance factor must be >= 1");
  if (factor == 1.0) return data;
  const int C = data.num_classes;
  const auto by_class = rows_by_class(data.observed_labels, C);
  const double n0 = static_cast<double>(by_class[0].size());
  const double mu = std::pow(factor, -1.0 / (C - 1));
  std::vector<int> keep;
  for (int c = 0; c < C; ++c) {
    const auto& rows = by_class[static_cast<std::size_t>(c)];
    // The tolerance absorbs pow() rounding so exact products are not bumped up.
    auto target = static_cast<std::size_t>(std::ceil(n0 * std::pow(mu, c) - 1e-9));
    target = std::min(target, rows.size());
    for (int pick : rng.sample_without_replacement(rows.size(), target)) keep.push_back(rows[static_cast<std::size_t>(pick)]);
  }
  std::sort(keep.begin(), keep.end());
  return subset(data, keep);
}

double imbalance_factor(const Dataset& data) {
  const auto counts = data.class_counts();
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  if (*lo == 0) throw std::domain_error("imbalance_factor: a class has no samples");
  return static_cast<double>(*hi) / static_cast<double>(*lo);
}

Dataset inject_symmetric(const Dataset& data, double rate, Rng& rng, bool exclude_current) {
  check_rate(rate, "inject_symmetric");
  Dataset out = data;
  const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(data.size())));
  const auto C = static_cast<std::size_t>(data.num_classes);
  for (int i : rng.sample_without_replacement(data.size(), k)) {
    int& y = out.observed_labels[static_cast<std::size_t>(i)];
    if (exclude_current) {
      const int r = static_cast<int>(rng.uniform_index(C - 1));
      y = r >= y ? r + 1 : r;
    } else {
      y = static_cast<int>(rng.uniform_index(C));
    }
  }
  return out;
}

std::vector<int> default_asymmetric_mapping(const GaussianMixtureSpec& spec) {
  const int C = spec.num_classes();
  std::vector<int> mapping(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    int best = -1;
    double best_d = 0.0;
    for (int o = 0; o < C; ++o) {
      if (o == c) continue;
      const double d = (spec.means.row(c) - spec.means.row(o)).norm();
      // Equal up to rounding counts as a tie, which the lower index wins.
      if (best < 0 || d < best_d - 1e-9 * std::max(1.0, best_d)) {
        best = o;
        best_d = d;
      }
    }
    mapping[static_cast<std::size_t>(c)] = best;
  }
  return mapping;
}

Dataset inject_asymmetric(const Dataset& data, double rate, std::span<const int> mapping, Rng& rng) {
  check_rate(rate, "inject_asymmetric");
  const int C = data.num_classes;
  if (static_cast<int>(mapping.size()) != C) throw std::invalid_argument("inject_asymmetric: mapping size != C");
  for (int c = 0; c < C; ++c) {
    const int m = mapping[static_cast<std::size_t>(c)];
    if (m < 0 || m >= C) throw std::invalid_argument("inject_asymmetric: mapping target out of range");
    if (m == c) throw std::invalid_argument("inject_asymmetric: class " + std::to_string(c) + " maps to itself");
  }
  Dataset out = data;
  const auto by_class = rows_by_class(data.observed_labels, C);
  for (int c = 0; c < C; ++c) {
    const auto& rows = by_class[static_cast<std::size_t>(c)];
    const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(rows.size())));
    for (int pick : rng.sample_without_replacement(rows.size(), k)) {
      out.observed_labels[static_cast<std::size_t>(rows[static_cast<std::size_t>(pick)])] =
          mapping[static_cast<std::size_t>(c)];
    }
  }
  return out;
}

double pmd_tau(PmdType type, double margin) {
  const double m = margin;
  switch (type) {
    case PmdType::type1:
      return -0.5 * m * m + 0.5;
    case PmdType::type2:
      return 1.0 - m * m * m;
    case PmdType::type3:
      return 1.0 - (m * m * m + m * m + m) / 3.0;
  }
  throw std::invalid_argument("unknown PMD type");
}

PmdInjection inject_pmd(const Dataset& data, PmdType type, double level, Rng& rng) {
  check_rate(level, "inject_pmd");
  if (!data.mixture) throw std::invalid_argument("inject_pmd: dataset has no posterior oracle");
  const std::size_t n = data.size();
  PmdInjection result;
  result.data = data;
  if (n == 0 || level == 0.0) return result;

  const Matrix eta = posterior_rows(data.features, *data.mixture);
  std::vector<double> tau(n, 0.0);
  std::vector<int> second(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = eta.row(static_cast<Eigen::Index>(i));
    int u = 0;
    for (int c = 1; c < row.size(); ++c) {
      if (row(c) > row(u)) u = c;
    }
    int s = u == 0 ? 1 : 0;
    for (int c = 0; c < row.size(); ++c) {
      if (c != u && row(c) > row(s)) s = c;
    }
    if (data.observed_labels[i] != u || data.clean_labels[i] != u) continue;
    second[i] = s;
    tau[i] = std::clamp(pmd_tau(type, row(u) - row(s)), 0.0, 1.0);
  }

  auto mean_prob = [&](double c) {
    double total = 0.0;
    for (double t : tau) total += std::min(1.0, c * t);
    return total / static_cast<double>(n);
  };

  double hi = 1.0;
  while (mean_prob(hi) < level && hi < 1e15) hi *= 2.0;
  if (mean_prob(hi) < level) {
    result.feasible = false;
    std::cerr << "warning: inject_pmd: level " << level << " unreachable, saturating at "
              << mean_prob(hi) << "\n";
  } else {
    double lo = 0.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (mean_prob(mid) < level ? lo : hi) = mid;
    }
  }
  result.scale = hi;
  result.expected_rate = mean_prob(hi);
  // Systematic sampling over a random order: each row still flips with
  // probability min(1, c tau), and the flip count is within one of the target.
  const std::vector<int> order = rng.permutation(n);
  double acc = rng.uniform();
  for (int i : order) {
    const auto k = static_cast<std::size_t>(i);
    if (second[k] < 0) continue;
    const double before = std::floor(acc);
    acc += std::min(1.0, hi * tau[k]);
    if (std::floor(acc) > before) result.data.observed_labels[k] = second[k];
  }
  return result;
}

Dataset inject_hybrid(const Dataset& data, PmdType pmd_type, double pmd_level, NoiseKind extra,
                      double extra_level, Rng& rng) {
  Dataset noisy = inject_pmd(data, pmd_type, pmd_level, rng).data;
  if (extra == NoiseKind::symmetric) return inject_symmetric(noisy, extra_level, rng);
  if (!noisy.mixture) throw std::invalid_argument("inject_hybrid: asymmetric stage needs class means");
  const auto mapping = default_asymmetric_mapping(*noisy.mixture);
  return inject_asymmetric(noisy, extra_level, mapping, rng);
}

std::string to_string(BiasKind kind) {
  switch (kind) {
    case BiasKind::longtail: return "longtail";
    case BiasKind::symmetric: return "symmetric";
    case BiasKind::asymmetric: return "asymmetric";
    case BiasKind::pmd1: return "pmd1";
    case BiasKind::pmd2: return "pmd2";
    case BiasKind::pmd3: return "pmd3";
    case BiasKind::hybrid: return "hybrid";
  }
  return "?";
}

BiasKind parse_bias_kind(const std::string& name) {
  for (auto k : {BiasKind::longtail, BiasKind::symmetric, BiasKind::asymmetric, BiasKind::pmd1,
                 BiasKind::pmd2, BiasKind::pmd3, BiasKind::hybrid}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown bias kind '" + name + "'");
}

void validate(const BiasSpec& spec) {
  if (!(spec.level >= 0.0 && spec.level <= 1.0)) throw ConfigError("bias level must lie in [0, 1]");
  if (!(spec.imbalance_factor >= 1.0)) throw ConfigError("imbalance_factor must be >= 1");
  if (spec.kind == BiasKind::hybrid) {
    if (!(spec.extra_level >= 0.0 && spec.extra_level <= 1.0)) throw ConfigError("extra_level must lie in [0, 1]");
    if (spec.hybrid_pmd_type < 1 || spec.hybrid_pmd_type > 3) throw ConfigError("hybrid pmd_type must be 1, 2 or 3");
  }
}

Dataset apply_bias(const Dataset& data, const BiasSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  switch (spec.kind) {
    case BiasKind::longtail:
      return apply_longtail(data, spec.imbalance_factor, rng);
    case BiasKind::symmetric:
      return inject_symmetric(data, spec.level, rng, spec.exclude_current);
    case BiasKind::asymmetric: {
      if (!data.mixture) throw ConfigError("asymmetric noise needs class means");
      const auto mapping = default_asymmetric_mapping(*data.mixture);
      return inject_asymmetric(data, spec.level, mapping, rng);
    }
    case BiasKind::pmd1:
      return inject_pmd(data, PmdType::type1, spec.level, rng).data;
    case BiasKind::pmd2:
      return inject_pmd(data, PmdType::type2, spec.level, rng).data;
    case BiasKind::pmd3:
      return inject_pmd(data, PmdType::type3, spec.level, rng).data;
    case BiasKind::hybrid:
      return inject_hybrid(data, static_cast<PmdType>(spec.hybrid_pmd_type), spec.level, spec.extra_kind,
                           spec.extra_level, rng);
  }
  throw ConfigError("unhandled bias kind");
}

namespace {

void encode_dataset(std::ostream& os, const Dataset& data) {
  binio::put_magic(os, "CMWD");
  binio::put<std::uint32_t>(os, 1);
  binio::put<std::uint64_t>(os, data.size());
  binio::put<std::uint64_t>(os, static_cast<std::uint64_t>(data.features.cols()));
  binio::put<std::uint64_t>(os, static_cast<std::uint64_t>(data.num_classes));
  binio::put<std::uint32_t>(os, data.mixture ? 1u : 0u);
  for (Eigen::Index i = 0; i < data.features.size(); ++i) binio::put<double>(os, data.features.data()[i]);
  for (int y : data.observed_labels) binio::put<std::int32_t>(os, y);
  for (int y : data.clean_labels) binio::put<std::int32_t>(os, y);
  if (data.mixture) {
    const auto& m = *data.mixture;
    for (Eigen::Index i = 0; i < m.means.size(); ++i) binio::put<double>(os, m.means.data()[i]);
    binio::put<double>(os, m.sigma);
    for (Eigen::Index i = 0; i < m.priors.size(); ++i) binio::put<double>(os, m.priors(i));
  }
}

}  // namespace

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  encode_dataset(os, data);
  if (!os) throw IoError("write failed: " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  binio::expect_magic(is, "CMWD");
  if (binio::get<std::uint32_t>(is) != 1) throw IoError("unsupported dataset version: " + path.string());
  const auto n = static_cast<Eigen::Index>(binio::get<std::uint64_t>(is));
  const auto d = static_cast<Eigen::Index>(binio::get<std::uint64_t>(is));
  const auto C = static_cast<int>(binio::get<std::uint64_t>(is));
  const auto flags = binio::get<std::uint32_t>(is);
  Dataset data;
  data.num_classes = C;
  data.features.resize(n, d);
  for (Eigen::Index i = 0; i < n * d; ++i) data.features.data()[i] = binio::get<double>(is);
  data.observed_labels.resize(static_cast<std::size_t>(n));
  data.clean_labels.resize(static_cast<std::size_t>(n));
  for (auto& y : data.observed_labels) y = binio::get<std::int32_t>(is);
  for (auto& y : data.clean_labels) y = binio::get<std::int32_t>(is);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.observed_labels[i] < 0 || data.observed_labels[i] >= C || data.clean_labels[i] < 0 ||
        data.clean_labels[i] >= C) {
      throw IoError("label out of range in " + path.string());
    }
  }
  if (flags & 1u) {
    GaussianMixtureSpec m;
    m.means.resize(C, d);
    for (Eigen::Index i = 0; i < m.means.size(); ++i) m.means.data()[i] = binio::get<double>(is);
    m.sigma = binio::get<double>(is);
    m.priors.resize(C);
    for (int c = 0; c < C; ++c) m.priors(c) = binio::get<double>(is);
    data.mixture = std::move(m);
  }
  return data;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (int j = 0; j < data.dim(); ++j) os << 'x' << j << ',';
  os << "observed,clean\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (int j = 0; j < data.dim(); ++j) os << data.features(static_cast<Eigen::Index>(i), j) << ',';
    os << data.observed_labels[i] << ',' << data.clean_labels[i] << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

std::uint64_t dataset_fingerprint(const Dataset& data) {
  std::ostringstream os;
  encode_dataset(os, data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : os.str()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cmwnet
