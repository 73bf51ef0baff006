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
#include "cmwnet/taskfam.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>

namespace cmwnet {

int assign_family(double count, std::span<const double> centers) {
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centers.size(); ++k) {
    const double d = std::abs(count - centers[k]);
    if (d < best_dist) {
      best_dist = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

double wcss(std::span<const double> counts, std::span<const double> centers) {
  double total = 0.0;
  for (double c : counts) {
    const double d = c - centers[static_cast<std::size_t>(assign_family(c, centers))];
    total += d * d;
  }
  return total;
}

namespace {

struct LloydResult {
  std::vector<double> centers;
  double cost;
};

LloydResult lloyd(std::span<const double> counts, std::vector<double> centers) {
  const std::size_t k = centers.size();
  std::vector<int> assign(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) assign[i] = assign_family(counts[i], centers);

  for (int iter = 0; iter < 10000; ++iter) {
    std::vector<double> sum(k, 0.0);
    std::vector<std::size_t> n(k, 0);
    for (std::size_t i = 0; i < counts.size(); ++i) {
      sum[static_cast<std::size_t>(assign[i])] += counts[i];
      ++n[static_cast<std::size_t>(assign[i])];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (n[j] > 0) centers[j] = sum[j] / static_cast<double>(n[j]);
    }
    bool changed = false;
    for (std::size_t i = 0; i < counts.size(); ++i) {
      const int a = assign_family(counts[i], centers);
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    if (!changed) break;
  }

  // Drop centers that ended with no members.
  std::vector<bool> used(k, false);
  for (int a : assign) used[static_cast<std::size_t>(a)] = true;
  std::vector<double> kept;
  for (std::size_t j = 0; j < k; ++j) {
    if (used[j]) kept.push_back(centers[j]);
  }
  std::sort(kept.begin(), kept.end());
  const double cost = wcss(counts, kept);
  return {std::move(kept), cost};
}

}  // namespace

FamilyIndex kmeans_1d(std::span<const double> counts, int families, int restarts, Rng& rng) {
  if (counts.empty()) throw std::invalid_argument("kmeans_1d: no class counts");
  if (families < 1) throw std::invalid_argument("kmeans_1d: need at least one family");
  if (restarts < 1) restarts = 1;

  std::vector<double> distinct(counts.begin(), counts.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  FamilyIndex out;
  out.requested_families = families;
  int k = families;
  if (static_cast<std::size_t>(k) > distinct.size()) {
    k = static_cast<int>(distinct.size());
    std::cerr << "warning: kmeans_1d: only " << distinct.size() << " distinct class sizes, reducing K from "
              << families << " to " << k << "\n";
  }

  LloydResult best{{}, std::numeric_limits<double>::infinity()};
  for (int r = 0; r < restarts; ++r) {
    std::vector<double> init;
    for (int idx : rng.sample_without_replacement(distinct.size(), static_cast<std::size_t>(k))) {
      init.push_back(distinct[static_cast<std::size_t>(idx)]);
    }
    std::sort(init.begin(), init.end());
    LloydResult cand = lloyd(counts, std::move(init));
    if (cand.cost < best.cost) best = std::move(cand);
  }

  out.centers = std::move(best.centers);
  out.class_to_family.reserve(counts.size());
  for (double c : counts) out.class_to_family.push_back(assign_family(c, out.centers));
  return out;
}

}  // namespace cmwnet
