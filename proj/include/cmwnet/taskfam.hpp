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
#ifndef CMWNET_TASKFAM_HPP
#define CMWNET_TASKFAM_HPP

#include <span>
#include <vector>

#include "cmwnet/numkit.hpp"

namespace cmwnet {

/// Task families discovered from per-class sample counts.
struct FamilyIndex {
  std::vector<double> centers;      // strictly ascending
  std::vector<int> class_to_family;  // indexed by class
  int requested_families = 0;        // K before any reduction for too few distinct counts

  int families() const { return static_cast<int>(centers.size()); }
};

/// argmin_k |count - centers[k]|, ties toward the smaller center.
int assign_family(double count, std::span<const double> centers);

/// Within-cluster sum of squares when every count joins its nearest center.
double wcss(std::span<const double> counts, std::span<const double> centers);

/// Lloyd's algorithm on scalars, best of `restarts` initializations drawn as
/// K distinct count values. K is reduced (with a warning on stderr) when the
/// counts take fewer than K distinct values.
FamilyIndex kmeans_1d(std::span<const double> counts, int families, int restarts, Rng& rng);

}  // namespace cmwnet

#endif  // CMWNET_TASKFAM_HPP
