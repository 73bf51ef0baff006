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
#ifndef CMWNET_MODELS_HPP
#define CMWNET_MODELS_HPP

// The softmax MLP classifier and the two-branch weighting network. Both keep
// their parameters in one flat vector so that a virtual step is a single
// vector expression; layer views are Eigen::Map slices into it.

#include <filesystem>
#include <span>
#include <vector>

#include "cmwnet/numkit.hpp"
#include "cmwnet/taskfam.hpp"

namespace cmwnet {

/// MLP with ReLU hidden layers and a softmax output. Layer l maps
/// layer_sizes[l] -> layer_sizes[l + 1]; weights are stored [in x out] row-major,
/// each followed by its bias.
struct ClassifierParams {
  std::vector<int> layer_sizes;  // d, h1, ..., C
  Vector flat;

  static ClassifierParams zeros(std::vector<int> sizes);

  std::size_t num_layers() const { return layer_sizes.size() - 1; }
  int input_dim() const { return layer_sizes.front(); }
  int num_classes() const { return layer_sizes.back(); }
  Eigen::Index weight_offset(std::size_t layer) const;
  Eigen::Index bias_offset(std::size_t layer) const {
    return weight_offset(layer) + Eigen::Index(layer_sizes[layer]) * layer_sizes[layer + 1];
  }

  Eigen::Map<const Matrix> weight(std::size_t layer) const {
    return {flat.data() + weight_offset(layer), layer_sizes[layer], layer_sizes[layer + 1]};
  }
  Eigen::Map<Matrix> weight(std::size_t layer) {
    return {flat.data() + weight_offset(layer), layer_sizes[layer], layer_sizes[layer + 1]};
  }
  Eigen::Map<const Vector> bias(std::size_t layer) const {
    return {flat.data() + bias_offset(layer), layer_sizes[layer + 1]};
  }
  Eigen::Map<Vector> bias(std::size_t layer) {
    return {flat.data() + bias_offset(layer), layer_sizes[layer + 1]};
  }
};

Eigen::Index classifier_param_count(std::span<const int> layer_sizes);

/// Fan-in scaled uniform: every weight and bias of layer l from U(-1/sqrt(in), 1/sqrt(in)).
ClassifierParams init_classifier(std::vector<int> layer_sizes, Rng& rng);

/// Activations kept for the backward pass. activations[0] is the input and
/// activations[l] the post-ReLU output of hidden layer l.
struct ClassifierCache {
  std::vector<Matrix> activations;
  Matrix logits;
};

struct ClassifierOutput {
  Matrix probs;
  Vector losses;
  Matrix dlogits;  // per-row d loss_i / d logits_i
  ClassifierCache cache;
};

ClassifierCache classifier_logits(const ClassifierParams& w, const Matrix& x);
Matrix classifier_probs(const ClassifierParams& w, const Matrix& x);
ClassifierOutput classifier_forward(const ClassifierParams& w, const Matrix& x, std::span<const int> labels);
/// Soft-target cross-entropy (rows of `targets` are label distributions).
ClassifierOutput classifier_forward(const ClassifierParams& w, const Matrix& x, const Matrix& targets);

/// Flat gradient of sum_i <dlogits_i, logits_i(w)>.
Vector classifier_backward(const ClassifierParams& w, const ClassifierCache& cache, const Matrix& dlogits);

/// Row i is the flat gradient contributed by sample i alone, [n x P].
Matrix per_sample_gradients(const ClassifierParams& w, const ClassifierCache& cache, const Matrix& dlogits);

/// Entry i is g . (row i of per_sample_gradients), without forming the [n x P] matrix.
Vector per_sample_dots(const ClassifierParams& w, const ClassifierCache& cache, const Matrix& dlogits,
                       const Vector& g);

/// Argmax predictions.
Labels classifier_predict(const ClassifierParams& w, const Matrix& x);

/// Loss -> K weights: sigmoid(W2^T relu(W1^T loss + b1) + b2). Flat layout is
/// W1[H], b1[H], W2[H x K] row-major, b2[K].
struct WeightNetParams {
  int hidden = 100;
  int families = 1;
  Vector flat;

  static WeightNetParams zeros(int hidden, int families);

  Eigen::Index size() const { return flat.size(); }
  Eigen::Map<const Vector> w1() const { return {flat.data(), hidden}; }
  Eigen::Map<const Vector> b1() const { return {flat.data() + hidden, hidden}; }
  Eigen::Map<const Matrix> w2() const { return {flat.data() + 2 * hidden, hidden, families}; }
  Eigen::Map<const Vector> b2() const {
    return {flat.data() + 2 * hidden + Eigen::Index(hidden) * families, families};
  }
  Eigen::Map<Vector> b2() { return {flat.data() + 2 * hidden + Eigen::Index(hidden) * families, families}; }
};

/// Fan-in scaled uniform for W1, b1, W2; b2 = 0 so initial weights sit near 0.5.
WeightNetParams init_weightnet(int hidden, int families, Rng& rng);

/// All K head outputs. Throws std::invalid_argument for a negative or non-finite loss.
Vector weightnet_forward(const WeightNetParams& theta, double loss);

/// Output of head k and, if requested, its gradient with respect to the flat parameters.
double weightnet_head(const WeightNetParams& theta, double loss, int head, Vector* grad = nullptr);

struct FamilyOnehot {
  Vector indicator;  // K entries, exactly one equal to 1
  int index = 0;
};

FamilyOnehot family_onehot(double class_size, std::span<const double> centers);

struct CmwWeight {
  double weight = 0.0;
  int family = 0;
  Vector grad;  // d weight / d theta
};

/// V(loss; theta) . C(N; omega): the head of the family nearest to N.
CmwWeight cmw_weight(double loss, double class_size, const WeightNetParams& theta,
                     std::span<const double> centers, bool with_grad = true);

// Parameter files: magic "CMWP", u32 version, u32 rank, u64 dims[rank],
// u64 count, then `count` little-endian doubles.
struct ParamFile {
  std::vector<std::int64_t> shape;
  Vector data;
};

void write_param_file(const std::filesystem::path& path, std::span<const std::int64_t> shape,
                      const Vector& data);
ParamFile read_param_file(const std::filesystem::path& path);

/// Shape header is the layer sizes.
void save_classifier(const std::filesystem::path& path, const ClassifierParams& w);
ClassifierParams load_classifier(const std::filesystem::path& path);
/// Shape header is [1, H, K].
void save_weightnet(const std::filesystem::path& path, const WeightNetParams& theta);
WeightNetParams load_weightnet(const std::filesystem::path& path);

}  // namespace cmwnet

#endif  // CMWNET_MODELS_HPP
