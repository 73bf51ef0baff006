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
#include "cmwnet/models.hpp"

#include <fstream>

#include "cmwnet/binio.hpp"

namespace cmwnet {

Eigen::Index classifier_param_count(std::span<const int> layer_sizes) {
  Eigen::Index total = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    total += Eigen::Index(layer_sizes[l]) * layer_sizes[l + 1] + layer_sizes[l + 1];
  }
  return total;
}

ClassifierParams ClassifierParams::zeros(std::vector<int> sizes) {
  if (sizes.size() < 2) throw DimensionError("classifier needs at least input and output sizes");
  for (int s : sizes) {
    if (s < 1) throw DimensionError("classifier layer sizes must be positive");
  }
  ClassifierParams w;
  w.flat = Vector::Zero(classifier_param_count(sizes));
  w.layer_sizes = std::move(sizes);
  return w;
}

Eigen::Index ClassifierParams::weight_offset(std::size_t layer) const {
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < layer; ++l) {
    off += Eigen::Index(layer_sizes[l]) * layer_sizes[l + 1] + layer_sizes[l + 1];
  }
  return off;
}

ClassifierParams init_classifier(std::vector<int> layer_sizes, Rng& rng) {
  ClassifierParams w = ClassifierParams::zeros(std::move(layer_sizes));
  for (std::size_t l = 0; l < w.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.layer_sizes[l]));
    auto W = w.weight(l);
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = rng.uniform(-bound, bound);
    auto b = w.bias(l);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(-bound, bound);
  }
  return w;
}

ClassifierCache classifier_logits(const ClassifierParams& w, const Matrix& x) {
  if (x.cols() != w.input_dim()) {
    throw DimensionError("classifier: input has " + std::to_string(x.cols()) + " features, expected " +
                         std::to_string(w.input_dim()));
  }
  ClassifierCache cache;
  cache.activations.reserve(w.num_layers());
  cache.activations.push_back(x);
  for (std::size_t l = 0; l < w.num_layers(); ++l) {
    Matrix pre = affine_forward(cache.activations.back(), w.weight(l), w.bias(l));
    if (l + 1 == w.num_layers()) {
      cache.logits = std::move(pre);
    } else {
      cache.activations.push_back(pre.cwiseMax(0.0));
    }
  }
  return cache;
}

Matrix classifier_probs(const ClassifierParams& w, const Matrix& x) {
  return softmax_rows(classifier_logits(w, x).logits);
}

ClassifierOutput classifier_forward(const ClassifierParams& w, const Matrix& x, std::span<const int> labels) {
  ClassifierOutput out;
  out.cache = classifier_logits(w, x);
  auto r = softmax_xent(out.cache.logits, labels);
  out.probs = std::move(r.probs);
  out.losses = std::move(r.loss);
  out.dlogits = std::move(r.grad);
  return out;
}

ClassifierOutput classifier_forward(const ClassifierParams& w, const Matrix& x, const Matrix& targets) {
  ClassifierOutput out;
  out.cache = classifier_logits(w, x);
  auto r = softmax_xent(out.cache.logits, targets);
  out.probs = std::move(r.probs);
  out.losses = std::move(r.loss);
  out.dlogits = std::move(r.grad);
  return out;
}

Vector classifier_backward(const ClassifierParams& w, const ClassifierCache& cache, const Matrix& dlogits) {
  Vector grad(w.flat.size());
  Matrix delta = dlogits;
  for (std::size_t l = w.num_layers(); l-- > 0;) {
    const Matrix& a = cache.activations[l];
    Eigen::Map<Matrix>(grad.data() + w.weight_offset(l), w.layer_sizes[l], w.layer_sizes[l + 1]) =
        a.transpose() * delta;
    Eigen::Map<Vector>(grad.data() + w.bias_offset(l), w.layer_sizes[l + 1]) =
        delta.colwise().sum().transpose();
    if (l > 0) {
      Matrix back = delta * w.weight(l).transpose();
      delta = back.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
    }
  }
  return grad;
}

Matrix per_sample_gradients(const ClassifierParams& w, const ClassifierCache& cache, const Matrix& dlogits) {
  const Eigen::Index n = dlogits.rows();
  Matrix grads(n, w.flat.size());
  Matrix delta = dlogits;
  for (std::size_t l = w.num_layers(); l-- > 0;) {
    const Matrix& a = cache.activations[l];
    const int in = w.layer_sizes[l];
    const int out = w.layer_sizes[l + 1];
    const Eigen::Index woff = w.weight_offset(l);
    const Eigen::Index boff = w.bias_offset(l);
    for (Eigen::Index i = 0; i < n; ++i) {
      double* row = grads.row(i).data();
      Eigen::Map<Matrix>(row + woff, in, out).noalias() = a.row(i).transpose() * delta.row(i);
      Eigen::Map<Eigen::RowVectorXd>(row + boff, out) = delta.row(i);
    }
    if (l > 0) {
      Matrix back = delta * w.weight(l).transpose();
      delta = back.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
    }
  }
  return grads;
}

Vector per_sample_dots(const ClassifierParams& w, const ClassifierCache& cache, const Matrix& dlogits,
                       const Vector& g) {
  if (g.size() != w.flat.size()) throw DimensionError("per_sample_dots: vector does not match the parameters");
  Vector dots = Vector::Zero(dlogits.rows());
  Matrix delta = dlogits;
  for (std::size_t l = w.num_layers(); l-- > 0;) {
    const Matrix& a = cache.activations[l];
    const Eigen::Map<const Matrix> gw(g.data() + w.weight_offset(l), w.layer_sizes[l], w.layer_sizes[l + 1]);
    const Eigen::Map<const Eigen::RowVectorXd> gb(g.data() + w.bias_offset(l), w.layer_sizes[l + 1]);
    // <a_i delta_i^T, G_W> + <delta_i, g_b> = delta_i . (a_i G_W + g_b)
    Matrix proj = a * gw;
    proj.rowwise() += gb;
    dots += proj.cwiseProduct(delta).rowwise().sum();
    if (l > 0) {
      Matrix back = delta * w.weight(l).transpose();
      delta = back.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
    }
  }
  return dots;
}

Labels classifier_predict(const ClassifierParams& w, const Matrix& x) {
  const Matrix logits = classifier_logits(w, x).logits;
  Labels out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index k;
    logits.row(i).maxCoeff(&k);
    out[static_cast<std::size_t>(i)] = static_cast<int>(k);
  }
  return out;
}

WeightNetParams WeightNetParams::zeros(int hidden, int families) {
  if (hidden < 1 || families < 1) throw DimensionError("weight net needs hidden >= 1 and families >= 1");
  WeightNetParams p;
  p.hidden = hidden;
  p.families = families;
  p.flat = Vector::Zero(2 * Eigen::Index(hidden) + Eigen::Index(hidden) * families + families);
  return p;
}

WeightNetParams init_weightnet(int hidden, int families, Rng& rng) {
  WeightNetParams p = WeightNetParams::zeros(hidden, families);
  // Layer 1 has fan-in 1.
  for (Eigen::Index i = 0; i < 2 * Eigen::Index(hidden); ++i) p.flat(i) = rng.uniform(-1.0, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (Eigen::Index i = 0; i < Eigen::Index(hidden) * families; ++i) {
    p.flat(2 * hidden + i) = rng.uniform(-bound, bound);
  }
  return p;
}

namespace {

void check_loss(double loss) {
  if (!std::isfinite(loss) || loss < 0.0) {
    throw std::invalid_argument("weight net input must be a finite non-negative loss, got " +
                                std::to_string(loss));
  }
}

}  // namespace

Vector weightnet_forward(const WeightNetParams& theta, double loss) {
  check_loss(loss);
  const Vector h = (theta.w1() * loss + theta.b1()).cwiseMax(0.0);
  Vector out = theta.w2().transpose() * h + theta.b2();
  for (Eigen::Index k = 0; k < out.size(); ++k) out(k) = sigmoid(out(k));
  return out;
}

double weightnet_head(const WeightNetParams& theta, double loss, int head, Vector* grad) {
  check_loss(loss);
  if (head < 0 || head >= theta.families) {
    throw IndexError("weight net head " + std::to_string(head) + " outside [0, " +
                     std::to_string(theta.families) + ")");
  }
  const Eigen::Index H = theta.hidden;
  const Vector pre = theta.w1() * loss + theta.b1();
  const Vector h = pre.cwiseMax(0.0);
  const auto col = theta.w2().col(head);
  const auto act = sigmoid_forward_backward(col.dot(h) + theta.b2()(head));
  if (grad != nullptr) {
    grad->setZero(theta.flat.size());
    // d/d hidden pre-activation, zero where the ReLU is inactive
    const Vector dpre = (act.derivative * col).cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    grad->segment(0, H) = dpre * loss;
    grad->segment(H, H) = dpre;
    Eigen::Map<Matrix> dW2(grad->data() + 2 * H, H, theta.families);
    dW2.col(head) = act.derivative * h;
    (*grad)(2 * H + H * theta.families + head) = act.derivative;
  }
  return act.value;
}

FamilyOnehot family_onehot(double class_size, std::span<const double> centers) {
  if (centers.empty()) throw std::invalid_argument("family_onehot: no family centers");
  FamilyOnehot f;
  f.index = assign_family(class_size, centers);
  f.indicator = Vector::Zero(static_cast<Eigen::Index>(centers.size()));
  f.indicator(f.index) = 1.0;
  return f;
}

CmwWeight cmw_weight(double loss, double class_size, const WeightNetParams& theta,
                     std::span<const double> centers, bool with_grad) {
  if (static_cast<int>(centers.size()) != theta.families) {
    throw ConfigError("cmw_weight: " + std::to_string(centers.size()) + " family centers for " +
                      std::to_string(theta.families) + " weight heads");
  }
  CmwWeight out;
  out.family = family_onehot(class_size, centers).index;
  out.weight = weightnet_head(theta, loss, out.family, with_grad ? &out.grad : nullptr);
  return out;
}

void write_param_file(const std::filesystem::path& path, std::span<const std::int64_t> shape,
                      const Vector& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  binio::put_magic(os, "CMWP");
  binio::put<std::uint32_t>(os, 1);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) binio::put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  binio::put<std::uint64_t>(os, static_cast<std::uint64_t>(data.size()));
  for (Eigen::Index i = 0; i < data.size(); ++i) binio::put<double>(os, data(i));
  if (!os) throw IoError("write failed: " + path.string());
}

ParamFile read_param_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  binio::expect_magic(is, "CMWP");
  if (binio::get<std::uint32_t>(is) != 1) throw IoError("unsupported parameter file version: " + path.string());
  ParamFile f;
  const auto rank = binio::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < rank; ++i) f.shape.push_back(static_cast<std::int64_t>(binio::get<std::uint64_t>(is)));
  const auto count = binio::get<std::uint64_t>(is);
  f.data.resize(static_cast<Eigen::Index>(count));
  for (std::uint64_t i = 0; i < count; ++i) f.data(static_cast<Eigen::Index>(i)) = binio::get<double>(is);
  return f;
}

void save_classifier(const std::filesystem::path& path, const ClassifierParams& w) {
  std::vector<std::int64_t> shape(w.layer_sizes.begin(), w.layer_sizes.end());
  write_param_file(path, shape, w.flat);
}

ClassifierParams load_classifier(const std::filesystem::path& path) {
  ParamFile f = read_param_file(path);
  std::vector<int> sizes(f.shape.begin(), f.shape.end());
  ClassifierParams w = ClassifierParams::zeros(sizes);
  if (w.flat.size() != f.data.size()) throw IoError("classifier file size does not match its layer sizes");
  w.flat = std::move(f.data);
  return w;
}

void save_weightnet(const std::filesystem::path& path, const WeightNetParams& theta) {
  const std::int64_t shape[] = {1, theta.hidden, theta.families};
  write_param_file(path, shape, theta.flat);
}

WeightNetParams load_weightnet(const std::filesystem::path& path) {
  ParamFile f = read_param_file(path);
  if (f.shape.size() != 3 || f.shape[0] != 1) throw IoError("not a weight net file: " + path.string());
  WeightNetParams p = WeightNetParams::zeros(static_cast<int>(f.shape[1]), static_cast<int>(f.shape[2]));
  if (p.flat.size() != f.data.size()) throw IoError("weight net file size does not match its shape");
  p.flat = std::move(f.data);
  return p;
}

}  // namespace cmwnet
