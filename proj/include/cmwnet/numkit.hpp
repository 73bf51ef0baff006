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
#ifndef CMWNET_NUMKIT_HPP
#define CMWNET_NUMKIT_HPP

// Dense numeric core: Eigen aliases, loss/activation primitives with
// analytic derivatives, first-order optimizers, a portable RNG and a
// central-difference gradient oracle.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmwnet/errors.hpp"

namespace cmwnet {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using Labels = std::vector<int>;

/// out[i] = x[i] * W + b
template <typename DX, typename DW, typename DB>
MatrixT<typename DX::Scalar> affine_forward(const Eigen::MatrixBase<DX>& x,
                                            const Eigen::MatrixBase<DW>& W,
                                            const Eigen::MatrixBase<DB>& b) {
  if (x.cols() != W.rows() || b.size() != W.cols()) {
    throw DimensionError("affine_forward: x is " + std::to_string(x.rows()) + "x" +
                         std::to_string(x.cols()) + ", W is " + std::to_string(W.rows()) + "x" +
                         std::to_string(W.cols()) + ", b has " + std::to_string(b.size()));
  }
  MatrixT<typename DX::Scalar> out = x * W;
  out.rowwise() += b.reshaped().transpose();
  return out;
}

/// Row-wise log-sum-exp, stabilized by the row maximum.
template <typename D>
VectorT<typename D::Scalar> logsumexp_rows(const Eigen::MatrixBase<D>& logits) {
  using Scalar = typename D::Scalar;
  VectorT<Scalar> out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Scalar m = logits.row(i).maxCoeff();
    out(i) = m + std::log((logits.row(i).array() - m).exp().sum());
  }
  return out;
}

template <typename D>
MatrixT<typename D::Scalar> softmax_rows(const Eigen::MatrixBase<D>& logits) {
  using Scalar = typename D::Scalar;
  MatrixT<Scalar> p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Scalar m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

template <typename Scalar>
struct XentResult {
  VectorT<Scalar> loss;  // per-sample cross-entropy
  MatrixT<Scalar> grad;  // d loss_i / d logits_i
  MatrixT<Scalar> probs;
};

/// Cross-entropy against hard labels.
template <typename D>
XentResult<typename D::Scalar> softmax_xent(const Eigen::MatrixBase<D>& logits,
                                            std::span<const int> labels) {
  using Scalar = typename D::Scalar;
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    throw DimensionError("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.rows()) + " rows");
  }
  XentResult<Scalar> r;
  const VectorT<Scalar> lse = logsumexp_rows(logits);
  r.probs = softmax_rows(logits);
  r.loss.resize(logits.rows());
  r.grad = r.probs;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) {
      throw IndexError("softmax_xent: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(logits.cols()) + ")");
    }
    r.loss(i) = lse(i) - logits(i, y);
    r.grad(i, y) -= Scalar(1);
  }
  return r;
}

/// Cross-entropy against soft target rows: loss_i = -sum_c t_ic log p_ic.
/// The gradient is p_i * sum(t_i) - t_i, which is p_i - t_i for normalized targets.
template <typename D, typename DT>
XentResult<typename D::Scalar> softmax_xent(const Eigen::MatrixBase<D>& logits,
                                            const Eigen::MatrixBase<DT>& targets) {
  using Scalar = typename D::Scalar;
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw DimensionError("softmax_xent: targets shape does not match logits");
  }
  XentResult<Scalar> r;
  const VectorT<Scalar> lse = logsumexp_rows(logits);
  r.probs = softmax_rows(logits);
  r.loss.resize(logits.rows());
  r.grad.resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Scalar mass = targets.row(i).sum();
    r.loss(i) = mass * lse(i) - targets.row(i).dot(logits.row(i));
    r.grad.row(i) = r.probs.row(i) * mass - targets.row(i);
  }
  return r;
}

template <typename Scalar>
struct Activation {
  Scalar value;
  Scalar derivative;
};

/// Subgradient at exactly 0 is 0.
template <typename Scalar>
Activation<Scalar> relu_forward_backward(Scalar x) {
  return x > Scalar(0) ? Activation<Scalar>{x, Scalar(1)} : Activation<Scalar>{Scalar(0), Scalar(0)};
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Activation<Scalar> sigmoid_forward_backward(Scalar x) {
  const Scalar s = sigmoid(x);
  return {s, s * (Scalar(1) - s)};
}

/// Central differences (f(t + eps e_i) - f(t - eps e_i)) / (2 eps), one coordinate at a time.
template <typename F, typename Scalar = double>
VectorT<Scalar> finite_diff_grad(F&& f, const VectorT<Scalar>& theta, Scalar eps) {
  if (!(eps > Scalar(0))) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  VectorT<Scalar> probe = theta;
  VectorT<Scalar> grad(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    probe(i) = theta(i) + eps;
    const Scalar up = f(static_cast<const VectorT<Scalar>&>(probe));
    probe(i) = theta(i) - eps;
    const Scalar down = f(static_cast<const VectorT<Scalar>&>(probe));
    probe(i) = theta(i);
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: non-finite objective at coordinate " + std::to_string(i));
    }
    grad(i) = (up - down) / (Scalar(2) * eps);
  }
  return grad;
}

/// Seeded generator. The engine is mt19937_64, whose output sequence is fixed
/// by the C++ standard; every derived draw is computed here rather than through
/// <random> distributions, whose algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform on [0, n), unbiased.
  std::size_t uniform_index(std::size_t n);
  double normal();
  double gamma(double shape);
  double beta(double a, double b);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }
  std::vector<int> permutation(std::size_t n);
  /// k distinct indices from [0, n), in draw order.
  std::vector<int> sample_without_replacement(std::size_t n, std::size_t k);

  /// Independent child stream, a pure function of (seed, stream).
  Rng fork(std::uint64_t stream) const;

  std::string serialize() const;
  void deserialize(const std::string& state);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double learning_rate = 0.1;
  double momentum = 0.0;  // beta1 for Adam
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  long step_count = 0;
  Vector first_moment;   // momentum buffer / Adam m
  Vector second_moment;  // Adam v

  static OptimizerState sgd(double lr, double momentum = 0.0, double weight_decay = 0.0);
  static OptimizerState adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                             double weight_decay = 0.0, double epsilon = 1e-8);
};

/// Applies one update in place, PyTorch semantics (L2 weight decay folded into the gradient).
void optimizer_step(OptimizerState& state, Eigen::Ref<Vector> params,
                    const Eigen::Ref<const Vector>& grad);

inline bool all_finite(const Eigen::Ref<const Vector>& v) { return v.allFinite(); }

}  // namespace cmwnet

#endif  // CMWNET_NUMKIT_HPP
