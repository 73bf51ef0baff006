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
#ifndef CMWNET_METALOOP_HPP
#define CMWNET_METALOOP_HPP

// Bi-level meta-training of the class-aware weighting network.
//
// One iteration on a training batch B and a meta batch M:
//
//   w_hat(theta) = w - alpha * sum_j s_j [ v~_j a_j + (1 - v~_j) b_j ]
//   theta'       = theta - beta * grad_theta meta_loss(w_hat(theta))
//   w'           = optimizer step along the same direction, weights at theta'
//
// where a_j is the per-term training gradient the learned weight multiplies,
// b_j the pseudo-label gradient (zero for plain steps), s_j a constant scale
// and v~_j the raw head output V_j or V_j / sum_k V_k when normalized. Since the
// a_j, b_j and the weight-net inputs are evaluated at the current w, the
// hypergradient is exact in closed form:
//
//   grad = -alpha * sum_j s_j (g_meta . a_j - g_meta . b_j) d v~_j / d theta
//
// with g_meta the mean meta-batch gradient at w_hat.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmwnet/biasgen.hpp"
#include "cmwnet/models.hpp"
#include "cmwnet/taskfam.hpp"

namespace cmwnet {

enum class WeightNorm {
  none,       // v~_j = V_j
  batch_sum,  // v~_j = V_j / sum_k V_k, or V_j when the sum is 0
};

enum class Variant { cmwnet, cmwnet_sl, erm, mwnet, meta_test };
enum class LrSchedule {
  piecewise,  // lr * decay^(milestones passed), per epoch; fixed meta lr
  decaying,   // alpha_t = beta_t = min(c, c / sqrt(t)), plain SGD on both levels
};
enum class MetaSelection { lowest_loss, random };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct TrainConfig {
  Variant variant = Variant::cmwnet;
  std::vector<int> hidden{64, 64};
  int families = 3;
  int weightnet_hidden = 100;
  WeightNorm norm = WeightNorm::batch_sum;
  double loss_clamp = 50.0;  // weight-net input is min(loss, clamp); 0 disables

  int epochs = 60;
  long max_iterations = -1;  // stop early after this many iterations; -1 = no cap
  int batch_size = 100;
  int meta_batch_size = 100;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> lr_milestones;
  double lr_decay = 0.1;
  LrSchedule schedule = LrSchedule::piecewise;
  double decay_c = 0.1;

  OptimizerKind meta_optimizer = OptimizerKind::adam;
  double meta_lr = 1e-3;
  double meta_weight_decay = 1e-4;
  int meta_period = 1;  // meta update every meta_period-th iteration
  int warmup_epochs = 5;
  int meta_per_class = 10;
  bool meta_mixup = true;
  bool meta_pseudo_labels = false;
  int kmeans_restarts = 10;

  // soft-label variant
  double te_momentum = 0.9;   // temporal ensembling
  double wa_momentum = 0.99;  // weight averaging
  double mixup_gamma = 1.0;

  std::uint64_t seed = 0;
};

/// Throws ConfigError listing every invalid field.
void validate(const TrainConfig& cfg);

struct TrainState {
  ClassifierParams w;
  WeightNetParams theta;
  FamilyIndex omega;
  OptimizerState w_optimizer;
  OptimizerState theta_optimizer;
  ClassifierParams w_wa;  // weight-averaged classifier (soft-label variant)
  Matrix z;               // temporal-ensemble label distributions [N x C]
  long iteration = 0;
};

/// Rows of the training set in one step.
struct TrainBatch {
  std::vector<int> indices;
  Matrix features;
  Labels labels;               // observed
  std::vector<int> families;   // per row
};

TrainBatch make_batch(const Dataset& data, std::span<const int> rows, const FamilyIndex& omega);

/// Family of each training row through its observed class size.
std::vector<int> sample_families(const Dataset& data, const FamilyIndex& omega);

struct MetaBatch {
  Matrix features;
  Matrix targets;  // label distributions; one-hot unless mixed
};

/// Test hooks and overrides for a single step.
struct StepHooks {
  std::optional<double> forced_weight;  // replaces every V_j (gradient through it is zero)
};

/// Everything a virtual step needs, evaluated once at (w, theta). Term
/// gradients stay implicit: term j is the gradient of <dlogits_j, logits_r(w)>
/// for forward row r = j mod rows(), so directions are one backward pass and
/// the per-term similarities one contraction per layer.
struct VirtualStepCache {
  ClassifierParams w;
  ClassifierCache forward;
  Matrix dlogits;             // a_j, [terms x C]
  Matrix complement_dlogits;  // b_j, [terms x C]; empty for plain steps
  Vector scale;               // s_j
  Vector weight_inputs;       // weight-net input per term
  std::vector<int> families;
  Vector weights;       // V_j at `theta`
  Matrix weight_grads;  // dV_j / d theta, [terms x |theta|]
  WeightNorm norm = WeightNorm::batch_sum;
  double norm_sum = 0.0;
  double alpha = 0.0;
  Vector theta;  // snapshot the cache was built at

  Eigen::Index terms() const { return dlogits.rows(); }
  Eigen::Index rows() const { return forward.logits.rows(); }
  /// v~ for the stored weights.
  Vector effective_weights() const;
  /// Explicit a_j (and b_j) rows, [terms x P]; for inspection and checks.
  Matrix term_gradients() const;
  Matrix complement_gradients() const;
};

/// Per-sample gradients at w and weights at theta for a plain step.
VirtualStepCache prepare_step(const ClassifierParams& w, const WeightNetParams& theta, const TrainBatch& batch,
                              WeightNorm norm, double loss_clamp, const StepHooks& hooks = {});

/// Soft-label step: rows are mixed x~ = lambda x + (1 - lambda) x[perm], and each
/// row contributes a lambda-term (its own label y, pseudo-label z) and a
/// (1 - lambda)-term (partner label and pseudo-label), both scaled by 1/n.
/// Weights are never normalized here.
VirtualStepCache prepare_sl_step(const ClassifierParams& w, const WeightNetParams& theta, const TrainBatch& batch,
                                 const Matrix& z_rows, double lambda, std::span<const int> perm,
                                 double loss_clamp, const StepHooks& hooks = {});

/// sum_j s_j [ v~_j a_j + (1 - v~_j) b_j ] for the given raw weights.
Vector step_direction(const VirtualStepCache& cache, const Vector& raw_weights);

/// Normalized (or raw) weights for an arbitrary raw weight vector.
Vector normalize_weights(const Vector& raw, WeightNorm norm);

struct VirtualStep {
  ClassifierParams w_hat;
  VirtualStepCache cache;
};

VirtualStep virtual_step(const TrainState& state, const TrainBatch& batch, double alpha, WeightNorm norm,
                         double loss_clamp, const StepHooks& hooks = {});
/// w_hat from an existing cache; the cache's alpha is set to `alpha`.
ClassifierParams virtual_step(const ClassifierParams& w, VirtualStepCache& cache, double alpha);

struct Hypergradient {
  Vector grad;
  double meta_loss = 0.0;
  Vector coefficients;  // s_j (G_j - G'_j) per term
};

/// Mean soft cross-entropy of the meta batch and its mean gradient at w.
std::pair<double, Vector> meta_loss_and_grad(const ClassifierParams& w, const MetaBatch& meta);

/// Throws std::logic_error when `current_theta` differs from the snapshot in `cache`.
Hypergradient hypergrad(const VirtualStepCache& cache, const ClassifierParams& w_hat, const MetaBatch& meta,
                        const WeightNetParams& current_theta);

void meta_update(TrainState& state, const Vector& grad);

/// Recomputes the weights at the state's (updated) theta and steps the classifier
/// optimizer along the resulting direction with learning rate alpha.
void classifier_update(TrainState& state, const VirtualStepCache& cache, double alpha,
                       double loss_clamp, const StepHooks& hooks = {});

/// Uniform-weight update through the same normalization path.
void erm_update(TrainState& state, const TrainBatch& batch, double alpha, WeightNorm norm);

void ema_update(ClassifierParams& w_wa, const ClassifierParams& w, double beta);
/// alpha z + (1 - alpha) p, renormalized; a degenerate row becomes uniform.
void temporal_ensemble(Eigen::Ref<Eigen::RowVectorXd> z, const Eigen::Ref<const Eigen::RowVectorXd>& p,
                       double alpha);

/// Convex row mixing: row i becomes lambda_i row_i + (1 - lambda_i) row_{partner_i}.
MetaBatch mixup_rows(const MetaBatch& batch, std::span<const int> partners, std::span<const double> lambdas);

/// per_class rows of every observed class, either those with the lowest current
/// loss or a random draw, optionally mixed up with lambda ~ Beta(1, 1).
MetaBatch build_meta_set(const Dataset& data, const ClassifierParams& w, int per_class, bool mixup,
                         MetaSelection selection, Rng& rng, bool pseudo_labels = false);

struct MetricRow {
  long iteration = 0;
  int epoch = 0;
  double train_loss = 0.0;
  double meta_loss = 0.0;  // NaN when no meta step ran in the epoch
  double test_acc = 0.0;   // NaN without a test set
  std::vector<double> family_weights;
  double hypergrad_norm = 0.0;
};

struct TrainResult {
  TrainState state;
  std::vector<MetricRow> log;
  std::vector<double> hypergrad_sq;  // ||grad||^2 per meta step
};

using EpochObserver = std::function<void(const TrainState&, const MetricRow&)>;

/// Initial state: families from K-means on observed class sizes, fresh parameters.
TrainState init_state(const Dataset& train, const TrainConfig& cfg);

/// Meta-training (cmwnet, mwnet, cmwnet-sl) or the ERM baseline, per cfg.variant.
TrainResult meta_train(const Dataset& train, const TrainConfig& cfg, const Dataset* test = nullptr,
                       const EpochObserver& observer = {});

/// Trains a fresh classifier on `query` with theta_star frozen; families are
/// re-clustered on the query's class sizes.
TrainResult meta_test(const WeightNetParams& theta_star, const Dataset& query, const TrainConfig& cfg,
                      const Dataset* test = nullptr, const EpochObserver& observer = {});

/// One soft-label iteration (EMA, temporal ensembling, mixup, meta step, update).
/// Returns the hypergradient when a meta step ran.
std::optional<Hypergradient> sl_train_step(TrainState& state, const TrainBatch& batch, const MetaBatch* meta,
                                           const TrainConfig& cfg, double alpha, Rng& rng);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows, int families);

// Checkpoint directory: classifier.bin, weightnet.bin, optimizer moment files,
// ema.bin / z.bin when present, and checkpoint.json naming the architecture,
// the family centers and the optimizer hyperparameters.
void save_checkpoint(const std::filesystem::path& dir, const TrainState& state, const TrainConfig& cfg);
TrainState load_checkpoint(const std::filesystem::path& dir);

}  // namespace cmwnet

#endif  // CMWNET_METALOOP_HPP
