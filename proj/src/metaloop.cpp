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
#include "cmwnet/metaloop.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace cmwnet {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double clamp_input(double loss, double clamp) { return clamp > 0.0 ? std::min(loss, clamp) : loss; }

void require_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw NumericError(std::string(what) + " is not finite");
}

Matrix one_hot(std::span<const int> labels, int classes) {
  Matrix t = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) t(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  return t;
}

void fill_weights(VirtualStepCache& cache, const WeightNetParams& theta, const StepHooks& hooks) {
  const Eigen::Index n = cache.weight_inputs.size();
  cache.weights.resize(n);
  cache.weight_grads = Matrix::Zero(n, theta.size());
  Vector g;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (hooks.forced_weight) {
      cache.weights(j) = *hooks.forced_weight;
      continue;
    }
    cache.weights(j) = weightnet_head(theta, cache.weight_inputs(j), cache.families[static_cast<std::size_t>(j)], &g);
    cache.weight_grads.row(j) = g.transpose();
  }
  cache.theta = theta.flat;
}

Vector raw_weights_at(const VirtualStepCache& cache, const WeightNetParams& theta, const StepHooks& hooks) {
  Vector v(cache.terms());
  for (Eigen::Index j = 0; j < cache.terms(); ++j) {
    v(j) = hooks.forced_weight ? *hooks.forced_weight
                               : weightnet_head(theta, cache.weight_inputs(j), cache.families[static_cast<std::size_t>(j)]);
  }
  return v;
}

void warn_once(std::atomic<bool>& flag, const std::string& msg) {
  if (!flag.exchange(true)) std::cerr << "warning: " << msg << "\n";
}

std::atomic<bool> g_short_class_warned{false};

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::cmwnet: return "cmwnet";
    case Variant::cmwnet_sl: return "cmwnet-sl";
    case Variant::erm: return "erm";
    case Variant::mwnet: return "mwnet";
    case Variant::meta_test: return "meta-test";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (auto v : {Variant::cmwnet, Variant::cmwnet_sl, Variant::erm, Variant::mwnet, Variant::meta_test}) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + name + "'");
}

void validate(const TrainConfig& cfg) {
  std::vector<std::string> errors;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  check(cfg.families >= 1, "model.families must be >= 1");
  check(cfg.variant != Variant::mwnet || cfg.families == 1, "variant mwnet requires model.families = 1");
  check(cfg.weightnet_hidden >= 1, "model.weightnet_hidden must be >= 1");
  for (int h : cfg.hidden) check(h >= 1, "model.hidden sizes must be >= 1");
  check(cfg.loss_clamp >= 0.0, "model.loss_clamp must be >= 0");
  check(cfg.epochs >= 0, "schedule.epochs must be >= 0");
  check(cfg.batch_size >= 1, "schedule.batch_size must be >= 1");
  check(cfg.meta_batch_size >= 1, "schedule.meta_batch_size must be >= 1");
  check(cfg.lr > 0.0, "schedule.lr must be > 0");
  check(cfg.momentum >= 0.0 && cfg.momentum < 1.0, "schedule.momentum must lie in [0, 1)");
  check(cfg.weight_decay >= 0.0, "schedule.weight_decay must be >= 0");
  check(cfg.lr_decay > 0.0, "schedule.lr_decay must be > 0");
  check(cfg.decay_c > 0.0, "schedule.decay_c must be > 0");
  check(cfg.meta_lr > 0.0, "schedule.meta_lr must be > 0");
  check(cfg.meta_weight_decay >= 0.0, "schedule.meta_weight_decay must be >= 0");
  check(cfg.meta_period >= 1, "schedule.meta_period must be >= 1");
  check(cfg.warmup_epochs >= 0, "schedule.warmup_epochs must be >= 0");
  check(cfg.meta_per_class >= 1, "schedule.meta_per_class must be >= 1");
  check(cfg.kmeans_restarts >= 1, "schedule.kmeans_restarts must be >= 1");
  check(cfg.te_momentum >= 0.0 && cfg.te_momentum < 1.0, "sl.te_momentum must lie in [0, 1)");
  check(cfg.wa_momentum >= 0.0 && cfg.wa_momentum < 1.0, "sl.wa_momentum must lie in [0, 1)");
  check(cfg.mixup_gamma > 0.0, "sl.mixup_gamma must be > 0");
  if (!errors.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
}

std::vector<int> sample_families(const Dataset& data, const FamilyIndex& omega) {
  std::vector<int> fam(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    fam[i] = omega.class_to_family[static_cast<std::size_t>(data.observed_labels[i])];
  }
  return fam;
}

TrainBatch make_batch(const Dataset& data, std::span<const int> rows, const FamilyIndex& omega) {
  TrainBatch b;
  b.indices.assign(rows.begin(), rows.end());
  b.features.resize(static_cast<Eigen::Index>(rows.size()), data.features.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<std::size_t>(rows[i]);
    b.features.row(static_cast<Eigen::Index>(i)) = data.features.row(static_cast<Eigen::Index>(r));
    b.labels.push_back(data.observed_labels[r]);
    b.families.push_back(omega.class_to_family[static_cast<std::size_t>(data.observed_labels[r])]);
  }
  return b;
}

Vector normalize_weights(const Vector& raw, WeightNorm norm) {
  if (norm == WeightNorm::none) return raw;
  const double s = raw.sum();
  return s != 0.0 ? Vector(raw / s) : raw;
}

Vector VirtualStepCache::effective_weights() const { return normalize_weights(weights, norm); }

VirtualStepCache prepare_step(const ClassifierParams& w, const WeightNetParams& theta, const TrainBatch& batch,
                              WeightNorm norm, double loss_clamp, const StepHooks& hooks) {
  if (batch.labels.empty()) throw std::invalid_argument("prepare_step: empty batch");
  const ClassifierOutput out = classifier_forward(w, batch.features, batch.labels);
  require_finite(out.losses, "training loss");
  VirtualStepCache cache;
  cache.w = w;
  cache.forward = out.cache;
  cache.dlogits = out.dlogits;
  cache.scale = Vector::Ones(out.losses.size());
  cache.weight_inputs = out.losses.unaryExpr([&](double l) { return clamp_input(l, loss_clamp); });
  cache.families = batch.families;
  cache.norm = norm;
  fill_weights(cache, theta, hooks);
  cache.norm_sum = cache.weights.sum();
  return cache;
}

VirtualStepCache prepare_sl_step(const ClassifierParams& w, const WeightNetParams& theta, const TrainBatch& batch,
                                 const Matrix& z_rows, double lambda, std::span<const int> perm,
                                 double loss_clamp, const StepHooks& hooks) {
  const auto n = static_cast<Eigen::Index>(batch.labels.size());
  if (n == 0) throw std::invalid_argument("prepare_sl_step: empty batch");
  if (static_cast<Eigen::Index>(perm.size()) != n || z_rows.rows() != n) {
    throw DimensionError("prepare_sl_step: permutation or pseudo-label rows do not match the batch");
  }
  const int C = w.num_classes();
  Matrix mixed(n, batch.features.cols());
  Matrix y = one_hot(batch.labels, C);
  Matrix y_partner(n, C), z_partner(n, C);
  std::vector<int> partner_families(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int p = perm[static_cast<std::size_t>(i)];
    mixed.row(i) = lambda * batch.features.row(i) + (1.0 - lambda) * batch.features.row(p);
    y_partner.row(i) = y.row(p);
    z_partner.row(i) = z_rows.row(p);
    partner_families[static_cast<std::size_t>(i)] = batch.families[static_cast<std::size_t>(p)];
  }

  const ClassifierCache fwd = classifier_logits(w, mixed);
  const auto own = softmax_xent(fwd.logits, y);
  const auto own_pseudo = softmax_xent(fwd.logits, z_rows);
  const auto other = softmax_xent(fwd.logits, y_partner);
  const auto other_pseudo = softmax_xent(fwd.logits, z_partner);
  require_finite(own.loss, "training loss");
  require_finite(other.loss, "training loss");

  VirtualStepCache cache;
  cache.w = w;
  cache.forward = fwd;
  cache.dlogits.resize(2 * n, C);
  cache.dlogits << own.grad, other.grad;
  cache.complement_dlogits.resize(2 * n, C);
  cache.complement_dlogits << own_pseudo.grad, other_pseudo.grad;
  cache.scale.resize(2 * n);
  cache.scale.head(n).setConstant(lambda / static_cast<double>(n));
  cache.scale.tail(n).setConstant((1.0 - lambda) / static_cast<double>(n));
  cache.weight_inputs.resize(2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    cache.weight_inputs(i) = clamp_input(own.loss(i), loss_clamp);
    cache.weight_inputs(n + i) = clamp_input(other.loss(i), loss_clamp);
  }
  cache.families = batch.families;
  cache.families.insert(cache.families.end(), partner_families.begin(), partner_families.end());
  cache.norm = WeightNorm::none;
  fill_weights(cache, theta, hooks);
  cache.norm_sum = cache.weights.sum();
  return cache;
}

Vector step_direction(const VirtualStepCache& cache, const Vector& raw_weights) {
  const Vector v = normalize_weights(raw_weights, cache.norm);
  const Eigen::Index rows = cache.rows();
  Matrix d = Matrix::Zero(rows, cache.dlogits.cols());
  for (Eigen::Index j = 0; j < cache.terms(); ++j) {
    d.row(j % rows) += (cache.scale(j) * v(j)) * cache.dlogits.row(j);
    if (cache.complement_dlogits.size() > 0) {
      d.row(j % rows) += (cache.scale(j) * (1.0 - v(j))) * cache.complement_dlogits.row(j);
    }
  }
  return classifier_backward(cache.w, cache.forward, d);
}

namespace {

// g . a_j for every term j.
Vector term_dots(const VirtualStepCache& cache, const Matrix& dlogits, const Vector& g) {
  const Eigen::Index rows = cache.rows();
  Vector dots(cache.terms());
  for (Eigen::Index start = 0; start < cache.terms(); start += rows) {
    dots.segment(start, rows) = per_sample_dots(cache.w, cache.forward, dlogits.middleRows(start, rows), g);
  }
  return dots;
}

Matrix explicit_gradients(const VirtualStepCache& cache, const Matrix& dlogits) {
  const Eigen::Index rows = cache.rows();
  Matrix out(dlogits.rows(), cache.w.flat.size());
  for (Eigen::Index start = 0; start < dlogits.rows(); start += rows) {
    out.middleRows(start, rows) = per_sample_gradients(cache.w, cache.forward, dlogits.middleRows(start, rows));
  }
  return out;
}

}  // namespace

Matrix VirtualStepCache::term_gradients() const { return explicit_gradients(*this, dlogits); }

Matrix VirtualStepCache::complement_gradients() const {
  return complement_dlogits.size() > 0 ? explicit_gradients(*this, complement_dlogits) : Matrix();
}

ClassifierParams virtual_step(const ClassifierParams& w, VirtualStepCache& cache, double alpha) {
  cache.alpha = alpha;
  ClassifierParams w_hat = w;
  w_hat.flat.noalias() -= alpha * step_direction(cache, cache.weights);
  return w_hat;
}

VirtualStep virtual_step(const TrainState& state, const TrainBatch& batch, double alpha, WeightNorm norm,
                         double loss_clamp, const StepHooks& hooks) {
  VirtualStep out;
  out.cache = prepare_step(state.w, state.theta, batch, norm, loss_clamp, hooks);
  out.w_hat = virtual_step(state.w, out.cache, alpha);
  return out;
}

std::pair<double, Vector> meta_loss_and_grad(const ClassifierParams& w, const MetaBatch& meta) {
  if (meta.features.rows() == 0) throw std::invalid_argument("meta batch is empty");
  const ClassifierOutput out = classifier_forward(w, meta.features, meta.targets);
  const double m = static_cast<double>(meta.features.rows());
  Vector g = classifier_backward(w, out.cache, out.dlogits / m);
  return {out.losses.sum() / m, std::move(g)};
}

Hypergradient hypergrad(const VirtualStepCache& cache, const ClassifierParams& w_hat, const MetaBatch& meta,
                        const WeightNetParams& current_theta) {
  if (current_theta.flat.size() != cache.theta.size() || current_theta.flat != cache.theta) {
    throw std::logic_error("hypergrad: weight net changed since the virtual step was prepared");
  }
  Hypergradient hg;
  auto [loss, g_meta] = meta_loss_and_grad(w_hat, meta);
  hg.meta_loss = loss;
  Vector similarity = term_dots(cache, cache.dlogits, g_meta);
  if (cache.complement_dlogits.size() > 0) similarity -= term_dots(cache, cache.complement_dlogits, g_meta);
  hg.coefficients = cache.scale.cwiseProduct(similarity);

  Vector u = hg.coefficients;
  if (cache.norm == WeightNorm::batch_sum && cache.norm_sum != 0.0) {
    // Quotient rule through v~_j = V_j / S.
    const double s = cache.norm_sum;
    const double mean_coef = hg.coefficients.dot(cache.weights) / s;
    u = (hg.coefficients.array() - mean_coef) / s;
  }
  hg.grad = -cache.alpha * (cache.weight_grads.transpose() * u);
  require_finite(hg.grad, "hypergradient");
  return hg;
}

void meta_update(TrainState& state, const Vector& grad) {
  optimizer_step(state.theta_optimizer, state.theta.flat, grad);
  require_finite(state.theta.flat, "weight net parameters");
}

void classifier_update(TrainState& state, const VirtualStepCache& cache, double alpha, double,
                       const StepHooks& hooks) {
  const Vector v = raw_weights_at(cache, state.theta, hooks);
  const Vector dir = step_direction(cache, v);
  state.w_optimizer.learning_rate = alpha;
  optimizer_step(state.w_optimizer, state.w.flat, dir);
  require_finite(state.w.flat, "classifier parameters");
}

void erm_update(TrainState& state, const TrainBatch& batch, double alpha, WeightNorm norm) {
  StepHooks uniform;
  uniform.forced_weight = 1.0;
  const VirtualStepCache cache = prepare_step(state.w, state.theta, batch, norm, 0.0, uniform);
  const Vector dir = step_direction(cache, Vector::Ones(cache.terms()));
  state.w_optimizer.learning_rate = alpha;
  optimizer_step(state.w_optimizer, state.w.flat, dir);
  require_finite(state.w.flat, "classifier parameters");
}

void ema_update(ClassifierParams& w_wa, const ClassifierParams& w, double beta) {
  if (w_wa.flat.size() != w.flat.size()) throw DimensionError("ema_update: parameter size mismatch");
  w_wa.flat = beta * w_wa.flat + (1.0 - beta) * w.flat;
}

void temporal_ensemble(Eigen::Ref<Eigen::RowVectorXd> z, const Eigen::Ref<const Eigen::RowVectorXd>& p,
                       double alpha) {
  z = alpha * z + (1.0 - alpha) * p;
  const double s = z.sum();
  if (!std::isfinite(s) || s < 1e-12) {
    z.setConstant(1.0 / static_cast<double>(z.size()));
  } else {
    z /= s;
  }
}

MetaBatch mixup_rows(const MetaBatch& batch, std::span<const int> partners, std::span<const double> lambdas) {
  const Eigen::Index m = batch.features.rows();
  if (static_cast<Eigen::Index>(partners.size()) != m || static_cast<Eigen::Index>(lambdas.size()) != m) {
    throw DimensionError("mixup_rows: partners/lambdas do not match the batch");
  }
  MetaBatch out = batch;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double l = lambdas[static_cast<std::size_t>(i)];
    const int p = partners[static_cast<std::size_t>(i)];
    out.features.row(i) = l * batch.features.row(i) + (1.0 - l) * batch.features.row(p);
    out.targets.row(i) = l * batch.targets.row(i) + (1.0 - l) * batch.targets.row(p);
  }
  return out;
}

MetaBatch build_meta_set(const Dataset& data, const ClassifierParams& w, int per_class, bool mixup,
                         MetaSelection selection, Rng& rng, bool pseudo_labels) {
  const int C = data.num_classes;
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(C));
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.observed_labels[i])].push_back(static_cast<int>(i));

  Vector losses;
  if (selection == MetaSelection::lowest_loss) {
    losses = classifier_forward(w, data.features, data.observed_labels).losses;
  }

  std::vector<int> chosen;
  for (int c = 0; c < C; ++c) {
    auto& rows = by_class[static_cast<std::size_t>(c)];
    const std::size_t take = std::min(rows.size(), static_cast<std::size_t>(per_class));
    if (take < static_cast<std::size_t>(per_class)) {
      warn_once(g_short_class_warned, "meta set: class " + std::to_string(c) + " has only " +
                                          std::to_string(rows.size()) + " samples, taking all of them");
    }
    if (selection == MetaSelection::lowest_loss) {
      std::stable_sort(rows.begin(), rows.end(), [&](int a, int b) { return losses(a) < losses(b); });
      chosen.insert(chosen.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take));
    } else {
      for (int pick : rng.sample_without_replacement(rows.size(), take)) chosen.push_back(rows[static_cast<std::size_t>(pick)]);
    }
  }

  MetaBatch meta;
  meta.features.resize(static_cast<Eigen::Index>(chosen.size()), data.features.cols());
  Labels labels;
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    meta.features.row(static_cast<Eigen::Index>(i)) = data.features.row(chosen[i]);
    labels.push_back(data.observed_labels[static_cast<std::size_t>(chosen[i])]);
  }
  if (pseudo_labels && !chosen.empty()) labels = classifier_predict(w, meta.features);
  meta.targets = one_hot(labels, C);

  if (mixup && !chosen.empty()) {
    const auto partners = rng.permutation(chosen.size());
    std::vector<double> lambdas(chosen.size());
    for (auto& l : lambdas) l = rng.beta(1.0, 1.0);
    meta = mixup_rows(meta, partners, lambdas);
  }
  return meta;
}

namespace {

MetaBatch sample_meta_batch(const MetaBatch& pool, int m, Rng& rng) {
  const auto size = static_cast<std::size_t>(pool.features.rows());
  if (static_cast<std::size_t>(m) >= size) return pool;
  MetaBatch out;
  const auto rows = rng.sample_without_replacement(size, static_cast<std::size_t>(m));
  out.features.resize(m, pool.features.cols());
  out.targets.resize(m, pool.targets.cols());
  for (int i = 0; i < m; ++i) {
    out.features.row(i) = pool.features.row(rows[static_cast<std::size_t>(i)]);
    out.targets.row(i) = pool.targets.row(rows[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::vector<int> layer_sizes(const Dataset& data, const TrainConfig& cfg) {
  std::vector<int> sizes{data.dim()};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(data.num_classes);
  return sizes;
}

OptimizerState make_w_optimizer(const TrainConfig& cfg) {
  return OptimizerState::sgd(cfg.lr, cfg.momentum, cfg.weight_decay);
}

OptimizerState make_theta_optimizer(const TrainConfig& cfg) {
  if (cfg.meta_optimizer == OptimizerKind::adam) {
    return OptimizerState::adam(cfg.meta_lr, 0.9, 0.999, cfg.meta_weight_decay);
  }
  return OptimizerState::sgd(cfg.meta_lr, 0.0, cfg.meta_weight_decay);
}

double epoch_lr(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (int m : cfg.lr_milestones) {
    if (epoch >= m) lr *= cfg.lr_decay;
  }
  return lr;
}

struct EpochAccumulator {
  double meta_loss = 0.0;
  double hg_norm = 0.0;
  long meta_steps = 0;

  void add(const Hypergradient& hg, std::vector<double>& trace) {
    meta_loss += hg.meta_loss;
    const double sq = hg.grad.squaredNorm();
    hg_norm += std::sqrt(sq);
    trace.push_back(sq);
    ++meta_steps;
  }
};

MetricRow epoch_metrics(const TrainState& state, const Dataset& train, const std::vector<int>& families,
                        const Dataset* test, const EpochAccumulator& acc, int epoch, bool weighted,
                        double loss_clamp) {
  MetricRow row;
  row.iteration = state.iteration;
  row.epoch = epoch;
  const Vector losses = classifier_forward(state.w, train.features, train.observed_labels).losses;
  row.train_loss = losses.mean();
  row.meta_loss = acc.meta_steps > 0 ? acc.meta_loss / static_cast<double>(acc.meta_steps) : kNaN;
  row.hypergrad_norm = acc.meta_steps > 0 ? acc.hg_norm / static_cast<double>(acc.meta_steps) : kNaN;
  if (test != nullptr && test->size() > 0) {
    const Labels pred = classifier_predict(state.w, test->features);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test->clean_labels[i];
    row.test_acc = static_cast<double>(hit) / static_cast<double>(pred.size());
  } else {
    row.test_acc = kNaN;
  }
  const int K = state.theta.families;
  row.family_weights.assign(static_cast<std::size_t>(K), kNaN);
  if (weighted) {
    std::vector<double> sum(static_cast<std::size_t>(K), 0.0);
    std::vector<long> count(static_cast<std::size_t>(K), 0);
    for (Eigen::Index i = 0; i < losses.size(); ++i) {
      const auto k = static_cast<std::size_t>(families[static_cast<std::size_t>(i)]);
      sum[k] += weightnet_head(state.theta, clamp_input(losses(i), loss_clamp), static_cast<int>(k));
      ++count[k];
    }
    for (std::size_t k = 0; k < sum.size(); ++k) {
      if (count[k] > 0) row.family_weights[k] = sum[k] / static_cast<double>(count[k]);
    }
  }
  return row;
}

}  // namespace

TrainState init_state(const Dataset& train, const TrainConfig& cfg) {
  validate(cfg);
  if (train.size() == 0) throw ConfigError("training set is empty");
  Rng root(cfg.seed);
  TrainState state;
  std::vector<double> counts;
  for (int c : train.class_counts()) counts.push_back(static_cast<double>(c));
  Rng km = root.fork(1);
  state.omega = kmeans_1d(counts, cfg.families, cfg.kmeans_restarts, km);
  Rng w_init = root.fork(2);
  state.w = init_classifier(layer_sizes(train, cfg), w_init);
  Rng theta_init = root.fork(3);
  state.theta = init_weightnet(cfg.weightnet_hidden, state.omega.families(), theta_init);
  state.w_optimizer = make_w_optimizer(cfg);
  state.theta_optimizer = make_theta_optimizer(cfg);
  if (cfg.variant == Variant::cmwnet_sl) {
    state.z = one_hot(train.observed_labels, train.num_classes);
    state.w_wa = ClassifierParams::zeros(state.w.layer_sizes);
  }
  return state;
}

std::optional<Hypergradient> sl_train_step(TrainState& state, const TrainBatch& batch, const MetaBatch* meta,
                                           const TrainConfig& cfg, double alpha, Rng& rng) {
  if (state.z.rows() == 0 || state.w_wa.flat.size() != state.w.flat.size()) {
    throw std::logic_error("sl_train_step: pseudo labels and averaged weights are not initialized");
  }
  ema_update(state.w_wa, state.w, cfg.wa_momentum);
  const Matrix p = classifier_probs(state.w_wa, batch.features);
  const auto n = static_cast<Eigen::Index>(batch.indices.size());
  Matrix z_rows(n, state.z.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    auto zi = state.z.row(batch.indices[static_cast<std::size_t>(i)]);
    temporal_ensemble(zi, p.row(i), cfg.te_momentum);
    z_rows.row(i) = zi;
  }
  double lambda = rng.beta(cfg.mixup_gamma, cfg.mixup_gamma);
  lambda = std::max(lambda, 1.0 - lambda);
  const auto perm = rng.permutation(static_cast<std::size_t>(n));

  VirtualStepCache cache = prepare_sl_step(state.w, state.theta, batch, z_rows, lambda, perm, cfg.loss_clamp);
  std::optional<Hypergradient> hg;
  if (meta != nullptr) {
    const ClassifierParams w_hat = virtual_step(state.w, cache, alpha);
    hg = hypergrad(cache, w_hat, *meta, state.theta);
    meta_update(state, hg->grad);
  }
  classifier_update(state, cache, alpha, cfg.loss_clamp);
  return hg;
}

TrainResult meta_train(const Dataset& train, const TrainConfig& cfg, const Dataset* test,
                       const EpochObserver& observer) {
  TrainResult result;
  result.state = init_state(train, cfg);
  TrainState& state = result.state;
  if (cfg.variant == Variant::meta_test) throw ConfigError("meta_train cannot run the meta-test variant");

  const bool meta = cfg.variant != Variant::erm;
  const std::vector<int> families = sample_families(train, state.omega);
  Rng root(cfg.seed);
  Rng batch_rng = root.fork(4);
  Rng meta_rng = root.fork(5);
  Rng sl_rng = root.fork(6);
  const auto N = train.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_iterations >= 0 && state.iteration >= cfg.max_iterations) break;
    const bool warm = epoch < cfg.warmup_epochs;
    const double base_lr = epoch_lr(cfg, epoch);
    const std::vector<int> order = batch_rng.permutation(N);
    MetaBatch pool;
    if (meta && !warm) {
      pool = build_meta_set(train, state.w, cfg.meta_per_class, cfg.meta_mixup, MetaSelection::lowest_loss,
                            meta_rng, cfg.meta_pseudo_labels);
    }
    EpochAccumulator acc;

    for (std::size_t start = 0; start < N; start += bs) {
      if (cfg.max_iterations >= 0 && state.iteration >= cfg.max_iterations) break;
      const std::span<const int> rows(order.data() + start, std::min(bs, N - start));
      const TrainBatch batch = make_batch(train, rows, state.omega);
      double alpha = base_lr;
      if (cfg.schedule == LrSchedule::decaying) {
        const double t = static_cast<double>(state.iteration + 1);
        alpha = std::min(cfg.decay_c, cfg.decay_c / std::sqrt(t));
        state.theta_optimizer.learning_rate = alpha;
      }

      if (!meta || warm) {
        erm_update(state, batch, alpha, cfg.norm);
      } else {
        const bool meta_step = state.iteration % cfg.meta_period == 0;
        MetaBatch meta_batch;
        if (meta_step) meta_batch = sample_meta_batch(pool, cfg.meta_batch_size, meta_rng);
        if (cfg.variant == Variant::cmwnet_sl) {
          auto hg = sl_train_step(state, batch, meta_step ? &meta_batch : nullptr, cfg, alpha, sl_rng);
          if (hg) acc.add(*hg, result.hypergrad_sq);
        } else {
          VirtualStepCache cache = prepare_step(state.w, state.theta, batch, cfg.norm, cfg.loss_clamp);
          if (meta_step) {
            const ClassifierParams w_hat = virtual_step(state.w, cache, alpha);
            const Hypergradient hg = hypergrad(cache, w_hat, meta_batch, state.theta);
            meta_update(state, hg.grad);
            acc.add(hg, result.hypergrad_sq);
          }
          classifier_update(state, cache, alpha, cfg.loss_clamp);
        }
      }
      ++state.iteration;
    }

    MetricRow row = epoch_metrics(state, train, families, test, acc, epoch, meta, cfg.loss_clamp);
    if (!std::isfinite(row.train_loss)) {
      throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", iteration " +
                         std::to_string(state.iteration));
    }
    result.log.push_back(row);
    if (observer) observer(state, row);
  }
  return result;
}

TrainResult meta_test(const WeightNetParams& theta_star, const Dataset& query, const TrainConfig& cfg,
                      const Dataset* test, const EpochObserver& observer) {
  validate(cfg);
  if (query.size() == 0) throw ConfigError("query set is empty");
  TrainResult result;
  TrainState& state = result.state;
  Rng root(cfg.seed);
  std::vector<double> counts;
  for (int c : query.class_counts()) counts.push_back(static_cast<double>(c));
  Rng km = root.fork(1);
  state.omega = kmeans_1d(counts, theta_star.families, cfg.kmeans_restarts, km);
  if (state.omega.families() != theta_star.families) {
    throw ConfigError("meta-test: weight net has " + std::to_string(theta_star.families) +
                      " heads but the query set yields " + std::to_string(state.omega.families()) + " families");
  }
  Rng w_init = root.fork(2);
  state.w = init_classifier(layer_sizes(query, cfg), w_init);
  state.theta = theta_star;
  state.w_optimizer = make_w_optimizer(cfg);
  state.theta_optimizer = make_theta_optimizer(cfg);

  const std::vector<int> families = sample_families(query, state.omega);
  Rng batch_rng = root.fork(4);
  const auto N = query.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const EpochAccumulator none;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_iterations >= 0 && state.iteration >= cfg.max_iterations) break;
    const double base_lr = epoch_lr(cfg, epoch);
    const std::vector<int> order = batch_rng.permutation(N);
    for (std::size_t start = 0; start < N; start += bs) {
      if (cfg.max_iterations >= 0 && state.iteration >= cfg.max_iterations) break;
      const std::span<const int> rows(order.data() + start, std::min(bs, N - start));
      const TrainBatch batch = make_batch(query, rows, state.omega);
      double alpha = base_lr;
      if (cfg.schedule == LrSchedule::decaying) {
        alpha = std::min(cfg.decay_c, cfg.decay_c / std::sqrt(static_cast<double>(state.iteration + 1)));
      }
      const VirtualStepCache cache = prepare_step(state.w, state.theta, batch, cfg.norm, cfg.loss_clamp);
      classifier_update(state, cache, alpha, cfg.loss_clamp);
      ++state.iteration;
    }
    MetricRow row = epoch_metrics(state, query, families, test, none, epoch, true, cfg.loss_clamp);
    if (!std::isfinite(row.train_loss)) {
      throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
    }
    result.log.push_back(row);
    if (observer) observer(state, row);
  }
  return result;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows, int families) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "iteration,epoch,train_loss,meta_loss,test_acc";
  for (int k = 0; k < families; ++k) os << ",family_" << k << "_mean_weight";
  os << ",hypergrad_norm\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    os << r.iteration << ',' << r.epoch << ',' << num(r.train_loss) << ',' << num(r.meta_loss) << ','
       << num(r.test_acc);
    for (int k = 0; k < families; ++k) {
      os << ',' << num(k < static_cast<int>(r.family_weights.size()) ? r.family_weights[static_cast<std::size_t>(k)] : kNaN);
    }
    os << ',' << num(r.hypergrad_norm) << '\n';
  }
  if (!os) throw IoError("write failed: " + path.string());
}

namespace {

using nlohmann::json;

json optimizer_json(const OptimizerState& s) {
  return {{"kind", s.kind == OptimizerKind::adam ? "adam" : "sgd-momentum"},
          {"learning_rate", s.learning_rate},
          {"momentum", s.momentum},
          {"beta2", s.beta2},
          {"epsilon", s.epsilon},
          {"weight_decay", s.weight_decay},
          {"step_count", s.step_count}};
}

OptimizerState optimizer_from_json(const json& j) {
  OptimizerState s;
  s.kind = j.at("kind").get<std::string>() == "adam" ? OptimizerKind::adam : OptimizerKind::sgd_momentum;
  s.learning_rate = j.at("learning_rate").get<double>();
  s.momentum = j.at("momentum").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.epsilon = j.at("epsilon").get<double>();
  s.weight_decay = j.at("weight_decay").get<double>();
  s.step_count = j.at("step_count").get<long>();
  return s;
}

void save_vector(const std::filesystem::path& path, const Vector& v) {
  const std::int64_t shape[] = {v.size()};
  write_param_file(path, shape, v);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const TrainState& state, const TrainConfig& cfg) {
  std::filesystem::create_directories(dir);
  save_classifier(dir / "classifier.bin", state.w);
  save_weightnet(dir / "weightnet.bin", state.theta);
  json files = {{"classifier", "classifier.bin"}, {"weightnet", "weightnet.bin"}};
  auto save_moments = [&](const OptimizerState& s, const std::string& stem) {
    if (s.first_moment.size() > 0) {
      save_vector(dir / (stem + "_m.bin"), s.first_moment);
      files[stem + "_m"] = stem + "_m.bin";
    }
    if (s.second_moment.size() > 0) {
      save_vector(dir / (stem + "_v.bin"), s.second_moment);
      files[stem + "_v"] = stem + "_v.bin";
    }
  };
  save_moments(state.w_optimizer, "w_optimizer");
  save_moments(state.theta_optimizer, "theta_optimizer");
  if (state.w_wa.flat.size() > 0) {
    save_classifier(dir / "ema.bin", state.w_wa);
    files["ema"] = "ema.bin";
  }
  if (state.z.size() > 0) {
    const std::int64_t shape[] = {state.z.rows(), state.z.cols()};
    write_param_file(dir / "z.bin", shape, Eigen::Map<const Vector>(state.z.data(), state.z.size()));
    files["z"] = "z.bin";
  }
  json meta = {
      {"format", "cmwnet-checkpoint"},
      {"version", 1},
      {"architecture",
       {{"classifier", "mlp-relu-softmax"},
        {"layer_sizes", state.w.layer_sizes},
        {"weightnet", "shared-relu-hidden-sigmoid-heads"},
        {"weightnet_hidden", state.theta.hidden},
        {"families", state.theta.families}}},
      {"omega",
       {{"centers", state.omega.centers},
        {"class_to_family", state.omega.class_to_family},
        {"requested_families", state.omega.requested_families}}},
      {"variant", to_string(cfg.variant)},
      {"normalization", cfg.norm == WeightNorm::batch_sum ? "batch_sum" : "none"},
      {"loss_clamp", cfg.loss_clamp},
      {"iteration", state.iteration},
      {"w_optimizer", optimizer_json(state.w_optimizer)},
      {"theta_optimizer", optimizer_json(state.theta_optimizer)},
      {"files", files}};
  std::ofstream os(dir / "checkpoint.json");
  if (!os) throw IoError("cannot write " + (dir / "checkpoint.json").string());
  os << meta.dump(2) << '\n';
}

TrainState load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "checkpoint.json");
  if (!is) throw IoError("cannot open " + (dir / "checkpoint.json").string());
  json meta;
  try {
    is >> meta;
    TrainState state;
    const json& files = meta.at("files");
    state.w = load_classifier(dir / files.at("classifier").get<std::string>());
    state.theta = load_weightnet(dir / files.at("weightnet").get<std::string>());
    state.omega.centers = meta.at("omega").at("centers").get<std::vector<double>>();
    state.omega.class_to_family = meta.at("omega").at("class_to_family").get<std::vector<int>>();
    state.omega.requested_families = meta.at("omega").at("requested_families").get<int>();
    state.iteration = meta.at("iteration").get<long>();
    state.w_optimizer = optimizer_from_json(meta.at("w_optimizer"));
    state.theta_optimizer = optimizer_from_json(meta.at("theta_optimizer"));
    auto load_moments = [&](OptimizerState& s, const std::string& stem) {
      if (files.contains(stem + "_m")) s.first_moment = read_param_file(dir / files.at(stem + "_m").get<std::string>()).data;
      if (files.contains(stem + "_v")) s.second_moment = read_param_file(dir / files.at(stem + "_v").get<std::string>()).data;
    };
    load_moments(state.w_optimizer, "w_optimizer");
    load_moments(state.theta_optimizer, "theta_optimizer");
    if (files.contains("ema")) state.w_wa = load_classifier(dir / files.at("ema").get<std::string>());
    if (files.contains("z")) {
      ParamFile f = read_param_file(dir / files.at("z").get<std::string>());
      if (f.shape.size() != 2) throw IoError("z.bin must be two-dimensional");
      state.z = Eigen::Map<const Matrix>(f.data.data(), f.shape[0], f.shape[1]);
    }
    if (state.omega.families() != state.theta.families) throw IoError("checkpoint family count mismatch");
    return state;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint.json: " + std::string(e.what()));
  }
}

}  // namespace cmwnet
