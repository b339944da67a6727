#pragma once

// Optimization loop: cross-entropy on blended leaf distributions, Adam with
// a staircase learning-rate decay, optional global-norm gradient clipping,
// and early stopping against a validation split with best-state restore.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "sttree/checkpoint.hpp"
#include "sttree/model.hpp"
#include "sttree/ts_data.hpp"

namespace sttree {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::size_t decay_steps = 5;   // epochs per staircase step
  double decay_rate = 0.90;
  bool compound_decay = false;   // smooth rate^(epoch/steps) variant
  long patience = -1;            // < 0 disables early stopping
  double val_fraction = 0.2;     // stratified holdout when stopping is on and no val set given
  double grad_clip = 5.0;        // global norm cap; <= 0 disables
  std::uint64_t seed = 42;
};

// Mean negative log of the probability assigned to the true class, with the
// picked probability floored at 1e-12 before the log.
inline Tensor cross_entropy(const Tensor& y_hat, const Tensor& labels) {
  if (y_hat.rank() != 2)
    throw ShapeError("cross_entropy: expected [BxM] probabilities, got " +
                     shape_str(y_hat.shape()));
  const std::size_t B = y_hat.dim(0), M = y_hat.dim(1);
  if (labels.rank() != 1 || labels.dim(0) != B)
    throw ShapeError("cross_entropy: labels " + shape_str(labels.shape()) +
                     " do not match batch of " + std::to_string(B));
  Tensor onehot({B, M});
  for (std::size_t b = 0; b < B; ++b) {
    const double lv = labels.data()[b];
    const std::size_t l = static_cast<std::size_t>(lv);
    if (lv != static_cast<double>(l) || l >= M)
      throw ValueError("cross_entropy: label " + std::to_string(lv) + " outside [0, " +
                       std::to_string(M) + ")");
    onehot.data()[b * M + l] = 1.0;
  }
  Tensor picked = sum_axis(mul(y_hat, onehot), 1);  // [B]
  Tensor logs = log(clamp(picked, 1e-12, std::numeric_limits<double>::infinity()));
  return mul_scalar(sum_all(logs), -1.0 / static_cast<double>(B));
}

// 1-based epochs. Staircase: one decay step every `decay_steps` epochs, the
// first window at the base rate. The compound variant decays smoothly as
// rate^(epoch / decay_steps).
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch == 0) throw ValueError("lr_at: epochs are 1-based");
  if (cfg.decay_steps == 0) return cfg.learning_rate;
  if (cfg.compound_decay)
    return cfg.learning_rate *
           std::pow(cfg.decay_rate,
                    static_cast<double>(epoch) / static_cast<double>(cfg.decay_steps));
  const std::size_t step = (epoch - 1) / cfg.decay_steps;
  return cfg.learning_rate * std::pow(cfg.decay_rate, static_cast<double>(step));
}

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;
};

// Standard Adam (beta1 0.9, beta2 0.999, eps 1e-8) with bias correction.
// Gradients are consumed: they are zeroed after the step. Non-finite
// gradients or updates abort with the parameter's name.
inline void adam_step(const std::vector<NamedParam>& params, AdamState& st, double lr) {
  if (st.m.empty()) {
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.m[i].assign(params[i].tensor.size(), 0.0);
      st.v[i].assign(params[i].tensor.size(), 0.0);
    }
  }
  if (st.m.size() != params.size())
    throw ShapeError("adam_step: state tracks " + std::to_string(st.m.size()) +
                     " tensors, got " + std::to_string(params.size()));
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++st.t;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    double* val = t.data();
    double* g = t.grad();
    for (std::size_t j = 0; j < t.size(); ++j) {
      if (!std::isfinite(g[j]))
        throw NumericError("adam_step: non-finite gradient in " + params[i].name);
      st.m[i][j] = b1 * st.m[i][j] + (1.0 - b1) * g[j];
      st.v[i][j] = b2 * st.v[i][j] + (1.0 - b2) * g[j] * g[j];
      const double update = lr * (st.m[i][j] / bc1) / (std::sqrt(st.v[i][j] / bc2) + eps);
      val[j] -= update;
      if (!std::isfinite(val[j]))
        throw NumericError("adam_step: non-finite value in " + params[i].name);
      g[j] = 0.0;
    }
  }
}

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_gradients(const std::vector<NamedParam>& params, double max_norm) {
  double sq = 0.0;
  for (const NamedParam& p : params) {
    Tensor t = p.tensor;
    const double* g = t.grad();
    for (std::size_t j = 0; j < t.size(); ++j) sq += g[j] * g[j];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const NamedParam& p : params) {
      Tensor t = p.tensor;
      double* g = t.grad();
      for (std::size_t j = 0; j < t.size(); ++j) g[j] *= scale;
    }
  }
  return norm;
}

struct Metrics {
  double accuracy = 0.0;
  std::vector<double> per_class;
  double mean_loss = 0.0;
};

inline Metrics evaluate(const Model& model, const Dataset& ds, std::size_t batch_size = 32) {
  Metrics m;
  m.per_class.assign(ds.num_classes(), 0.0);
  std::vector<std::size_t> per_class_total(ds.num_classes(), 0);
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (const Batch& batch : make_batches(ds, batch_size, 0, false)) {
    const Model::Forward out = model.forward(batch.x);
    loss_sum += cross_entropy(out.y_hat, batch.y).item() * static_cast<double>(batch.indices.size());
    const std::vector<std::size_t> pred = argmax_last(out.y_hat);
    for (std::size_t b = 0; b < batch.indices.size(); ++b) {
      const std::size_t truth = static_cast<std::size_t>(batch.y.data()[b]);
      ++per_class_total[truth];
      if (pred[b] == truth) {
        ++correct;
        m.per_class[truth] += 1.0;
      }
    }
  }
  const std::size_t n = ds.size();
  m.accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  m.mean_loss = n ? loss_sum / static_cast<double>(n) : 0.0;
  for (std::size_t c = 0; c < m.per_class.size(); ++c)
    if (per_class_total[c]) m.per_class[c] /= static_cast<double>(per_class_total[c]);
  return m;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct TrainState {
  std::vector<EpochMetrics> history;
  AdamState adam;
  double best_val = 0.0;
  std::size_t stopped_epoch = 0;  // last epoch that ran
  bool restored_best = false;
};

namespace detail {

inline std::vector<std::vector<double>> snapshot_params(const std::vector<NamedParam>& params) {
  std::vector<std::vector<double>> snap(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) snap[i] = params[i].tensor.values();
  return snap;
}

inline void restore_params(const std::vector<NamedParam>& params,
                           const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    std::copy(snap[i].begin(), snap[i].end(), t.data());
  }
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Runs the optimization loop. With patience disabled the final state stays;
// with patience enabled the model is evaluated per epoch on `val` (or on an
// internal stratified holdout when none is given), stops once the metric
// fails to improve for more than `patience` consecutive epochs, and the
// best-scoring parameters are restored at the end. Improvement is a strict
// increase over the best validation accuracy seen, starting from zero.
inline TrainState train(Model& model, const Dataset& train_ds, const Dataset* val_ds,
                        const TrainConfig& cfg, const EpochCallback& on_epoch = nullptr) {
  if (train_ds.size() == 0) throw ValueError("train: empty training set");
  if (cfg.epochs == 0) throw ConfigError("train: epochs must be positive");

  Dataset fit = train_ds;
  Dataset holdout;
  const Dataset* val = val_ds;
  if (cfg.patience >= 0 && val == nullptr) {
    auto split = stratified_split(train_ds, cfg.val_fraction, derive_seed(cfg.seed, "val_split"));
    fit = std::move(split.first);
    holdout = std::move(split.second);
    if (holdout.size() == 0) throw ValueError("train: validation holdout is empty");
    val = &holdout;
  }

  const std::vector<NamedParam> params = model.params();
  TrainState st;
  std::vector<std::vector<double>> best_snap;
  long misses = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0, batch_no = 0;
    for (const Batch& batch : make_batches(fit, cfg.batch_size,
                                           derive_seed(cfg.seed, "epoch" + std::to_string(epoch)),
                                           true)) {
      ++batch_no;
      Tensor loss;
      {
        Tape tape;
        const Model::Forward out = model.forward(batch.x);
        loss = cross_entropy(out.y_hat, batch.y);
        if (!std::isfinite(loss.item()))
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batch_no));
        tape.backward(loss);
        const std::vector<std::size_t> pred = argmax_last(out.y_hat);
        for (std::size_t b = 0; b < batch.indices.size(); ++b)
          if (pred[b] == static_cast<std::size_t>(batch.y.data()[b])) ++correct;
      }
      if (cfg.grad_clip > 0.0) clip_gradients(params, cfg.grad_clip);
      adam_step(params, st.adam, lr);
      loss_sum += loss.item() * static_cast<double>(batch.indices.size());
      seen += batch.indices.size();
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.train_loss = loss_sum / static_cast<double>(seen);
    em.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    em.val_acc = evaluate(model, val ? *val : train_ds).accuracy;
    st.history.push_back(em);
    st.stopped_epoch = epoch;
    if (on_epoch) on_epoch(em);

    if (cfg.patience >= 0) {
      if (em.val_acc > st.best_val) {
        st.best_val = em.val_acc;
        best_snap = detail::snapshot_params(params);
        misses = 0;
      } else {
        ++misses;
        if (misses > cfg.patience) break;
      }
    } else if (em.val_acc > st.best_val) {
      st.best_val = em.val_acc;
    }
  }

  if (cfg.patience >= 0 && !best_snap.empty()) {
    detail::restore_params(params, best_snap);
    st.restored_best = true;
  }
  return st;
}

// Warm start from a checkpoint: every encoder tensor except the patch
// embedding is copied over (the logits head only when the class count
// matches); the patch embedding and the tree keep their fresh
// initialization. Then trains as usual.
inline TrainState fine_tune(Model& model, const std::string& checkpoint_path,
                            const Dataset& train_ds, const Dataset* val_ds,
                            const TrainConfig& cfg, const EpochCallback& on_epoch = nullptr) {
  CheckpointData cp;
  try {
    cp = read_checkpoint(checkpoint_path);
  } catch (const FormatError& e) {
    throw TransferError(std::string("fine_tune: unreadable checkpoint: ") + e.what());
  } catch (const IoError& e) {
    throw TransferError(std::string("fine_tune: unreadable checkpoint: ") + e.what());
  }
  transfer_encoder(model, cp);
  return train(model, train_ds, val_ds, cfg, on_epoch);
}

inline void write_metrics_csv(const std::vector<EpochMetrics>& history, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_metrics_csv: cannot open " + path);
  f << "epoch,lr,train_loss,train_acc,val_acc\n";
  for (const EpochMetrics& em : history)
    f << em.epoch << "," << detail::format_double(em.lr) << ","
      << detail::format_double(em.train_loss) << "," << detail::format_double(em.train_acc)
      << "," << detail::format_double(em.val_acc) << "\n";
  if (!f) throw IoError("write_metrics_csv: write failed for " + path);
}

}  // namespace sttree
