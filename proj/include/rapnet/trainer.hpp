// Training loop, optimizer and the finite-difference gradient check.
#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rapnet/data.hpp"
#include "rapnet/rap_net.hpp"

namespace rapnet {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 4;
  int max_iterations = 2000;
  int ss_iters = 50000;
  int patience = 10;      // validation checks without improvement
  int val_interval = 100;  // iterations between validation checks
  int val_count = 50;      // sequences held out from the training file
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ValidationError("train." + field + ": " + why);
    };
    if (!(lr > 0) || !std::isfinite(lr)) fail("lr", "must be > 0");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (max_iterations < 0) fail("max_iterations", "must be >= 0");
    if (ss_iters <= 0) fail("ss_iters", "must be > 0");
    if (patience < 1) fail("patience", "must be >= 1");
    if (val_interval < 1) fail("val_interval", "must be >= 1");
    if (val_count < 1) fail("val_count", "must be >= 1");
    if (!(lambda1 >= 0) || !(lambda2 >= 0)) fail("lambda1", "loss weights must be >= 0");
    if (lambda1 == 0 && lambda2 == 0) fail("lambda1", "lambda1 and lambda2 cannot both be 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"batch_size", c.batch_size},
       {"max_iterations", c.max_iterations},
       {"ss_iters", c.ss_iters},
       {"patience", c.patience},
       {"val_interval", c.val_interval},
       {"val_count", c.val_count},
       {"lambda1", c.lambda1},
       {"lambda2", c.lambda2},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ValidationError("train: expected a JSON object");
  static const std::vector<std::string> known = {"lr", "batch_size", "max_iterations",
                                                 "ss_iters", "patience", "val_interval",
                                                 "val_count", "lambda1", "lambda2", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ValidationError("train." + key + ": unknown field");
    }
  }
  auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError(std::string("train.") + key + ": wrong type");
    }
  };
  read("lr", c.lr);
  read("batch_size", c.batch_size);
  read("max_iterations", c.max_iterations);
  read("ss_iters", c.ss_iters);
  read("patience", c.patience);
  read("val_interval", c.val_interval);
  read("val_count", c.val_count);
  read("lambda1", c.lambda1);
  read("lambda2", c.lambda2);
  read("seed", c.seed);
}

/// lambda1 * mean|pred - truth| + lambda2 * mean (pred - truth)^2.
template <class T>
double loss(const Tensor<T>& pred, const Tensor<T>& truth, double lambda1, double lambda2) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("loss: " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  }
  if (pred.empty()) throw ShapeError("loss: empty input");
  double l1 = 0, l2 = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(truth[i]);
    l1 += std::abs(d);
    l2 += d * d;
  }
  const double n = static_cast<double>(pred.size());
  return lambda1 * l1 / n + lambda2 * l2 / n;
}

/// Linear decay of the teacher-forcing probability: max(0, 1 - iter / ss_iters).
inline double sampling_probability(long iter, long ss_iters) {
  if (ss_iters <= 0) throw ValidationError("sampling_probability: ss_iters must be > 0");
  if (iter < 0) throw ValidationError("sampling_probability: iter must be >= 0");
  return std::max(0.0, 1.0 - static_cast<double>(iter) / static_cast<double>(ss_iters));
}

/// One Bernoulli(p) draw per decoding step, shared by the whole batch.
/// Warm-up steps (tau < t_in) always read ground truth and are left false.
inline std::vector<bool> teacher_mask(const ModelConfig& cfg, double p, Rng& rng) {
  std::vector<bool> mask(static_cast<std::size_t>(cfg.t_total - 1), false);
  for (int tau = cfg.t_in; tau + 1 < cfg.t_total; ++tau) mask[tau] = rng.bernoulli(p);
  return mask;
}

template <class T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore<T>& store) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& [name, var] : store.entries()) {
      const Tensor<T> g = var.grad();
      auto& slot = moments_[name];
      if (slot.first.empty()) {
        slot.first.assign(g.size(), 0.0);
        slot.second.assign(g.size(), 0.0);
      }
      Var<T> handle = var;
      Tensor<T>& value = handle.mutable_value();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        double& m = slot.first[i];
        double& v = slot.second[i];
        m = beta1_ * m + (1 - beta1_) * gi;
        v = beta2_ * v + (1 - beta2_) * gi * gi;
        const double update = lr_ * (m / c1) / (std::sqrt(v / c2) + eps_);
        value[i] = static_cast<T>(static_cast<double>(value[i]) - update);
      }
    }
  }

  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

struct LogRecord {
  int iter = 0;
  double train_loss = 0;
  double val_loss = 0;
  double sampling_p = 0;
  double seconds = 0;
};

inline nlohmann::json log_record_json(const LogRecord& r) {
  return {{"iter", r.iter},
          {"train_loss", r.train_loss},
          {"val_loss", r.val_loss},
          {"sampling_p", r.sampling_p},
          {"seconds", r.seconds}};
}

template <class T>
struct TrainResult {
  ParamStore<T> best;
  std::optional<double> best_val_loss;  // empty when no validation ran
  int best_iteration = 0;
  int iterations = 0;
  bool stopped_early = false;
  std::vector<LogRecord> log;
};

/// Forecast loss on `index` sequences with no teacher forcing beyond the
/// warm-up, averaged over batches weighted by size.
template <class T>
double validation_loss(const ModelConfig& cfg, const ParamStore<T>& store,
                       const std::vector<RadarSequence>& seqs,
                       const std::vector<std::size_t>& index, int batch_size, double lambda1,
                       double lambda2) {
  const ParamStore<T> fixed = store.frozen();
  double total = 0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < index.size(); start += batch_size) {
    const std::size_t end = std::min(index.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> chunk(index.begin() + start, index.begin() + end);
    const Tensor<T> frames = to_batch<T>(seqs, chunk, 0, cfg.t_total);
    const Tensor<T> generated = forward_sequence(frames, cfg, fixed).value();
    const int n = generated.dim(1);
    const Tensor<T> pred = frame_range(generated, n - cfg.forecast_length(), n);
    const Tensor<T> truth = frame_range(frames, cfg.t_in, cfg.t_total);
    total += loss(pred, truth, lambda1, lambda2) * static_cast<double>(chunk.size());
    count += chunk.size();
  }
  return total / static_cast<double>(count);
}

using LogSink = std::function<void(const LogRecord&)>;

/// Trains on `train_index`, validates on `val_index` every val_interval
/// iterations and returns the parameters with the lowest validation loss.
/// Batches are drawn epoch by epoch from a seeded shuffle.
template <class T>
TrainResult<T> train(const ModelConfig& cfg, const TrainConfig& tc,
                     const std::vector<RadarSequence>& seqs, const DatasetSplit& split,
                     ParamStore<T> params, const LogSink& sink = {}) {
  cfg.validate();
  tc.validate();
  if (split.train.empty()) throw ValidationError("train: empty training split");
  if (split.val.empty()) throw ValidationError("train: empty validation split");
  for (const auto& s : seqs) {
    if (s.length() < cfg.t_total || s.height() != cfg.height || s.width() != cfg.width) {
      throw ValidationError("train: sequences are " + std::to_string(s.length()) + "x" +
                            std::to_string(s.height()) + "x" + std::to_string(s.width()) +
                            ", model expects " + std::to_string(cfg.t_total) + "x" +
                            std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
    }
  }

  TrainResult<T> result;
  result.best = params.clone();
  Rng rng(splitmix64(tc.seed ^ 0x7261706e6574ull));
  Adam<T> adam(tc.lr);
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_batch = [&] {
    std::vector<std::size_t> batch;
    while (static_cast<int>(batch.size()) < tc.batch_size) {
      if (cursor == order.size()) {
        order = split.train;
        for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    return batch;
  };

  const auto started = std::chrono::steady_clock::now();
  double interval_loss = 0;
  int interval_steps = 0;
  int stale = 0;
  for (int iter = 1; iter <= tc.max_iterations; ++iter) {
    const double p = sampling_probability(iter - 1, tc.ss_iters);
    const auto mask = teacher_mask(cfg, p, rng);
    const Tensor<T> frames = to_batch<T>(seqs, next_batch(), 0, cfg.t_total);
    params.zero_grad();
    auto generated = forward_sequence(frames, cfg, params, mask);
    auto truth = Var<T>::constant(frame_range(frames, 1, cfg.t_total));
    auto l = ops::l1l2_loss(generated, truth, static_cast<T>(tc.lambda1), static_cast<T>(tc.lambda2));
    const double lv = static_cast<double>(l.value()[0]);
    if (!std::isfinite(lv)) {
      throw NumericError("train: non-finite loss at iteration " + std::to_string(iter));
    }
    backward(l);
    for (const auto& [name, var] : params.entries()) {
      if (!var.grad().all_finite()) {
        throw NumericError("train: non-finite gradient for " + name + " at iteration " +
                           std::to_string(iter));
      }
    }
    adam.step(params);
    interval_loss += lv;
    ++interval_steps;
    result.iterations = iter;

    if (iter % tc.val_interval == 0 || iter == tc.max_iterations) {
      LogRecord rec;
      rec.iter = iter;
      rec.train_loss = interval_loss / interval_steps;
      rec.val_loss = validation_loss(cfg, params, seqs, split.val, tc.batch_size, tc.lambda1,
                                     tc.lambda2);
      if (!std::isfinite(rec.val_loss)) {
        throw NumericError("train: non-finite validation loss at iteration " + std::to_string(iter));
      }
      rec.sampling_p = p;
      rec.seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      result.log.push_back(rec);
      if (sink) sink(rec);
      interval_loss = 0;
      interval_steps = 0;
      if (!result.best_val_loss || rec.val_loss < *result.best_val_loss) {
        result.best_val_loss = rec.val_loss;
        result.best_iteration = iter;
        result.best = params.clone();
        stale = 0;
      } else if (++stale >= tc.patience) {
        result.stopped_early = true;
        break;
      }
    }
  }
  return result;
}

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::map<std::string, double> group_error;  // worst error per parameter group
  std::map<std::string, std::size_t> group_count;
};

/// Full teacher-forced loss of one sample; deterministic.
template <class T>
T teacher_forced_loss(const ModelConfig& cfg, const ParamStore<T>& store, const Tensor<T>& frames,
                      T lambda1, T lambda2) {
  const std::vector<bool> all_truth(static_cast<std::size_t>(cfg.t_total - 1), true);
  auto generated = forward_sequence(frames, cfg, store, all_truth);
  auto truth = Var<T>::constant(frame_range(frames, 1, cfg.t_total));
  return ops::l1l2_loss(generated, truth, lambda1, lambda2).value()[0];
}

/// Compares backprop gradients with central differences on at least
/// `min_scalars` parameters, at least one per tensor, so every group is hit.
/// Both sides are evaluated in long double; relative error is
/// |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckResult grad_check(const ModelConfig& cfg, const ParamStore<double>& params,
                                  const Tensor<double>& frames_in, double epsilon = 1e-5,
                                  double lambda1 = 1.0, double lambda2 = 1.0,
                                  std::size_t min_scalars = 100, std::uint64_t seed = 0) {
  using R = long double;
  if (!(epsilon > 0)) throw ValidationError("grad_check: epsilon must be > 0");
  ParamStore<R> store = params.cast<R>();
  const Tensor<R> frames = frames_in.cast<R>();
  const R l1 = lambda1, l2 = lambda2;
  const std::vector<bool> all_truth(static_cast<std::size_t>(cfg.t_total - 1), true);
  auto generated = forward_sequence(frames, cfg, store, all_truth);
  auto truth = Var<R>::constant(frame_range(frames, 1, cfg.t_total));
  backward(ops::l1l2_loss(generated, truth, l1, l2));

  std::map<std::string, Tensor<R>> analytic;
  for (const auto& [name, var] : store.entries()) {
    analytic[name] = var.grad();
    if (!analytic[name].all_finite()) throw NumericError("grad_check: non-finite gradient in " + name);
  }

  const std::size_t per_tensor = std::max<std::size_t>(
      1, (min_scalars + store.size() - 1) / std::max<std::size_t>(1, store.size()));
  Rng rng(seed);
  GradCheckResult r;
  for (const auto& [name, var] : store.entries()) {
    Var<R> handle = var;
    Tensor<R>& value = handle.mutable_value();
    const std::string group = ParamStore<R>::group_of(name);
    const std::size_t picks = std::min(per_tensor, value.size());
    for (std::size_t k = 0; k < picks; ++k) {
      const std::size_t i = picks == value.size() ? k : rng.below(value.size());
      const R saved = value[i];
      value[i] = saved + epsilon;
      const R up = teacher_forced_loss(cfg, store, frames, l1, l2);
      value[i] = saved - epsilon;
      const R down = teacher_forced_loss(cfg, store, frames, l1, l2);
      value[i] = saved;
      const double numeric = static_cast<double>((up - down) / (2 * static_cast<R>(epsilon)));
      const double a = static_cast<double>(analytic[name][i]);
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      r.max_rel_error = std::max(r.max_rel_error, err);
      r.group_error[group] = std::max(r.group_error[group], err);
      ++r.group_count[group];
      ++r.checked;
    }
  }
  return r;
}

/// Forecasts from the first t_in frames of [B, T, 1, H, W] (T >= t_in);
/// returns the clamped [B, t_total - t_in, 1, H, W] forecast.
template <class T>
Tensor<T> forecast(const ModelConfig& cfg, const ParamStore<T>& store, const Tensor<T>& frames) {
  const Tensor<T> inputs = frame_range(frames, 0, cfg.t_in);
  return forecast_slice(forward_sequence(inputs, cfg, store.frozen()).value(), cfg);
}

}  // namespace rapnet
