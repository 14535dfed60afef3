#pragma once

// Losses, Adam, the staged learning-rate schedule with best-weights
// restoration, and the pre-training / fine-tuning drivers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sslrul/error.hpp"
#include "sslrul/fatigue_sim.hpp"
#include "sslrul/nn.hpp"
#include "sslrul/rng.hpp"
#include "sslrul/tensor.hpp"

namespace sslrul {

inline Tensor mse_loss(const Tensor& pred, const Tensor& target) { return mse(pred, target); }

struct MapeResult {
  double value = 0.0;        // percent
  std::size_t used = 0;
  std::size_t excluded = 0;  // zero targets skipped
};

// Mean absolute percentage error; zero targets are skipped and counted.
inline MapeResult mape(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size())
    throw ShapeError("mape: shape mismatch " + std::to_string(pred.size()) + " vs " + std::to_string(target.size()));
  MapeResult r;
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (target[i] == 0.0) {
      ++r.excluded;
      continue;
    }
    acc += std::abs((target[i] - pred[i]) / target[i]);
    ++r.used;
  }
  r.value = r.used ? 100.0 * acc / static_cast<double>(r.used) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& state, double lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads size mismatch");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.t = 0;
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = kAdamBeta1 * state.m[i] + (1.0 - kAdamBeta1) * g;
    state.v[i] = kAdamBeta2 * state.v[i] + (1.0 - kAdamBeta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEps);
  }
}

// Adam over the trainable tensors of a model; frozen tensors get no state.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Tensor> trainable) : params_(std::move(trainable)), state_(params_.size()) {}

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;
      const std::vector<double> g = params_[i].grad();
      adam_step(params_[i].mutable_values(), g, state_[i], lr);
    }
  }
  std::size_t n_tensors() const { return params_.size(); }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamMoments> state_;
};

struct TrainConfig {
  std::vector<double> stage_lrs{1e-2, 1e-3, 1e-4};
  double final_lr = 1e-5;
  std::size_t epochs_per_stage = 50;
  std::size_t final_patience = 10;
  std::size_t final_max_epochs = 200;
  double min_delta_rel = 1e-6;
  std::size_t batch_size = 4096;
  double val_fraction = 0.05;
  std::size_t max_windows_per_epoch = 0;  // 0 = every window every epoch
  std::size_t max_val_windows = 0;        // 0 = whole validation split
  std::size_t eval_batch_size = 512;
  std::uint64_t seed = 0;

  static TrainConfig pretrain_defaults() { return TrainConfig{}; }
  static TrainConfig finetune_defaults() {
    TrainConfig c;
    c.batch_size = 32;
    return c;
  }

  void validate() const {
    if (stage_lrs.empty()) throw ConfigError("train config: stage_lrs must not be empty");
    for (std::size_t i = 0; i < stage_lrs.size(); ++i) {
      if (!(stage_lrs[i] > 0)) throw ConfigError("train config: learning rates must be > 0");
      if (i > 0 && !(stage_lrs[i] < stage_lrs[i - 1]))
        throw ConfigError("train config: stage_lrs must be strictly decreasing");
    }
    if (!(final_lr > 0)) throw ConfigError("train config: final_lr must be > 0");
    if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("train config: batch sizes must be >= 1");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("train config: val_fraction must lie in [0, 1)");
    if (!(min_delta_rel >= 0)) throw ConfigError("train config: min_delta_rel must be >= 0");
  }
};

struct EpochLog {
  std::string phase;  // "stage0", "stage1", ..., "final"
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_mape = std::numeric_limits<double>::quiet_NaN();
  bool improved = false;

  bool operator==(const EpochLog& o) const {
    auto same = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
    return phase == o.phase && epoch == o.epoch && lr == o.lr && same(train_loss, o.train_loss) &&
           same(val_loss, o.val_loss) && same(val_mape, o.val_mape) && improved == o.improved;
  }
};

enum class Split : std::uint8_t { Train, Val };

struct SampleRef {
  Split split = Split::Train;
  std::uint32_t index = 0;
};

struct EvalResult {
  double loss = 0.0;
  double mape = std::numeric_limits<double>::quiet_NaN();
};

// What fit() optimizes: a set of train/val samples and a batched loss.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::size_t size(Split split) const = 0;
  virtual Tensor batch_loss(std::span<const SampleRef> batch, bool training, Rng& rng) = 0;
  // Evaluation-mode MSE (and MAPE where meaningful) over `samples`.
  virtual EvalResult evaluate(std::span<const SampleRef> samples, std::size_t eval_batch) = 0;
};

struct FitResult {
  std::vector<EpochLog> log;
  std::vector<double> epoch_seconds;  // wall time of each epoch's training pass
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t optimizer_steps = 0;
  std::size_t trainable = 0;
};

using ParamSnapshot = std::vector<std::vector<double>>;

inline ParamSnapshot snapshot(const Model& model) {
  ParamSnapshot s;
  for (const auto& p : model.parameters()) s.push_back(p.tensor.values());
  return s;
}

inline void restore(Model& model, const ParamSnapshot& s) {
  auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.mutable_values() = s[i];
}

inline double checksum(const Model& model, bool frozen_only) {
  double acc = 0.0;
  std::size_t k = 0;
  for (const auto& p : model.parameters()) {
    if (frozen_only && p.tensor.requires_grad()) continue;
    for (double v : p.tensor.values()) acc += v * static_cast<double>(1 + (k++ % 7));
  }
  return acc;
}

namespace detail {

inline std::vector<SampleRef> all_refs(const Objective& obj, Split split) {
  std::vector<SampleRef> out(obj.size(split));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {split, static_cast<std::uint32_t>(i)};
  return out;
}

// Deterministic subset used for validation when max_val_windows caps it.
inline std::vector<SampleRef> capped(std::vector<SampleRef> refs, std::size_t cap, std::uint64_t seed) {
  if (cap == 0 || refs.size() <= cap) return refs;
  Rng rng = substream({seed, salt::kSplit, 0x7a1});
  std::shuffle(refs.begin(), refs.end(), rng);
  refs.resize(cap);
  std::sort(refs.begin(), refs.end(), [](const SampleRef& a, const SampleRef& b) { return a.index < b.index; });
  return refs;
}

}  // namespace detail

// Staged schedule: for each stage learning rate, train epochs_per_stage
// epochs keeping the weights with the lowest validation loss and restore
// them before the next stage; then train on train+val at final_lr until the
// training loss stops improving for final_patience epochs.
inline FitResult fit(Model& model, Objective& obj, const TrainConfig& config) {
  config.validate();
  FitResult result;
  std::vector<Tensor> trainable;
  for (auto& p : model.parameters())
    if (p.tensor.requires_grad()) trainable.push_back(p.tensor);
  for (const auto& t : trainable) result.trainable += t.size();
  if (obj.size(Split::Train) == 0) throw TrainingError("fit: empty training split");
  if (trainable.empty()) return result;

  Rng shuffle_rng = substream({config.seed, salt::kShuffle});
  Rng dropout_rng = substream({config.seed, salt::kDropout});
  const std::vector<SampleRef> train_refs = detail::all_refs(obj, Split::Train);
  const std::vector<SampleRef> val_refs =
      detail::capped(detail::all_refs(obj, Split::Val), config.max_val_windows, config.seed);
  const double frozen_sum = checksum(model, true);

  auto run_epoch = [&](std::vector<SampleRef> pool, AdamOptimizer& opt, double lr) {
    std::shuffle(pool.begin(), pool.end(), shuffle_rng);
    if (config.max_windows_per_epoch > 0 && pool.size() > config.max_windows_per_epoch)
      pool.resize(config.max_windows_per_epoch);
    double weighted = 0.0;
    for (std::size_t start = 0; start < pool.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, pool.size() - start);
      opt.zero_grad();
      Tensor loss = obj.batch_loss(std::span<const SampleRef>(pool).subspan(start, n), true, dropout_rng);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw TrainingError("fit: non-finite loss " + std::to_string(value) + " at step " +
                            std::to_string(result.optimizer_steps) + " (lr " + std::to_string(lr) + ")");
      backward(loss);
      opt.step(lr);
      ++result.optimizer_steps;
      weighted += value * static_cast<double>(n);
    }
    if (checksum(model, true) != frozen_sum) throw TrainingError("fit: a frozen tensor was modified");
    return weighted / static_cast<double>(pool.size());
  };
  auto timed_epoch = [&](const std::vector<SampleRef>& pool, AdamOptimizer& opt, double lr) {
    const auto t0 = std::chrono::steady_clock::now();
    const double loss = run_epoch(pool, opt, lr);
    result.epoch_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return loss;
  };

  ParamSnapshot best = snapshot(model);
  for (std::size_t s = 0; s < config.stage_lrs.size(); ++s) {
    const double lr = config.stage_lrs[s];
    AdamOptimizer opt(trainable);
    for (std::size_t e = 0; e < config.epochs_per_stage; ++e) {
      EpochLog rec;
      rec.phase = "stage" + std::to_string(s);
      rec.epoch = e;
      rec.lr = lr;
      rec.train_loss = timed_epoch(train_refs, opt, lr);
      EvalResult ev{rec.train_loss, std::numeric_limits<double>::quiet_NaN()};
      if (!val_refs.empty()) ev = obj.evaluate(val_refs, config.eval_batch_size);
      rec.val_loss = ev.loss;
      rec.val_mape = ev.mape;
      if (!std::isfinite(rec.val_loss)) throw TrainingError("fit: non-finite validation loss");
      if (rec.val_loss < result.best_val_loss) {
        result.best_val_loss = rec.val_loss;
        best = snapshot(model);
        rec.improved = true;
      }
      result.log.push_back(rec);
    }
    restore(model, best);
  }

  std::vector<SampleRef> everything = train_refs;
  {
    const auto full_val = detail::all_refs(obj, Split::Val);
    everything.insert(everything.end(), full_val.begin(), full_val.end());
  }
  AdamOptimizer opt(trainable);
  double best_train = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t e = 0; e < config.final_max_epochs && stale < config.final_patience; ++e) {
    EpochLog rec;
    rec.phase = "final";
    rec.epoch = e;
    rec.lr = config.final_lr;
    rec.train_loss = timed_epoch(everything, opt, config.final_lr);
    if (rec.train_loss < best_train * (1.0 - config.min_delta_rel)) {
      best_train = rec.train_loss;
      stale = 0;
      rec.improved = true;
    } else {
      ++stale;
    }
    result.log.push_back(rec);
  }
  return result;
}

// Per-gauge standardization statistics.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;

  static Normalizer fit(std::span<const StrainSequence> sequences) {
    if (sequences.empty()) throw DataError("normalizer: no sequences");
    const std::size_t n_g = sequences[0].n_gauges;
    Normalizer out;
    out.mean.assign(n_g, 0.0);
    out.std.assign(n_g, 0.0);
    std::size_t count = 0;
    for (const auto& s : sequences) {
      for (std::size_t t = 0; t < s.length(); ++t)
        for (std::size_t g = 0; g < n_g; ++g) out.mean[g] += s.at(t, g);
      count += s.length();
    }
    for (double& m : out.mean) m /= static_cast<double>(count);
    for (const auto& s : sequences)
      for (std::size_t t = 0; t < s.length(); ++t)
        for (std::size_t g = 0; g < n_g; ++g) out.std[g] += (s.at(t, g) - out.mean[g]) * (s.at(t, g) - out.mean[g]);
    for (double& v : out.std) {
      v = std::sqrt(v / static_cast<double>(count));
      if (!(v > 0)) throw DataError("normalizer: a gauge has zero variance");
    }
    return out;
  }

  StrainSequence apply(const StrainSequence& s) const {
    if (s.n_gauges != mean.size())
      throw ShapeError("normalizer: sequence has " + std::to_string(s.n_gauges) + " gauges, expected " +
                       std::to_string(mean.size()));
    StrainSequence out = s;
    for (std::size_t t = 0; t < s.length(); ++t)
      for (std::size_t g = 0; g < s.n_gauges; ++g)
        out.measurements[t * s.n_gauges + g] = (s.at(t, g) - mean[g]) / std[g];
    return out;
  }
};

struct WindowRef {
  std::uint32_t seq = 0;
  std::uint32_t t = 0;  // 1-based end index
};

inline std::vector<WindowRef> window_refs(std::span<const StrainSequence> seqs, std::size_t h, const TaskSpec& task) {
  std::vector<WindowRef> out;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const WindowRange r = window_range(seqs[i].length(), h, task);
    for (std::size_t k = 0; k < r.count; ++k)
      out.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(r.first + k)});
  }
  return out;
}

// Gathers windows into a time-major (h * batch x n_g) tensor.
inline Tensor gather_inputs(std::span<const StrainSequence> seqs, std::span<const WindowRef> refs, std::size_t h) {
  const std::size_t B = refs.size();
  const std::size_t n_g = seqs[refs[0].seq].n_gauges;
  std::vector<double> v(h * B * n_g);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = seqs[refs[b].seq];
    const std::size_t start = refs[b].t - h;
    for (std::size_t k = 0; k < h; ++k)
      for (std::size_t g = 0; g < n_g; ++g) v[(k * B + b) * n_g + g] = s.at(start + k, g);
  }
  return Tensor::from({h * B, n_g}, std::move(v));
}

// Self-supervised objective over normalized unlabelled sequences.
class PretextObjective : public Objective {
 public:
  PretextObjective(const Model& model, TaskSpec task, std::vector<StrainSequence> train, std::vector<StrainSequence> val)
      : model_(model), task_(task), h_(model.spec().h), train_(std::move(train)), val_(std::move(val)) {
    train_refs_ = window_refs(train_, h_, task_);
    val_refs_ = window_refs(val_, h_, task_);
  }

  std::size_t size(Split s) const override { return s == Split::Train ? train_refs_.size() : val_refs_.size(); }

  Tensor batch_loss(std::span<const SampleRef> batch, bool training, Rng& rng) override {
    auto [x, y] = assemble(batch);
    return mse_loss(model_.forward(x, batch.size(), training, rng), y);
  }

  EvalResult evaluate(std::span<const SampleRef> samples, std::size_t eval_batch) override {
    NoGradGuard ng;
    Rng unused(0);
    double sq = 0.0;
    std::size_t n = 0;
    std::vector<double> preds;
    std::vector<double> targets;
    for (std::size_t start = 0; start < samples.size(); start += eval_batch) {
      const auto chunk = samples.subspan(start, std::min(eval_batch, samples.size() - start));
      auto [x, y] = assemble(chunk);
      const Tensor p = model_.forward(x, chunk.size(), false, unused);
      sq += mse(p, y).item() * static_cast<double>(y.size());
      n += y.size();
      preds.insert(preds.end(), p.values().begin(), p.values().end());
      targets.insert(targets.end(), y.values().begin(), y.values().end());
    }
    return {sq / static_cast<double>(n), mape(preds, targets).value};
  }

  const std::vector<StrainSequence>& train_sequences() const { return train_; }

 private:
  std::pair<Tensor, Tensor> assemble(std::span<const SampleRef> batch) const {
    std::vector<WindowRef> refs;
    refs.reserve(batch.size());
    // Batches may mix splits during the final stage.
    std::vector<const StrainSequence*> owners;
    owners.reserve(batch.size());
    for (const auto& r : batch) {
      const auto& table = r.split == Split::Train ? train_refs_ : val_refs_;
      refs.push_back(table[r.index]);
      owners.push_back(r.split == Split::Train ? &train_[table[r.index].seq] : &val_[table[r.index].seq]);
    }
    const std::size_t B = batch.size();
    const std::size_t n_g = owners[0]->n_gauges;
    std::vector<double> x(h_ * B * n_g);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t start = refs[b].t - h_;
      for (std::size_t k = 0; k < h_; ++k)
        for (std::size_t g = 0; g < n_g; ++g) x[(k * B + b) * n_g + g] = owners[b]->at(start + k, g);
    }
    Tensor input = Tensor::from({h_ * B, n_g}, x);
    switch (task_.kind) {
      case Task::AE:
        return {input, Tensor::from({h_ * B, n_g}, std::move(x))};
      case Task::AR:
      case Task::MSPA: {
        const std::size_t q = task_.kind == Task::AR ? 1 : task_.q;
        std::vector<double> y(B * q * n_g);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t j = 0; j < q; ++j)
            for (std::size_t g = 0; g < n_g; ++g) y[(b * q + j) * n_g + g] = owners[b]->at(refs[b].t + j, g);
        return {input, Tensor::from({B, q * n_g}, std::move(y))};
      }
      case Task::RUL:
        break;
    }
    throw ConfigError("pretext objective cannot train the RUL task");
  }

  const Model& model_;
  TaskSpec task_;
  std::size_t h_;
  std::vector<StrainSequence> train_;
  std::vector<StrainSequence> val_;
  std::vector<WindowRef> train_refs_;
  std::vector<WindowRef> val_refs_;
};

// RUL regression over labelled sequences. Targets are divided by
// `rul_scale`. With a fully frozen backbone the representations z are
// computed once in evaluation mode and reused every epoch.
class RulObjective : public Objective {
 public:
  RulObjective(const Model& model, std::vector<StrainSequence> train, std::vector<StrainSequence> val,
               std::int64_t delta_k, double rul_scale, bool cache_backbone)
      : model_(model), h_(model.spec().h), delta_k_(delta_k), scale_(rul_scale), train_(std::move(train)),
        val_(std::move(val)) {
    const TaskSpec task{Task::RUL, 1};
    refs_[0] = window_refs(train_, h_, task);
    refs_[1] = window_refs(val_, h_, task);
    if (cache_backbone) build_cache();
  }

  std::size_t size(Split s) const override { return refs_[idx(s)].size(); }

  Tensor batch_loss(std::span<const SampleRef> batch, bool training, Rng& rng) override {
    return mse_loss(predict_scaled(batch, training, rng), targets(batch));
  }

  EvalResult evaluate(std::span<const SampleRef> samples, std::size_t eval_batch) override {
    NoGradGuard ng;
    Rng unused(0);
    double sq = 0.0;
    std::vector<double> preds;
    std::vector<double> truth;
    for (std::size_t start = 0; start < samples.size(); start += eval_batch) {
      const auto chunk = samples.subspan(start, std::min(eval_batch, samples.size() - start));
      const Tensor p = predict_scaled(chunk, false, unused);
      const Tensor y = targets(chunk);
      sq += mse(p, y).item() * static_cast<double>(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) {
        preds.push_back(p.values()[i] * scale_);
        truth.push_back(y.values()[i] * scale_);
      }
    }
    return {sq / static_cast<double>(samples.size()), mape(preds, truth).value};
  }

  bool cached() const { return !cache_[0].empty() || !cache_[1].empty(); }

 private:
  static std::size_t idx(Split s) { return s == Split::Train ? 0 : 1; }
  const std::vector<StrainSequence>& seqs(Split s) const { return s == Split::Train ? train_ : val_; }

  Tensor inputs(std::span<const SampleRef> batch) const {
    const std::size_t B = batch.size();
    const std::size_t n_g = model_.spec().n_g;
    std::vector<double> x(h_ * B * n_g);
    for (std::size_t b = 0; b < B; ++b) {
      const WindowRef& r = refs_[idx(batch[b].split)][batch[b].index];
      const auto& s = seqs(batch[b].split)[r.seq];
      const std::size_t start = r.t - h_;
      for (std::size_t k = 0; k < h_; ++k)
        for (std::size_t g = 0; g < n_g; ++g) x[(k * B + b) * n_g + g] = s.at(start + k, g);
    }
    return Tensor::from({h_ * B, n_g}, std::move(x));
  }

  Tensor targets(std::span<const SampleRef> batch) const {
    std::vector<double> y(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const WindowRef& r = refs_[idx(batch[b].split)][batch[b].index];
      y[b] = rul_target(seqs(batch[b].split)[r.seq], delta_k_, r.t) / scale_;
    }
    return Tensor::from({batch.size(), 1}, std::move(y));
  }

  Tensor predict_scaled(std::span<const SampleRef> batch, bool training, Rng& rng) const {
    if (!cached()) return model_.forward(inputs(batch), batch.size(), training, rng);
    const std::size_t B = batch.size();
    const std::size_t H = model_.spec().hidden;
    std::vector<double> z(h_ * B * H);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& src = cache_[idx(batch[b].split)];
      const double* zs = src.data() + static_cast<std::size_t>(batch[b].index) * h_ * H;
      for (std::size_t k = 0; k < h_; ++k) std::copy_n(zs + k * H, H, z.data() + (k * B + b) * H);
    }
    return model_.head(Tensor::from({h_ * B, H}, std::move(z)), B, training, rng);
  }

  void build_cache() {
    NoGradGuard ng;
    Rng unused(0);
    const std::size_t H = model_.spec().hidden;
    constexpr std::size_t kChunk = 256;
    for (Split s : {Split::Train, Split::Val}) {
      auto& dst = cache_[idx(s)];
      const std::size_t n = refs_[idx(s)].size();
      dst.assign(n * h_ * H, 0.0);
      for (std::size_t start = 0; start < n; start += kChunk) {
        const std::size_t B = std::min(kChunk, n - start);
        std::vector<SampleRef> batch(B);
        for (std::size_t b = 0; b < B; ++b) batch[b] = {s, static_cast<std::uint32_t>(start + b)};
        const Tensor z = model_.embed(inputs(batch), B, false, unused);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t k = 0; k < h_; ++k)
            std::copy_n(z.values().data() + (k * B + b) * H, H, dst.data() + ((start + b) * h_ + k) * H);
      }
    }
  }

  const Model& model_;
  std::size_t h_;
  std::int64_t delta_k_;
  double scale_;
  std::vector<StrainSequence> train_;
  std::vector<StrainSequence> val_;
  std::vector<WindowRef> refs_[2];
  std::vector<double> cache_[2];
};

}  // namespace sslrul
