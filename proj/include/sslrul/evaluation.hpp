#pragma once

// Test protocol (one RUL prediction per test structure at a random t*),
// k-fold fine-tuning and the experiment grid.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "sslrul/checkpoint.hpp"
#include "sslrul/dataset_io.hpp"
#include "sslrul/error.hpp"
#include "sslrul/fatigue_sim.hpp"
#include "sslrul/pipeline.hpp"
#include "sslrul/rng.hpp"
#include "sslrul/training.hpp"

namespace sslrul {

struct TestProtocolConfig {
  std::size_t n_test_structures = 100;
  std::pair<double, double> t_star_range{0.33, 0.90};
  std::uint64_t seed = 0;

  void validate() const {
    const auto [lo, hi] = t_star_range;
    if (!(lo > 0 && lo <= hi && hi <= 1)) throw ConfigError("protocol: t_star_range must satisfy 0 < lo <= hi <= 1");
    if (n_test_structures == 0) throw ConfigError("protocol: n_test_structures must be >= 1");
  }
};

inline nlohmann::json to_json(const TestProtocolConfig& p) {
  return {{"schema_version", kSchemaVersion},
          {"n_test_structures", p.n_test_structures},
          {"t_star_range", {p.t_star_range.first, p.t_star_range.second}},
          {"seed", p.seed}};
}

inline TestProtocolConfig protocol_from_json(const nlohmann::json& j) {
  const std::string what = "protocol";
  require_known_keys(j, {"schema_version", "n_test_structures", "t_star_range", "seed"}, what);
  TestProtocolConfig p;
  read_optional(j, "n_test_structures", p.n_test_structures, what);
  if (j.contains("t_star_range")) {
    const auto& r = j.at("t_star_range");
    if (!r.is_array() || r.size() != 2) throw ConfigError(what + ": t_star_range must be [lo, hi]");
    p.t_star_range = {r[0].get<double>(), r[1].get<double>()};
  }
  read_optional(j, "seed", p.seed, what);
  p.validate();
  return p;
}

// t* = floor(u * L), u ~ U(range), clamped so that the window [t*-h+1, t*]
// lies inside the sequence. Returns a 1-based measurement index.
inline std::size_t sample_t_star(Rng& rng, std::size_t L, std::pair<double, double> range, std::size_t h) {
  if (L < h) throw DataError("sample_t_star: sequence of length " + std::to_string(L) + " is shorter than h");
  double u = range.first;
  if (range.second > range.first) u = std::uniform_real_distribution<double>(range.first, range.second)(rng);
  const auto t = static_cast<std::size_t>(std::floor(u * static_cast<double>(L) + 1e-9));
  return std::clamp<std::size_t>(t, h, L);
}

struct TestPoint {
  std::size_t structure = 0;  // index into the test set
  std::size_t t_star = 0;
  double true_rul = 0.0;
};

// Paired test points: structure i always draws from its own substream of
// the protocol seed, so every model sees the same (structure, t*) pairs.
inline std::vector<TestPoint> test_points(std::span<const StrainSequence> test, const TestProtocolConfig& protocol,
                                          std::size_t h, std::int64_t delta_k, std::size_t* skipped = nullptr) {
  protocol.validate();
  std::vector<TestPoint> out;
  std::size_t skip = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test[i].length() < h) {
      ++skip;
      continue;
    }
    Rng rng = substream({protocol.seed, salt::kProtocol, i});
    const std::size_t t = sample_t_star(rng, test[i].length(), protocol.t_star_range, h);
    out.push_back({i, t, rul_target(test[i], delta_k, t)});
  }
  if (skipped) *skipped = skip;
  return out;
}

using RulPredictor = std::function<std::vector<double>(std::span<const StrainSequence>, std::span<const TestPoint>)>;

inline MapeResult evaluate_points(std::span<const StrainSequence> test, std::span<const TestPoint> points,
                                  const RulPredictor& predict) {
  const std::vector<double> pred = predict(test, points);
  std::vector<double> truth;
  truth.reserve(points.size());
  for (const auto& p : points) truth.push_back(p.true_rul);
  return mape(pred, truth);
}

// Predicts RUL (in measurement steps) with a fine-tuned checkpoint.
inline std::vector<double> predict_rul(const Checkpoint& ckpt, std::span<const StrainSequence> test,
                                       std::span<const TestPoint> points, std::size_t batch = 256) {
  if (ckpt.spec.kind != ModelKind::FineTune)
    throw ConfigError("evaluate: checkpoint is a pretext model; fine-tune it first with `sslrul finetune`");
  const Model model = ckpt.to_model();
  const std::size_t h = ckpt.spec.h;
  const std::size_t n_g = ckpt.spec.n_g;
  NoGradGuard ng;
  Rng unused(0);
  std::vector<double> out;
  out.reserve(points.size());
  for (std::size_t start = 0; start < points.size(); start += batch) {
    const std::size_t B = std::min(batch, points.size() - start);
    std::vector<double> x(h * B * n_g);
    for (std::size_t b = 0; b < B; ++b) {
      const TestPoint& p = points[start + b];
      const StrainSequence& s = test[p.structure];
      if (s.n_gauges != n_g) throw ShapeError("evaluate: test data has " + std::to_string(s.n_gauges) + " gauges");
      for (std::size_t k = 0; k < h; ++k)
        for (std::size_t g = 0; g < n_g; ++g)
          x[(k * B + b) * n_g + g] = (s.at(p.t_star - h + k, g) - ckpt.normalizer.mean[g]) / ckpt.normalizer.std[g];
    }
    const Tensor y = model.forward(Tensor::from({h * B, n_g}, std::move(x)), B, false, unused);
    for (double v : y.values()) out.push_back(v * ckpt.rul_scale);
  }
  return out;
}

inline MapeResult evaluate_rul(const Checkpoint& ckpt, std::span<const StrainSequence> test,
                               const TestProtocolConfig& protocol, std::int64_t delta_k) {
  const auto points = test_points(test, protocol, ckpt.spec.h, delta_k);
  return evaluate_points(test, points, [&](auto seqs, auto pts) { return predict_rul(ckpt, seqs, pts); });
}

// Seeded shuffle of structure indices cut into k contiguous blocks.
inline std::vector<std::vector<std::size_t>> kfold_assignment(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold: k must be >= 2");
  if (n < k)
    throw ConfigError("k-fold: " + std::to_string(n) + " labelled structures cannot fill " + std::to_string(k) +
                      " folds; use k <= " + std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = substream({seed, salt::kFolds});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t lo = f * n / k;
    const std::size_t hi = (f + 1) * n / k;
    folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
    std::sort(folds[f].begin(), folds[f].end());
  }
  return folds;
}

inline StructureSplit fold_split(std::span<const StrainSequence> labelled,
                                 const std::vector<std::vector<std::size_t>>& folds, std::size_t fold) {
  StructureSplit out;
  std::vector<bool> is_val(labelled.size(), false);
  for (std::size_t i : folds.at(fold)) is_val[i] = true;
  for (std::size_t i = 0; i < labelled.size(); ++i) (is_val[i] ? out.val : out.train).push_back(labelled[i]);
  return out;
}

inline double sample_std(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

struct FoldOutcome {
  std::size_t fold = 0;
  double mape = 0.0;
  double wall_seconds = 0.0;
  double mean_epoch_seconds = 0.0;
  std::size_t trainable = 0;
};

struct CellKey {
  std::string task;  // ae, ar, mspa, none
  std::size_t n_u = 0;
  double d = 0.0;
  std::size_t q = 1;
  bool freeze = false;
  std::size_t n_l = 0;

  auto tie() const { return std::tie(task, n_u, d, q, freeze, n_l); }
  bool operator<(const CellKey& o) const { return tie() < o.tie(); }
  bool operator==(const CellKey& o) const { return tie() == o.tie(); }
};

struct MetricsReport {
  CellKey key;
  std::vector<FoldOutcome> folds;

  std::vector<double> fold_mapes() const {
    std::vector<double> v;
    for (const auto& f : folds) v.push_back(f.mape);
    return v;
  }
  double mean() const {
    const auto v = fold_mapes();
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }
  double std() const { return sample_std(fold_mapes()); }
};

struct KFoldOptions {
  std::size_t k = 5;
  std::uint64_t seed = 0;  // fold assignment and per-fold training seeds
  FinetuneOptions finetune;
  unsigned jobs = 1;
};

inline std::uint64_t fold_train_seed(std::uint64_t seed, std::size_t fold) {
  return seed * 1000003ULL + 7919ULL * (fold + 1);
}

// Trains and evaluates one fold; wall_seconds covers the fine-tune only.
inline FoldOutcome run_fold(const Checkpoint* backbone, std::span<const StrainSequence> labelled,
                            const std::vector<std::vector<std::size_t>>& folds, std::size_t fold,
                            std::span<const StrainSequence> test, std::span<const TestPoint> points, std::size_t h,
                            std::int64_t delta_k, const KFoldOptions& opt) {
  FinetuneOptions fo = opt.finetune;
  fo.train.seed = fold_train_seed(opt.seed, fold);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainingRun run = finetune(backbone, fold_split(labelled, folds, fold), h, delta_k, fo);
  FoldOutcome out;
  out.fold = fold;
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!run.fit.epoch_seconds.empty())
    out.mean_epoch_seconds = std::accumulate(run.fit.epoch_seconds.begin(), run.fit.epoch_seconds.end(), 0.0) /
                             static_cast<double>(run.fit.epoch_seconds.size());
  out.trainable = run.fit.trainable;
  out.mape = evaluate_points(test, points, [&](auto seqs, auto pts) {
               return predict_rul(run.checkpoint, seqs, pts);
             }).value;
  return out;
}

// Runs `n` independent jobs on up to `jobs` threads; the first exception is rethrown.
inline void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& body) {
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (unsigned j = 0; j < jobs; ++j)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline std::vector<FoldOutcome> kfold_runs(const Checkpoint* backbone, std::span<const StrainSequence> labelled,
                                           std::span<const StrainSequence> test, const TestProtocolConfig& protocol,
                                           std::size_t h, std::int64_t delta_k, const KFoldOptions& opt) {
  const auto folds = kfold_assignment(labelled.size(), opt.k, opt.seed);
  const auto points = test_points(test, protocol, h, delta_k);
  std::vector<FoldOutcome> out(opt.k);
  parallel_for(opt.k, opt.jobs, [&](std::size_t f) {
    out[f] = run_fold(backbone, labelled, folds, f, test, points, h, delta_k, opt);
  });
  return out;
}

struct GridSpec {
  std::uint64_t seed = 0;
  std::vector<std::string> tasks{"ar", "none"};
  std::size_t q = 1;  // MSPA horizon
  std::vector<double> d_values{0.9};
  std::vector<std::size_t> n_u{100, 500};
  std::vector<std::size_t> n_l{10, 50};
  std::vector<bool> freeze{true};
  std::size_t k = 5;
  std::size_t h = 30;
  TestProtocolConfig protocol;
  std::uint64_t test_seed_offset = 1000000;
  MaterialConfig material;
  TrainConfig pretrain = TrainConfig::pretrain_defaults();
  TrainConfig finetune = TrainConfig::finetune_defaults();

  void validate() const {
    if (tasks.empty() || n_l.empty()) throw ConfigError("grid: tasks and n_l must not be empty");
    bool pretrained = false;
    for (const auto& t : tasks) {
      if (t != "none") pretrained = true;
      if (t != "none") pretext_task(pretext_from_string(t), q);
    }
    if (pretrained && (d_values.empty() || n_u.empty() || freeze.empty()))
      throw ConfigError("grid: pre-trained tasks need d_values, n_u and freeze");
    for (double d : d_values)
      if (!(d > 0 && d <= 1)) throw ConfigError("grid: d values must lie in (0, 1]");
    for (std::size_t n : n_u)
      if (n == 0) throw ConfigError("grid: n_u values must be >= 1");
    for (std::size_t n : n_l)
      if (n < k) throw ConfigError("grid: N_L = " + std::to_string(n) + " is smaller than k = " + std::to_string(k));
    if (test_seed_offset == 0) throw ConfigError("grid: test_seed_offset must be nonzero");
    protocol.validate();
    material.validate();
    pretrain.validate();
    finetune.validate();
  }
};

inline nlohmann::json to_json(const GridSpec& g) {
  return {{"schema_version", kSchemaVersion},
          {"seed", g.seed},
          {"tasks", g.tasks},
          {"q", g.q},
          {"d_values", g.d_values},
          {"n_u", g.n_u},
          {"n_l", g.n_l},
          {"freeze", g.freeze},
          {"k", g.k},
          {"h", g.h},
          {"protocol", to_json(g.protocol)},
          {"test_seed_offset", g.test_seed_offset},
          {"material", to_json(g.material)},
          {"pretrain", to_json(g.pretrain)},
          {"finetune", to_json(g.finetune)}};
}

inline GridSpec grid_from_json(const nlohmann::json& j) {
  const std::string what = "grid";
  require_known_keys(j,
                     {"schema_version", "seed", "tasks", "q", "d_values", "n_u", "n_l", "freeze", "k", "h",
                      "protocol", "test_seed_offset", "material", "pretrain", "finetune"},
                     what);
  int version = kSchemaVersion;
  read_optional(j, "schema_version", version, what);
  if (version != kSchemaVersion) throw ConfigError(what + ": unsupported schema_version " + std::to_string(version));
  GridSpec g;
  read_optional(j, "seed", g.seed, what);
  read_optional(j, "tasks", g.tasks, what);
  read_optional(j, "q", g.q, what);
  read_optional(j, "d_values", g.d_values, what);
  read_optional(j, "n_u", g.n_u, what);
  read_optional(j, "n_l", g.n_l, what);
  read_optional(j, "freeze", g.freeze, what);
  read_optional(j, "k", g.k, what);
  read_optional(j, "h", g.h, what);
  read_optional(j, "test_seed_offset", g.test_seed_offset, what);
  g.protocol.seed = g.seed;
  if (j.contains("protocol")) g.protocol = protocol_from_json(j.at("protocol"));
  if (j.contains("material")) g.material = material_config_from_json(j.at("material"));
  if (j.contains("pretrain")) g.pretrain = train_config_from_json(j.at("pretrain"), TrainConfig::pretrain_defaults());
  if (j.contains("finetune")) g.finetune = train_config_from_json(j.at("finetune"), TrainConfig::finetune_defaults());
  g.validate();
  return g;
}

struct GridResult {
  std::vector<MetricsReport> cells;  // deterministic order
  std::size_t test_points = 0;
  std::size_t test_skipped = 0;
};

using ProgressFn = std::function<void(const std::string&)>;

inline std::string task_column(const std::string& task) {
  std::string out = task;
  for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string results_csv(const GridResult& r) {
  std::string out = "task,N_U,d,q,freeze,N_L,fold,mape,wall_seconds\n";
  for (const auto& c : r.cells)
    for (const auto& f : c.folds)
      out += task_column(c.key.task) + "," + std::to_string(c.key.n_u) + "," + format_fixed(c.key.d, 2) + "," +
             std::to_string(c.key.q) + "," + (c.key.freeze ? "true" : "false") + "," + std::to_string(c.key.n_l) +
             "," + std::to_string(f.fold) + "," + format_fixed(f.mape) + "," + format_fixed(f.wall_seconds, 3) + "\n";
  return out;
}

inline std::string summary_csv(const GridResult& r) {
  std::string out = "task,N_U,d,q,freeze,N_L,folds,mape_mean,mape_std\n";
  for (const auto& c : r.cells)
    out += task_column(c.key.task) + "," + std::to_string(c.key.n_u) + "," + format_fixed(c.key.d, 2) + "," +
           std::to_string(c.key.q) + "," + (c.key.freeze ? "true" : "false") + "," + std::to_string(c.key.n_l) + "," +
           std::to_string(c.folds.size()) + "," + format_fixed(c.mean()) + "," + format_fixed(c.std()) + "\n";
  return out;
}

// Asserts that no test structure id occurs in a training or pre-training set.
inline void audit_disjoint(std::span<const StrainSequence> test, std::span<const StrainSequence> labelled,
                           std::span<const StrainSequence> unlabelled) {
  std::set<std::string> seen;
  for (const auto& s : labelled) seen.insert(s.id);
  for (const auto& s : unlabelled) seen.insert(s.id);
  for (const auto& s : test)
    if (seen.count(s.id)) throw DataError("test structure " + s.id + " also appears in training data");
}

// Datasets come from the grid seed S: unlabelled and labelled training
// structures use seed S, test structures S + test_seed_offset. Smaller
// N_U / N_L values take prefixes of the largest set. One backbone is
// pre-trained per (task, d, N_U) and shared by every N_L, fold and freeze
// setting; "none" cells fine-tune a freshly initialized AR-architecture model.
inline GridResult run_experiment_grid(const GridSpec& grid, unsigned jobs = 1, const ProgressFn& progress = {}) {
  grid.validate();
  std::mutex say_mutex;
  auto say = [&](const std::string& msg) {
    std::lock_guard lock(say_mutex);
    if (progress) progress(msg);
  };
  const std::size_t max_nl = *std::max_element(grid.n_l.begin(), grid.n_l.end());
  const std::size_t max_nu = grid.n_u.empty() ? 0 : *std::max_element(grid.n_u.begin(), grid.n_u.end());

  say("generating " + std::to_string(max_nl) + " labelled and " + std::to_string(grid.protocol.n_test_structures) +
      " test structures");
  const Dataset labelled = generate_dataset(grid.material, max_nl, DatasetKind::Labelled, 1.0, grid.seed, grid.h, jobs);
  const Dataset test = generate_dataset(grid.material, grid.protocol.n_test_structures, DatasetKind::Labelled, 1.0,
                                        grid.seed + grid.test_seed_offset, grid.h, jobs);
  const std::int64_t delta_k = grid.material.delta_k;

  bool any_pretrained = false;
  for (const auto& t : grid.tasks) any_pretrained = any_pretrained || t != "none";
  std::map<double, Dataset> unlabelled;
  if (any_pretrained)
    for (double d : grid.d_values) {
      say("generating " + std::to_string(max_nu) + " unlabelled structures at d = " + format_fixed(d, 2));
      unlabelled.emplace(d, generate_dataset(grid.material, max_nu, DatasetKind::Unlabelled, d, grid.seed, grid.h, jobs));
    }
  for (const auto& [d, ds] : unlabelled) audit_disjoint(test.structures, labelled.structures, ds.structures);
  if (unlabelled.empty()) audit_disjoint(test.structures, labelled.structures, {});

  GridResult result;
  const auto points = test_points(test.structures, grid.protocol, grid.h, delta_k, &result.test_skipped);
  result.test_points = points.size();
  if (points.empty()) throw DataError("grid: no usable test structures");

  // Pre-training jobs.
  struct PretrainJob {
    std::string task;
    double d;
    std::size_t n_u;
    Checkpoint ckpt;
  };
  std::vector<PretrainJob> pre;
  for (const auto& task : grid.tasks) {
    if (task == "none") continue;
    for (double d : grid.d_values)
      for (std::size_t n : grid.n_u) pre.push_back({task, d, n, {}});
  }
  parallel_for(pre.size(), jobs, [&](std::size_t i) {
    auto& job = pre[i];
    const auto& all = unlabelled.at(job.d).structures;
    std::vector<StrainSequence> subset;
    for (const auto& s : all) {
      const auto idx = static_cast<std::size_t>(std::stoull(s.id.substr(s.id.find('-') + 1)));
      if (idx < job.n_u) subset.push_back(s);
    }
    PretrainOptions po;
    po.pretext = pretext_from_string(job.task);
    po.q = grid.q;
    po.train = grid.pretrain;
    po.train.seed = grid.seed;
    say("pretrain " + job.task + " d=" + format_fixed(job.d, 2) + " N_U=" + std::to_string(job.n_u) + " (" +
        std::to_string(subset.size()) + " usable structures)");
    job.ckpt = pretrain(subset, grid.h, po).checkpoint;
  });

  // Fine-tune jobs: one per (cell, fold).
  std::vector<MetricsReport> cells;
  std::vector<const Checkpoint*> backbones;
  for (const auto& task : grid.tasks) {
    if (task == "none") {
      for (std::size_t nl : grid.n_l) {
        cells.push_back({{task, 0, 0.0, 1, false, nl}, {}});
        backbones.push_back(nullptr);
      }
      continue;
    }
    for (const auto& job : pre) {
      if (job.task != task) continue;
      for (bool fr : grid.freeze)
        for (std::size_t nl : grid.n_l) {
          cells.push_back({{task, job.n_u, job.d, task == "mspa" ? grid.q : 1, fr, nl}, {}});
          backbones.push_back(&job.ckpt);
        }
    }
  }
  std::map<std::size_t, std::vector<std::vector<std::size_t>>> folds_by_nl;
  for (std::size_t nl : grid.n_l) folds_by_nl[nl] = kfold_assignment(nl, grid.k, grid.seed);

  for (auto& c : cells) c.folds.resize(grid.k);
  parallel_for(cells.size() * grid.k, jobs, [&](std::size_t i) {
    const std::size_t ci = i / grid.k;
    const std::size_t f = i % grid.k;
    auto& cell = cells[ci];
    const std::span<const StrainSequence> subset(labelled.structures.data(), cell.key.n_l);
    KFoldOptions ko;
    ko.k = grid.k;
    ko.seed = grid.seed;
    ko.finetune.freeze = cell.key.freeze;
    ko.finetune.train = grid.finetune;
    cell.folds[f] = run_fold(backbones[ci], subset, folds_by_nl.at(cell.key.n_l), f, test.structures, points, grid.h,
                             delta_k, ko);
    say("finetune " + cell.key.task + " N_U=" + std::to_string(cell.key.n_u) + " d=" + format_fixed(cell.key.d, 2) +
        " freeze=" + (cell.key.freeze ? "true" : "false") + " N_L=" + std::to_string(cell.key.n_l) + " fold " +
        std::to_string(f) + ": MAPE " + format_fixed(cell.folds[f].mape, 2) + "%");
  });
  result.cells = std::move(cells);
  return result;
}

}  // namespace sslrul
