#pragma once

// Pre-training and fine-tuning drivers producing checkpoints.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "sslrul/checkpoint.hpp"
#include "sslrul/error.hpp"
#include "sslrul/fatigue_sim.hpp"
#include "sslrul/nn.hpp"
#include "sslrul/rng.hpp"
#include "sslrul/training.hpp"

namespace sslrul {

// Structure-level split; no structure contributes windows to both sides.
struct StructureSplit {
  std::vector<StrainSequence> train;
  std::vector<StrainSequence> val;
};

inline StructureSplit split_structures(std::span<const StrainSequence> seqs, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = substream({seed, salt::kSplit});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = 0;
  if (val_fraction > 0 && seqs.size() >= 2)
    n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(seqs.size()))),
                                    1, seqs.size() - 1);
  std::vector<bool> is_val(seqs.size(), false);
  for (std::size_t k = 0; k < n_val; ++k) is_val[order[k]] = true;
  StructureSplit out;
  for (std::size_t i = 0; i < seqs.size(); ++i) (is_val[i] ? out.val : out.train).push_back(seqs[i]);
  return out;
}

inline std::vector<StrainSequence> normalize_all(const Normalizer& norm, std::span<const StrainSequence> seqs) {
  std::vector<StrainSequence> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(norm.apply(s));
  return out;
}

struct PretrainOptions {
  Pretext pretext = Pretext::AR;
  std::size_t q = 1;
  TrainConfig train = TrainConfig::pretrain_defaults();
  std::optional<ModelSpec> spec;  // overrides the default pretext architecture
};

struct TrainingRun {
  Checkpoint checkpoint;
  FitResult fit;
};

inline TrainingRun pretrain(std::span<const StrainSequence> unlabelled, std::size_t h, const PretrainOptions& opt) {
  if (opt.pretext == Pretext::None) throw ConfigError("pretrain: pretext task must be ae, ar or mspa");
  if (unlabelled.empty()) throw DataError("pretrain: no unlabelled structures");
  const TaskSpec task = pretext_task(opt.pretext, opt.q);
  ModelSpec spec = opt.spec ? *opt.spec
                            : ModelSpec::pretext(task.kind == Task::AE   ? ModelKind::AE
                                                 : task.kind == Task::AR ? ModelKind::AR
                                                                         : ModelKind::MSPA,
                                                 opt.q);
  spec.h = h;
  spec.n_g = unlabelled[0].n_gauges;
  spec.validate();

  StructureSplit split = split_structures(unlabelled, opt.train.val_fraction, opt.train.seed);
  const Normalizer norm = Normalizer::fit(split.train);
  Model model = init_params(spec, opt.train.seed);
  PretextObjective obj(model, task, normalize_all(norm, split.train), normalize_all(norm, split.val));
  if (obj.size(Split::Train) == 0)
    throw DataError("pretrain: no " + std::string(to_string(opt.pretext)) + " windows of length " +
                    std::to_string(h) + " fit in the training structures");

  TrainingRun run;
  run.fit = fit(model, obj, opt.train);
  run.checkpoint = Checkpoint::capture(model);
  run.checkpoint.pretext = opt.pretext;
  run.checkpoint.normalizer = norm;
  run.checkpoint.training_log = run.fit.log;
  run.checkpoint.provenance = {{"stage", "pretrain"},
                               {"task", to_string(opt.pretext)},
                               {"q", task.q},
                               {"n_structures", unlabelled.size()},
                               {"n_train", split.train.size()},
                               {"n_val", split.val.size()},
                               {"train_config", to_json(opt.train)}};
  return run;
}

struct FinetuneOptions {
  bool freeze = false;
  BackboneArch fresh_arch = BackboneArch::AR;  // used when there is no backbone
  TrainConfig train = TrainConfig::finetune_defaults();
  std::optional<ModelSpec> spec;  // overrides the fresh-model architecture
  bool cache_frozen = true;        // precompute frozen-backbone representations once
};

inline double mean_rul(std::span<const StrainSequence> seqs, std::size_t h, std::int64_t delta_k) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& s : seqs) {
    const WindowRange r = window_range(s.length(), h, {Task::RUL, 1});
    for (std::size_t t = r.first; t < r.first + r.count; ++t, ++n) acc += rul_target(s, delta_k, t);
  }
  if (n == 0) throw DataError("fine-tune: no labelled windows of length " + std::to_string(h));
  return acc / static_cast<double>(n);
}

// Fine-tunes a RUL model on labelled structures. With a backbone the
// embedding f and the encoder stack are copied from it (and frozen if
// requested); without one every tensor starts from fresh initialization.
// `train` and `val` are raw (un-normalized) labelled structures.
inline TrainingRun finetune(const Checkpoint* backbone, const StructureSplit& split, std::size_t h,
                            std::int64_t delta_k, const FinetuneOptions& opt) {
  if (split.train.empty()) throw DataError("fine-tune: no labelled training structures");
  for (const auto* part : {&split.train, &split.val})
    for (const auto& s : *part)
      if (!s.failure_cycles)
        throw DataError("fine-tune: structure " + s.id + " has no failure time (unlabelled data?)");
  if (!backbone && opt.freeze) throw ConfigError("fine-tune: --freeze needs a pre-trained backbone");
  if (backbone && backbone->spec.kind == ModelKind::FineTune)
    throw ConfigError("fine-tune: backbone checkpoint is already a fine-tuned model");

  ModelSpec spec;
  if (backbone) {
    spec = backbone->spec;
    spec.kind = ModelKind::FineTune;
    spec.q = 1;
    if (opt.spec) {
      spec.finetune_hidden = opt.spec->finetune_hidden;
      spec.finetune_layers = opt.spec->finetune_layers;
      spec.finetune_dropout = opt.spec->finetune_dropout;
    }
  } else {
    spec = opt.spec ? *opt.spec : ModelSpec::finetune(opt.fresh_arch);
    spec.kind = ModelKind::FineTune;
    spec.n_g = split.train[0].n_gauges;
  }
  if (spec.h != h) throw ConfigError("fine-tune: backbone expects h = " + std::to_string(spec.h) + ", got " +
                                     std::to_string(h));
  spec.validate();

  const Normalizer norm = backbone ? backbone->normalizer : Normalizer::fit(split.train);

  Model model = init_params(spec, opt.train.seed);
  FreezeMask inherited;
  if (backbone) {
    const Model source = backbone->to_model();
    inherited = model.load_matching(source, model.backbone_names());
    if (opt.freeze) model.apply_freeze(inherited);
  }

  const double scale = mean_rul(split.train, h, delta_k);
  RulObjective obj(model, normalize_all(norm, split.train), normalize_all(norm, split.val), delta_k, scale,
                   backbone && opt.freeze && opt.cache_frozen);

  TrainingRun run;
  run.fit = fit(model, obj, opt.train);
  run.checkpoint = Checkpoint::capture(model);
  run.checkpoint.pretext = backbone ? backbone->pretext : Pretext::None;
  run.checkpoint.normalizer = norm;
  run.checkpoint.rul_scale = scale;
  run.checkpoint.training_log = run.fit.log;
  run.checkpoint.provenance = {{"stage", "finetune"},
                               {"pretext", to_string(run.checkpoint.pretext)},
                               {"freeze", opt.freeze},
                               {"inherited", inherited},
                               {"n_train", split.train.size()},
                               {"n_val", split.val.size()},
                               {"train_config", to_json(opt.train)}};
  if (backbone) run.checkpoint.provenance["backbone"] = backbone->provenance;
  return run;
}

// Splits `labelled` by structure using opt.train.val_fraction.
inline TrainingRun finetune(const Checkpoint* backbone, std::span<const StrainSequence> labelled, std::size_t h,
                            std::int64_t delta_k, const FinetuneOptions& opt) {
  return finetune(backbone, split_structures(labelled, opt.train.val_fraction, opt.train.seed), h, delta_k, opt);
}

}  // namespace sslrul
