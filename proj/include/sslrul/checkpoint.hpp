#pragma once

// Checkpoint directory layout:
//   DIR/manifest.json  spec, tensor table, normalizer, freeze mask, log, provenance
//   DIR/params.bin     little-endian float32 values concatenated in table order

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sslrul/dataset_io.hpp"
#include "sslrul/error.hpp"
#include "sslrul/nn.hpp"
#include "sslrul/training.hpp"

namespace sslrul {

static_assert(std::endian::native == std::endian::little, "params.bin is written in native little-endian order");

enum class Pretext { None, AE, AR, MSPA };

inline const char* to_string(Pretext p) {
  switch (p) {
    case Pretext::None: return "none";
    case Pretext::AE: return "ae";
    case Pretext::AR: return "ar";
    case Pretext::MSPA: return "mspa";
  }
  return "?";
}

inline Pretext pretext_from_string(const std::string& s) {
  if (s == "none") return Pretext::None;
  if (s == "ae") return Pretext::AE;
  if (s == "ar") return Pretext::AR;
  if (s == "mspa") return Pretext::MSPA;
  throw ConfigError("unknown pretext task '" + s + "' (expected ae, ar, mspa or none)");
}

inline TaskSpec pretext_task(Pretext p, std::size_t q) {
  switch (p) {
    case Pretext::AE: return {Task::AE, 1};
    case Pretext::AR: return {Task::AR, 1};
    case Pretext::MSPA: return {Task::MSPA, q};
    case Pretext::None: break;
  }
  throw ConfigError("no pretext task for 'none'");
}

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelSpec spec;
  Pretext pretext = Pretext::None;  // pretext the backbone was trained with
  std::vector<StoredTensor> tensors;
  Normalizer normalizer;
  FreezeMask frozen;
  double rul_scale = 1.0;  // FineTune outputs are RUL / rul_scale
  std::vector<EpochLog> training_log;
  nlohmann::json provenance = nlohmann::json::object();

  static Checkpoint capture(const Model& model) {
    Checkpoint c;
    c.spec = model.spec();
    for (const auto& p : model.parameters()) {
      StoredTensor t{p.name, p.tensor.shape(), {}};
      t.values.reserve(p.tensor.size());
      for (double v : p.tensor.values()) t.values.push_back(static_cast<float>(v));
      c.tensors.push_back(std::move(t));
      if (!p.tensor.requires_grad()) c.frozen.insert(p.name);
    }
    return c;
  }

  Model to_model() const {
    Rng unused(0);
    Model m(spec, unused);
    for (const auto& t : tensors) {
      Tensor& dst = m.parameter(t.name);
      if (!(dst.shape() == t.shape))
        throw DataError("checkpoint tensor '" + t.name + "' has shape " + t.shape.str() + ", model expects " +
                        dst.shape().str());
      auto& v = dst.mutable_values();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(t.values[i]);
    }
    if (tensors.size() != m.parameters().size()) throw DataError("checkpoint does not cover every model tensor");
    m.apply_freeze(frozen);
    return m;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.values.size();
    return n;
  }
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors)
      if (!frozen.count(t.name)) n += t.values.size();
    return n;
  }
};

namespace detail {

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
inline double number_or_nan(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace detail

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"kind", to_string(s.kind)},
          {"backbone", to_string(s.backbone)},
          {"n_g", s.n_g},
          {"h", s.h},
          {"embed_dim", s.embed_dim},
          {"encoder_layers", s.encoder_layers},
          {"backbone_layers", s.backbone_layers},
          {"hidden", s.hidden},
          {"dropout", s.dropout},
          {"q", s.q},
          {"finetune_hidden", s.finetune_hidden},
          {"finetune_layers", s.finetune_layers},
          {"finetune_dropout", s.finetune_dropout}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"kind", "backbone", "n_g", "h", "embed_dim", "encoder_layers", "backbone_layers", "hidden",
                      "dropout", "q", "finetune_hidden", "finetune_layers", "finetune_dropout"},
                     "model spec");
  ModelSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "AE") s.kind = ModelKind::AE;
  else if (kind == "AR") s.kind = ModelKind::AR;
  else if (kind == "MSPA") s.kind = ModelKind::MSPA;
  else if (kind == "FineTune") s.kind = ModelKind::FineTune;
  else throw ConfigError("model spec: unknown kind '" + kind + "'");
  s.backbone = j.at("backbone").get<std::string>() == "AE" ? BackboneArch::AE : BackboneArch::AR;
  s.n_g = j.at("n_g").get<std::size_t>();
  s.h = j.at("h").get<std::size_t>();
  s.embed_dim = j.at("embed_dim").get<std::size_t>();
  s.encoder_layers = j.at("encoder_layers").get<std::size_t>();
  s.backbone_layers = j.at("backbone_layers").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::size_t>();
  s.dropout = j.at("dropout").get<double>();
  s.q = j.at("q").get<std::size_t>();
  s.finetune_hidden = j.at("finetune_hidden").get<std::size_t>();
  s.finetune_layers = j.at("finetune_layers").get<std::size_t>();
  s.finetune_dropout = j.at("finetune_dropout").get<double>();
  s.validate();
  return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"schema_version", kSchemaVersion},
          {"stage_lrs", c.stage_lrs},
          {"final_lr", c.final_lr},
          {"epochs_per_stage", c.epochs_per_stage},
          {"final_patience", c.final_patience},
          {"final_max_epochs", c.final_max_epochs},
          {"min_delta_rel", c.min_delta_rel},
          {"batch_size", c.batch_size},
          {"val_fraction", c.val_fraction},
          {"max_windows_per_epoch", c.max_windows_per_epoch},
          {"max_val_windows", c.max_val_windows},
          {"eval_batch_size", c.eval_batch_size},
          {"seed", c.seed}};
}

// Starts from `base` and overrides the keys present in `j`.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  const std::string what = "train config";
  require_known_keys(j,
                     {"schema_version", "stage_lrs", "final_lr", "epochs_per_stage", "final_patience",
                      "final_max_epochs", "min_delta_rel", "batch_size", "val_fraction", "max_windows_per_epoch",
                      "max_val_windows", "eval_batch_size", "seed"},
                     what);
  int version = kSchemaVersion;
  read_optional(j, "schema_version", version, what);
  if (version != kSchemaVersion) throw ConfigError(what + ": unsupported schema_version " + std::to_string(version));
  read_optional(j, "stage_lrs", base.stage_lrs, what);
  read_optional(j, "final_lr", base.final_lr, what);
  read_optional(j, "epochs_per_stage", base.epochs_per_stage, what);
  read_optional(j, "final_patience", base.final_patience, what);
  read_optional(j, "final_max_epochs", base.final_max_epochs, what);
  read_optional(j, "min_delta_rel", base.min_delta_rel, what);
  read_optional(j, "batch_size", base.batch_size, what);
  read_optional(j, "val_fraction", base.val_fraction, what);
  read_optional(j, "max_windows_per_epoch", base.max_windows_per_epoch, what);
  read_optional(j, "max_val_windows", base.max_val_windows, what);
  read_optional(j, "eval_batch_size", base.eval_batch_size, what);
  read_optional(j, "seed", base.seed, what);
  base.validate();
  return base;
}

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"phase", e.phase},
          {"epoch", e.epoch},
          {"lr", e.lr},
          {"train_loss", detail::number_or_null(e.train_loss)},
          {"val_loss", detail::number_or_null(e.val_loss)},
          {"val_mape", detail::number_or_null(e.val_mape)},
          {"improved", e.improved}};
}

inline EpochLog epoch_log_from_json(const nlohmann::json& j) {
  EpochLog e;
  e.phase = j.at("phase").get<std::string>();
  e.epoch = j.at("epoch").get<std::size_t>();
  e.lr = j.at("lr").get<double>();
  e.train_loss = detail::number_or_nan(j.at("train_loss"));
  e.val_loss = detail::number_or_nan(j.at("val_loss"));
  e.val_mape = detail::number_or_nan(j.at("val_mape"));
  e.improved = j.at("improved").get<bool>();
  return e;
}

inline nlohmann::json checkpoint_manifest(const Checkpoint& c) {
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : c.tensors) {
    table.push_back({{"name", t.name}, {"shape", {t.shape.rows, t.shape.cols}}, {"offset", offset}});
    offset += t.values.size();
  }
  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : c.training_log) log.push_back(to_json(e));
  return {{"schema_version", kSchemaVersion},
          {"spec", to_json(c.spec)},
          {"pretext", to_string(c.pretext)},
          {"tensors", table},
          {"total_values", offset},
          {"normalizer", {{"mean", c.normalizer.mean}, {"std", c.normalizer.std}}},
          {"frozen", c.frozen},
          {"rul_scale", c.rul_scale},
          {"trainable", c.trainable_count()},
          {"training_log", log},
          {"provenance", c.provenance}};
}

inline std::string params_blob(const Checkpoint& c) {
  std::string blob;
  for (const auto& t : c.tensors)
    blob.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
  return blob;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "manifest.json", checkpoint_manifest(c).dump(2) + "\n");
  write_text_file(dir / "params.bin", params_blob(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw DataError("no checkpoint at " + dir.string() + " (create one with `sslrul pretrain` or `sslrul finetune`)");
  const auto man = parse_json(read_text_file(dir / "manifest.json"), (dir / "manifest.json").string());
  const std::string blob = read_text_file(dir / "params.bin");
  Checkpoint c;
  try {
    require_known_keys(man,
                       {"schema_version", "spec", "pretext", "tensors", "total_values", "normalizer", "frozen",
                        "rul_scale", "trainable", "training_log", "provenance"},
                       "checkpoint manifest");
    c.spec = model_spec_from_json(man.at("spec"));
    c.pretext = pretext_from_string(man.at("pretext").get<std::string>());
    const std::size_t total = man.at("total_values").get<std::size_t>();
    if (blob.size() != total * sizeof(float))
      throw DataError("checkpoint " + dir.string() + ": params.bin has " + std::to_string(blob.size()) +
                      " bytes, manifest expects " + std::to_string(total * sizeof(float)));
    std::size_t expected_offset = 0;
    for (const auto& entry : man.at("tensors")) {
      StoredTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = {entry.at("shape")[0].get<std::size_t>(), entry.at("shape")[1].get<std::size_t>()};
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      if (offset != expected_offset) throw DataError("checkpoint tensor table does not tile params.bin");
      t.values.resize(t.shape.size());
      std::memcpy(t.values.data(), blob.data() + offset * sizeof(float), t.values.size() * sizeof(float));
      expected_offset += t.values.size();
      c.tensors.push_back(std::move(t));
    }
    if (expected_offset != total) throw DataError("checkpoint tensor table does not tile params.bin");
    c.normalizer.mean = man.at("normalizer").at("mean").get<std::vector<double>>();
    c.normalizer.std = man.at("normalizer").at("std").get<std::vector<double>>();
    for (double s : c.normalizer.std)
      if (!(s > 0)) throw DataError("checkpoint normalizer has a non-positive std");
    for (const auto& n : man.at("frozen")) c.frozen.insert(n.get<std::string>());
    for (const auto& n : c.frozen) {
      bool found = false;
      for (const auto& t : c.tensors) found = found || t.name == n;
      if (!found) throw DataError("checkpoint freeze mask names unknown tensor '" + n + "'");
    }
    c.rul_scale = man.at("rul_scale").get<double>();
    for (const auto& e : man.at("training_log")) c.training_log.push_back(epoch_log_from_json(e));
    c.provenance = man.at("provenance");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint manifest: ") + e.what());
  }
  return c;
}

}  // namespace sslrul
