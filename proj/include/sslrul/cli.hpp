#pragma once

// `sslrul` command-line front end.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "sslrul/checkpoint.hpp"
#include "sslrul/dataset_io.hpp"
#include "sslrul/error.hpp"
#include "sslrul/evaluation.hpp"
#include "sslrul/fatigue_sim.hpp"
#include "sslrul/pipeline.hpp"
#include "sslrul/training.hpp"

namespace sslrul {

inline constexpr const char* kVersion = "0.1.0";

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

// run.json written next to every artifact.
struct RunManifest {
  std::vector<std::string> argv;
  nlohmann::json config_hashes = nlohmann::json::object();
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();
  double wall_seconds = 0.0;

  void hash_file(const std::string& key, const std::filesystem::path& path) {
    config_hashes[key] = {{"path", path.string()}, {"sha256", sha256_hex(read_text_file(path))}};
  }

  nlohmann::json to_json() const {
    return {{"tool", "sslrul"},       {"version", kVersion}, {"command_line", argv},
            {"config_hashes", config_hashes}, {"seeds", seeds},     {"inputs", inputs},
            {"outputs", outputs},     {"wall_seconds", wall_seconds}};
  }
};

namespace cli_detail {

inline void write_train_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::string text;
  for (const auto& e : log) text += to_json(e).dump() + "\n";
  write_text_file(path, text);
}

inline std::filesystem::path out_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("SSLRUL_OUT"); env && *env) return env;
  throw ConfigError("no output directory: pass --out DIR or set SSLRUL_OUT");
}

inline unsigned jobs_value(unsigned flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("SSLRUL_JOBS"); env && *env) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("SSLRUL_JOBS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

inline TrainConfig train_config_or_default(const std::string& path, TrainConfig base, RunManifest& run) {
  if (path.empty()) return base;
  run.hash_file("train", path);
  return train_config_from_json(parse_json(read_text_file(path), path), base);
}

inline void log_epochs(const std::vector<EpochLog>& log) {
  for (const auto& e : log)
    std::cerr << "  " << e.phase << " epoch " << e.epoch << " lr " << e.lr << " train " << e.train_loss
              << (std::isnan(e.val_loss) ? std::string() : " val " + std::to_string(e.val_loss)) << "\n";
}

}  // namespace cli_detail

inline int run_cli(int argc, char** argv) {
  using namespace cli_detail;
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest run;
  for (int i = 0; i < argc; ++i) run.argv.emplace_back(argv[i]);

  CLI::App app{"Self-supervised RUL estimation for fatigue crack growth"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(0, 1);

  // generate
  auto* gen = app.add_subcommand("generate", "simulate a dataset of strain sequences");
  std::string gen_config, gen_kind = "labelled", gen_out;
  std::size_t gen_n = 0, gen_h = 30;
  double gen_d = 1.0;
  std::uint64_t gen_seed = 0;
  unsigned gen_jobs = 0;
  gen->add_option("--config", gen_config, "material config JSON (defaults if omitted)")->check(CLI::ExistingFile);
  gen->add_option("--kind", gen_kind, "unlabelled or labelled")->check(CLI::IsMember({"unlabelled", "labelled"}));
  gen->add_option("--n", gen_n, "number of structures")->required();
  gen->add_option("--d", gen_d, "degradation ratio for unlabelled data");
  gen->add_option("--window", gen_h, "window length; shorter structures are resampled or excluded");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--jobs", gen_jobs, "worker threads");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "train a backbone on a pretext task");
  std::string pre_data, pre_task = "ar", pre_config, pre_out;
  std::size_t pre_q = 1;
  std::optional<std::uint64_t> pre_seed;
  pre->add_option("--data", pre_data, "unlabelled dataset directory")->required();
  pre->add_option("--task", pre_task, "ae, ar or mspa")->check(CLI::IsMember({"ae", "ar", "mspa"}));
  pre->add_option("--q", pre_q, "MSPA horizon");
  pre->add_option("--config", pre_config, "training config JSON")->check(CLI::ExistingFile);
  pre->add_option("--seed", pre_seed, "training seed (overrides the config)");
  pre->add_option("--out", pre_out, "checkpoint directory");

  // finetune
  auto* fin = app.add_subcommand("finetune", "train a RUL model on labelled data");
  std::string fin_data, fin_backbone, fin_arch = "ar", fin_config, fin_out;
  bool fin_freeze = false;
  std::optional<std::uint64_t> fin_seed;
  fin->add_option("--data", fin_data, "labelled dataset directory")->required();
  fin->add_option("--backbone", fin_backbone, "pre-trained checkpoint directory");
  fin->add_flag("--freeze", fin_freeze, "keep the backbone tensors fixed");
  fin->add_option("--arch", fin_arch, "architecture without a backbone: ar or ae")->check(CLI::IsMember({"ar", "ae"}));
  fin->add_option("--config", fin_config, "training config JSON")->check(CLI::ExistingFile);
  fin->add_option("--seed", fin_seed, "training seed (overrides the config)");
  fin->add_option("--out", fin_out, "checkpoint directory");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "MAPE of a fine-tuned model on a labelled test set");
  std::string ev_model, ev_test, ev_protocol, ev_out;
  ev->add_option("--model", ev_model, "fine-tuned checkpoint directory")->required();
  ev->add_option("--test", ev_test, "labelled test dataset directory")->required();
  ev->add_option("--protocol", ev_protocol, "protocol JSON")->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "directory for metrics.json and predictions.csv");

  // experiment
  auto* ex = app.add_subcommand("experiment", "run a grid of pre-train / fine-tune / evaluate cells");
  std::string ex_grid, ex_out;
  unsigned ex_jobs = 0;
  ex->add_option("--grid", ex_grid, "grid JSON")->required()->check(CLI::ExistingFile);
  ex->add_option("--out", ex_out, "report directory");
  ex->add_option("--jobs", ex_jobs, "parallel cells");

  // inspect
  auto* ins = app.add_subcommand("inspect", "summarize a dataset or checkpoint");
  std::string ins_model, ins_data;
  ins->add_option("--model", ins_model, "checkpoint directory");
  ins->add_option("--data", ins_data, "dataset directory");

  if (argc <= 1) {
    std::cout << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (app.get_subcommands().empty()) {
    std::cout << app.help();
    return 2;
  }

  auto finish = [&](const std::filesystem::path& dir) {
    run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_text_file(dir / "run.json", run.to_json().dump(2) + "\n");
  };

  try {
    if (gen->parsed()) {
      const auto out = out_dir(gen_out);
      MaterialConfig config;
      if (!gen_config.empty()) {
        run.hash_file("material", gen_config);
        config = load_material_config(gen_config);
      }
      const Dataset ds =
          generate_dataset(config, gen_n, dataset_kind_from_string(gen_kind), gen_d, gen_seed, gen_h, jobs_value(gen_jobs));
      write_dataset(ds, out);
      run.seeds["dataset"] = gen_seed;
      run.outputs["dataset"] = out.string();
      std::cerr << "generated " << ds.structures.size() << " " << gen_kind << " structures (" << ds.resamples
                << " resampled, " << ds.excluded << " excluded) -> " << out.string() << "\n";
      finish(out);
      return 0;
    }

    if (pre->parsed()) {
      const auto out = out_dir(pre_out);
      const Dataset ds = read_dataset(pre_data);
      if (ds.kind != DatasetKind::Unlabelled)
        throw DataError("pretrain: " + pre_data + " is a labelled dataset; pre-training uses unlabelled data");
      PretrainOptions opt;
      opt.pretext = pretext_from_string(pre_task);
      opt.q = pre_q;
      opt.train = train_config_or_default(pre_config, TrainConfig::pretrain_defaults(), run);
      if (pre_seed) opt.train.seed = *pre_seed;
      const TrainingRun result = pretrain(ds.structures, ds.h, opt);
      log_epochs(result.fit.log);
      save_checkpoint(result.checkpoint, out);
      write_train_log(out / "train_log.jsonl", result.fit.log);
      run.seeds["train"] = opt.train.seed;
      run.inputs["data"] = pre_data;
      run.outputs["checkpoint"] = out.string();
      std::cerr << "pretrained " << pre_task << " backbone, best val loss " << result.fit.best_val_loss << " -> "
                << out.string() << "\n";
      finish(out);
      return 0;
    }

    if (fin->parsed()) {
      const auto out = out_dir(fin_out);
      const Dataset ds = read_dataset(fin_data);
      if (ds.kind != DatasetKind::Labelled)
        throw DataError("finetune: " + fin_data + " is unlabelled; fine-tuning needs failure times");
      std::optional<Checkpoint> backbone;
      if (!fin_backbone.empty()) backbone = load_checkpoint(fin_backbone);
      FinetuneOptions opt;
      opt.freeze = fin_freeze;
      opt.fresh_arch = fin_arch == "ae" ? BackboneArch::AE : BackboneArch::AR;
      opt.train = train_config_or_default(fin_config, TrainConfig::finetune_defaults(), run);
      if (fin_seed) opt.train.seed = *fin_seed;
      const TrainingRun result =
          finetune(backbone ? &*backbone : nullptr, ds.structures, ds.h, ds.config.delta_k, opt);
      log_epochs(result.fit.log);
      save_checkpoint(result.checkpoint, out);
      write_train_log(out / "train_log.jsonl", result.fit.log);
      run.seeds["train"] = opt.train.seed;
      run.inputs["data"] = fin_data;
      if (backbone) run.inputs["backbone"] = fin_backbone;
      run.outputs["checkpoint"] = out.string();
      std::cerr << "fine-tuned RUL model (" << result.fit.trainable << " trainable parameters) -> " << out.string()
                << "\n";
      finish(out);
      return 0;
    }

    if (ev->parsed()) {
      const Checkpoint ckpt = load_checkpoint(ev_model);
      const Dataset test = read_dataset(ev_test);
      if (test.kind != DatasetKind::Labelled) throw DataError("evaluate: test dataset must be labelled");
      TestProtocolConfig protocol;
      if (!ev_protocol.empty()) {
        run.hash_file("protocol", ev_protocol);
        protocol = protocol_from_json(parse_json(read_text_file(ev_protocol), ev_protocol));
      }
      std::size_t skipped = 0;
      const auto points = test_points(test.structures, protocol, ckpt.spec.h, test.config.delta_k, &skipped);
      if (skipped) std::cerr << "warning: " << skipped << " test structures shorter than h were skipped\n";
      const auto pred = predict_rul(ckpt, test.structures, points);
      std::vector<double> truth;
      for (const auto& p : points) truth.push_back(p.true_rul);
      const MapeResult m = mape(pred, truth);
      std::cout << "MAPE: " << format_fixed(m.value, 4) << "% over " << m.used << " test structures\n";
      if (!ev_out.empty()) {
        const std::filesystem::path out = ev_out;
        std::filesystem::create_directories(out);
        std::string csv = "id,t_star,true_rul,predicted_rul\n";
        for (std::size_t i = 0; i < points.size(); ++i)
          csv += test.structures[points[i].structure].id + "," + std::to_string(points[i].t_star) + "," +
                 format_fixed(points[i].true_rul) + "," + format_fixed(pred[i]) + "\n";
        write_text_file(out / "predictions.csv", csv);
        const nlohmann::json metrics{{"mape", m.value},
                                     {"used", m.used},
                                     {"excluded_zero_targets", m.excluded},
                                     {"skipped_short", skipped},
                                     {"protocol", to_json(protocol)}};
        write_text_file(out / "metrics.json", metrics.dump(2) + "\n");
        run.seeds["protocol"] = protocol.seed;
        run.inputs = {{"model", ev_model}, {"test", ev_test}};
        run.outputs["metrics"] = (out / "metrics.json").string();
        finish(out);
      }
      return 0;
    }

    if (ex->parsed()) {
      const auto out = out_dir(ex_out);
      run.hash_file("grid", ex_grid);
      const GridSpec grid = grid_from_json(parse_json(read_text_file(ex_grid), ex_grid));
      const GridResult result = run_experiment_grid(grid, jobs_value(ex_jobs),
                                                    [](const std::string& msg) { std::cerr << msg << "\n"; });
      std::filesystem::create_directories(out);
      write_text_file(out / "results.csv", results_csv(result));
      write_text_file(out / "summary.csv", summary_csv(result));
      run.seeds = {{"grid", grid.seed}, {"protocol", grid.protocol.seed}, {"test", grid.seed + grid.test_seed_offset}};
      run.outputs = {{"results", (out / "results.csv").string()}, {"summary", (out / "summary.csv").string()}};
      std::cout << summary_csv(result);
      finish(out);
      return 0;
    }

    if (ins->parsed()) {
      if (ins_model.empty() == ins_data.empty()) throw ConfigError("inspect: pass exactly one of --model or --data");
      if (!ins_model.empty()) {
        const Checkpoint c = load_checkpoint(ins_model);
        std::cout << "kind: " << to_string(c.spec.kind) << "\n"
                  << "backbone: " << to_string(c.spec.backbone) << "\n"
                  << "pretext: " << to_string(c.pretext) << "\n"
                  << "tensors: " << c.tensors.size() << "\n"
                  << "parameters: " << c.parameter_count() << "\n"
                  << "trainable: " << c.trainable_count() << "\n"
                  << "frozen tensors: " << c.frozen.size() << "\n"
                  << "epochs logged: " << c.training_log.size() << "\n";
      } else {
        const Dataset ds = read_dataset(ins_data);
        std::size_t total = 0, shortest = ds.structures.empty() ? 0 : SIZE_MAX, longest = 0;
        for (const auto& s : ds.structures) {
          total += s.length();
          shortest = std::min(shortest, s.length());
          longest = std::max(longest, s.length());
        }
        std::cout << "kind: " << to_string(ds.kind) << "\n"
                  << "structures: " << ds.structures.size() << "\n"
                  << "d: " << ds.d_ratio << "\n"
                  << "h: " << ds.h << "\n"
                  << "seed: " << ds.seed << "\n"
                  << "measurements: " << total << " (min " << shortest << ", max " << longest << ")\n"
                  << "resampled: " << ds.resamples << "\n"
                  << "excluded: " << ds.excluded << "\n";
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace sslrul
