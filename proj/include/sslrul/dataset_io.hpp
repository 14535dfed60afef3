#pragma once

// JSON config for the simulator and the on-disk dataset layout:
//   DIR/structures.jsonl  one record per structure
//   DIR/manifest.json     kind, d, seed, counts, config snapshot, ids

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "sslrul/error.hpp"
#include "sslrul/fatigue_sim.hpp"

namespace sslrul {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

inline json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(what + ": invalid JSON (" + e.what() + ")");
  }
}

// Rejects any key outside `allowed`.
inline void require_known_keys(const json& j, const std::set<std::string>& allowed, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + ": expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ConfigError(what + ": unknown key '" + key + "'");
}

template <typename T>
void read_optional(const json& j, const char* key, T& out, const std::string& what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(what + ": bad value for '" + key + "' (" + e.what() + ")");
  }
}

inline json to_json(const GaugeSpec& g) { return json{{"x", g.x}, {"y", g.y}, {"angle", g.angle}}; }

inline json to_json(const MaterialConfig& c) {
  json gauges = json::array();
  for (const auto& g : c.gauges) gauges.push_back(to_json(g));
  return json{{"schema_version", kSchemaVersion},
              {"youngs_modulus", c.youngs_modulus},
              {"poisson_ratio", c.poisson_ratio},
              {"fracture_toughness", c.fracture_toughness},
              {"sigma_max_range", json::array({c.sigma_max_range.first, c.sigma_max_range.second})},
              {"a0_mean", c.a0_mean},
              {"a0_std", c.a0_std},
              {"m_mean", c.m_mean},
              {"m_std", c.m_std},
              {"C_mean", c.C_mean},
              {"C_std", c.C_std},
              {"rho_m_logC", c.rho_m_logC},
              {"gauges", gauges},
              {"delta_k", c.delta_k},
              {"rng_seed", c.rng_seed},
              {"noise_std", c.noise_std},
              {"r_min", c.r_min}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline MaterialConfig material_config_from_json(const json& j) {
  const std::string what = "material config";
  require_known_keys(j,
                     {"schema_version", "youngs_modulus", "poisson_ratio", "fracture_toughness", "sigma_max_range",
                      "a0_mean", "a0_std", "m_mean", "m_std", "C_mean", "C_std", "rho_m_logC", "gauges", "delta_k",
                      "rng_seed", "noise_std", "r_min"},
                     what);
  int version = kSchemaVersion;
  read_optional(j, "schema_version", version, what);
  if (version != kSchemaVersion) throw ConfigError(what + ": unsupported schema_version " + std::to_string(version));
  MaterialConfig c;
  read_optional(j, "youngs_modulus", c.youngs_modulus, what);
  read_optional(j, "poisson_ratio", c.poisson_ratio, what);
  read_optional(j, "fracture_toughness", c.fracture_toughness, what);
  if (j.contains("sigma_max_range")) {
    const auto& r = j.at("sigma_max_range");
    if (!r.is_array() || r.size() != 2) throw ConfigError(what + ": sigma_max_range must be [lo, hi]");
    c.sigma_max_range = {r[0].get<double>(), r[1].get<double>()};
  }
  read_optional(j, "a0_mean", c.a0_mean, what);
  read_optional(j, "a0_std", c.a0_std, what);
  read_optional(j, "m_mean", c.m_mean, what);
  read_optional(j, "m_std", c.m_std, what);
  read_optional(j, "C_mean", c.C_mean, what);
  read_optional(j, "C_std", c.C_std, what);
  read_optional(j, "rho_m_logC", c.rho_m_logC, what);
  if (j.contains("gauges")) {
    c.gauges.clear();
    for (const auto& g : j.at("gauges")) {
      require_known_keys(g, {"x", "y", "angle"}, what + " gauge");
      c.gauges.push_back({g.at("x").get<double>(), g.at("y").get<double>(), g.at("angle").get<double>()});
    }
  }
  read_optional(j, "delta_k", c.delta_k, what);
  read_optional(j, "rng_seed", c.rng_seed, what);
  read_optional(j, "noise_std", c.noise_std, what);
  read_optional(j, "r_min", c.r_min, what);
  c.validate();
  return c;
}

inline MaterialConfig load_material_config(const std::filesystem::path& path) {
  return material_config_from_json(parse_json(read_text_file(path), path.string()));
}

inline const char* to_string(DatasetKind k) { return k == DatasetKind::Unlabelled ? "unlabelled" : "labelled"; }

inline DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "unlabelled") return DatasetKind::Unlabelled;
  if (s == "labelled") return DatasetKind::Labelled;
  throw ConfigError("dataset kind must be 'unlabelled' or 'labelled', got '" + s + "'");
}

inline json structure_record(const StrainSequence& s, DatasetKind kind) {
  json rows = json::array();
  for (std::size_t t = 0; t < s.length(); ++t) {
    json row = json::array();
    for (std::size_t g = 0; g < s.n_gauges; ++g) row.push_back(s.at(t, g));
    rows.push_back(std::move(row));
  }
  json rec{{"id", s.id}, {"sigma_max", s.params.sigma_max}, {"m", s.params.m}, {"C", s.params.C}, {"a0", s.params.a0}};
  if (kind == DatasetKind::Labelled) {
    if (!s.failure_cycles) throw DataError("labelled structure " + s.id + " has no failure time");
    rec["failure_cycles"] = *s.failure_cycles;
  }
  rec["measurements"] = std::move(rows);
  return rec;
}

inline StrainSequence structure_from_record(const json& rec, DatasetKind kind) {
  const std::set<std::string> allowed = kind == DatasetKind::Labelled
                                            ? std::set<std::string>{"id", "sigma_max", "m", "C", "a0",
                                                                    "failure_cycles", "measurements"}
                                            : std::set<std::string>{"id", "sigma_max", "m", "C", "a0", "measurements"};
  try {
    require_known_keys(rec, allowed, "structure record");
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  StrainSequence s;
  try {
    s.id = rec.at("id").get<std::string>();
    s.params.sigma_max = rec.at("sigma_max").get<double>();
    s.params.m = rec.at("m").get<double>();
    s.params.C = rec.at("C").get<double>();
    s.params.a0 = rec.at("a0").get<double>();
    if (kind == DatasetKind::Labelled) s.failure_cycles = rec.at("failure_cycles").get<std::int64_t>();
    const auto& rows = rec.at("measurements");
    if (!rows.is_array() || rows.empty()) throw DataError("structure " + s.id + ": empty measurements");
    s.n_gauges = rows[0].size();
    for (const auto& row : rows) {
      if (row.size() != s.n_gauges) throw DataError("structure " + s.id + ": ragged measurement rows");
      for (const auto& v : row) s.measurements.push_back(v.get<double>());
    }
  } catch (const json::exception& e) {
    throw DataError("structure record: " + std::string(e.what()));
  }
  return s;
}

inline json dataset_manifest(const Dataset& ds) {
  json ids = json::array();
  for (const auto& s : ds.structures) ids.push_back(s.id);
  return json{{"schema_version", kSchemaVersion},
              {"kind", to_string(ds.kind)},
              {"d", ds.d_ratio},
              {"h", ds.h},
              {"seed", ds.seed},
              {"n_requested", ds.n_requested},
              {"n_structures", ds.structures.size()},
              {"resamples", ds.resamples},
              {"excluded", ds.excluded},
              {"config", to_json(ds.config)},
              {"ids", ids}};
}

inline std::string dataset_records_text(const Dataset& ds) {
  std::string out;
  for (const auto& s : ds.structures) {
    out += structure_record(s, ds.kind).dump();
    out += '\n';
  }
  return out;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "structures.jsonl", dataset_records_text(ds));
  write_text_file(dir / "manifest.json", dataset_manifest(ds).dump(2) + "\n");
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw DataError("no dataset at " + dir.string() + " (create one with `sslrul generate`)");
  const json man = parse_json(read_text_file(dir / "manifest.json"), (dir / "manifest.json").string());
  Dataset ds;
  try {
    require_known_keys(man,
                       {"schema_version", "kind", "d", "h", "seed", "n_requested", "n_structures", "resamples",
                        "excluded", "config", "ids"},
                       "dataset manifest");
    ds.kind = dataset_kind_from_string(man.at("kind").get<std::string>());
    ds.d_ratio = man.at("d").get<double>();
    ds.h = man.at("h").get<std::size_t>();
    ds.seed = man.at("seed").get<std::uint64_t>();
    ds.n_requested = man.at("n_requested").get<std::size_t>();
    ds.resamples = man.at("resamples").get<std::size_t>();
    ds.excluded = man.at("excluded").get<std::size_t>();
    ds.config = material_config_from_json(man.at("config"));
  } catch (const json::exception& e) {
    throw DataError("dataset manifest: " + std::string(e.what()));
  }
  std::istringstream lines(read_text_file(dir / "structures.jsonl"));
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    ds.structures.push_back(structure_from_record(parse_json(line, "structure record"), ds.kind));
  }
  if (ds.structures.size() != man.at("n_structures").get<std::size_t>())
    throw DataError("dataset at " + dir.string() + ": record count does not match manifest");
  return ds;
}

}  // namespace sslrul
