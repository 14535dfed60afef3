#pragma once

// Synthetic run-to-failure strain data: Paris-Erdogan crack growth driven to
// the critical crack size, virtual strain gauges evaluated from the mode-I
// near-tip field, truncation to a degradation ratio and sliding windows.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "sslrul/error.hpp"
#include "sslrul/rng.hpp"

namespace sslrul {

struct GaugeSpec {
  double x = 0.0;      // m, along the crack line
  double y = 0.0;      // m, offset from the crack plane
  double angle = 0.0;  // degrees, measured from the x axis
};

struct MaterialConfig {
  double youngs_modulus = 71.7e9;      // Pa
  double poisson_ratio = 0.33;
  double fracture_toughness = 19.7e6;  // Pa*sqrt(m)
  std::pair<double, double> sigma_max_range{75e6, 85e6};  // Pa
  double a0_mean = 5e-4;   // m
  double a0_std = 2.5e-4;  // m
  double m_mean = 3.4;
  double m_std = 0.25;
  double C_mean = 1e-10;  // (m/cycle)/(MPa*sqrt(m))^m
  double C_std = 5e-11;
  double rho_m_logC = -0.996;
  std::vector<GaugeSpec> gauges{{0.003, 0.014, 45.0}, {0.014, 0.014, 45.0}, {0.025, 0.014, 45.0}};
  std::int64_t delta_k = 500;  // cycles between measurements
  std::uint64_t rng_seed = 0;
  double noise_std = 0.0;  // additive Gaussian strain noise, off by default
  double r_min = 1e-4;     // m, tip-distance clamp for the singular field

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("material config: " + what); };
    if (!(youngs_modulus > 0)) fail("youngs_modulus must be > 0");
    if (!(poisson_ratio > 0 && poisson_ratio < 0.5)) fail("poisson_ratio must lie in (0, 0.5)");
    if (!(fracture_toughness > 0)) fail("fracture_toughness must be > 0");
    if (!(sigma_max_range.first > 0 && sigma_max_range.first < sigma_max_range.second))
      fail("sigma_max_range must satisfy 0 < lo < hi");
    if (!(a0_std >= 0)) fail("a0_std must be >= 0");
    if (!(a0_mean > 0)) fail("a0_mean must be > 0");
    if (!(m_std >= 0)) fail("m_std must be >= 0");
    if (!(C_mean > 0)) fail("C_mean must be > 0");
    if (!(C_std >= 0)) fail("C_std must be >= 0");
    if (!(std::abs(rho_m_logC) <= 1.0)) fail("|rho_m_logC| must be <= 1");
    if (delta_k < 1) fail("delta_k must be >= 1");
    if (gauges.empty()) fail("at least one gauge is required");
    for (const auto& g : gauges)
      if (!(g.angle >= 0.0 && g.angle < 360.0)) fail("gauge angle must lie in [0, 360)");
    if (!(noise_std >= 0)) fail("noise_std must be >= 0");
    if (!(r_min > 0)) fail("r_min must be > 0");
  }
};

struct CrackParams {
  double a0 = 0.0;         // m
  double m = 0.0;
  double C = 0.0;          // (m/cycle)/(MPa*sqrt(m))^m
  double sigma_max = 0.0;  // Pa
};

// Location/scale of ln(C) whose exponential has the requested mean and std.
struct LogNormalParams {
  double mu = 0.0;
  double sigma = 0.0;
};

inline LogNormalParams lognormal_from_moments(double mean, double std) {
  if (!(mean > 0)) throw ConfigError("lognormal moment matching needs mean > 0");
  const double var_ln = std::log1p((std / mean) * (std / mean));
  if (!(var_ln > 0)) throw ConfigError("derived sigma of ln(C) must be > 0 (C_std = 0?)");
  return {std::log(mean) - 0.5 * var_ln, std::sqrt(var_ln)};
}

inline CrackParams sample_crack_params(Rng& rng, const MaterialConfig& config) {
  const LogNormalParams lnC = lognormal_from_moments(config.C_mean, config.C_std);
  std::normal_distribution<double> unit(0.0, 1.0);
  CrackParams p;
  if (config.a0_std == 0.0) {
    p.a0 = config.a0_mean;
  } else {
    do {
      p.a0 = config.a0_mean + config.a0_std * unit(rng);
    } while (p.a0 <= 0.0);
  }
  std::uniform_real_distribution<double> sigma(config.sigma_max_range.first, config.sigma_max_range.second);
  p.sigma_max = sigma(rng);
  // Cholesky factor of the 2x2 correlation between m and ln(C).
  const double z1 = unit(rng);
  const double z2 = unit(rng);
  const double rho = config.rho_m_logC;
  p.m = config.m_mean + config.m_std * z1;
  p.C = std::exp(lnC.mu + lnC.sigma * (rho * z1 + std::sqrt(std::max(0.0, 1.0 - rho * rho)) * z2));
  return p;
}

// Critical crack size for K = sigma * sqrt(pi * a).
inline double critical_crack_size(double sigma_max, double K_Ic) {
  const double ratio = K_Ic / sigma_max;
  return ratio * ratio / std::numbers::pi;
}

inline double critical_crack_size(const CrackParams& params, double K_Ic) {
  return critical_crack_size(params.sigma_max, K_Ic);
}

struct CrackHistory {
  std::int64_t failure_cycles = 0;
  // Crack size at cycles delta_k, 2*delta_k, ..., floor(failure/delta_k)*delta_k.
  std::vector<double> crack_sizes;
};

inline constexpr std::int64_t kMaxLifetimeCycles = 100'000'000;

// Explicit Euler, one cycle per step, on da/dN = C * (dK)^m with dK in MPa*sqrt(m).
inline CrackHistory integrate_paris(const CrackParams& params, double K_Ic, std::int64_t delta_k,
                                    std::int64_t max_cycles = kMaxLifetimeCycles) {
  CrackHistory out;
  const double a_crit = critical_crack_size(params, K_Ic);
  if (params.a0 >= a_crit) return out;
  const double stress_mpa = params.sigma_max * 1e-6;
  const double pi = std::numbers::pi;
  double a = params.a0;
  std::int64_t n = 0;
  while (a < a_crit) {
    a += params.C * std::pow(stress_mpa * std::sqrt(pi * a), params.m);
    ++n;
    if (n % delta_k == 0) out.crack_sizes.push_back(a);
    if (n >= max_cycles) {
      out.crack_sizes.clear();
      n = max_cycles;
      break;
    }
  }
  out.failure_cycles = n;
  return out;
}

struct ElasticConstants {
  double E = 71.7e9;
  double nu = 0.33;
};

// Normal strain along the gauge direction for an edge crack on y = 0 with
// its tip at (a, 0): Westergaard mode-I near-tip stresses plus the remote
// stress on sigma_yy, plane-stress Hooke's law, then projection.
inline double strain_at_gauge(double a, const GaugeSpec& gauge, double sigma_max, const ElasticConstants& elastic,
                              double r_min = 1e-4) {
  const double pi = std::numbers::pi;
  const double dx = gauge.x - a;
  const double dy = gauge.y;
  const double r = std::max(std::hypot(dx, dy), r_min);
  const double phi = std::atan2(dy, dx);
  const double K = sigma_max * std::sqrt(pi * a);
  const double amp = K / std::sqrt(2.0 * pi * r);
  const double c = std::cos(0.5 * phi);
  const double s = std::sin(0.5 * phi);
  const double s3 = std::sin(1.5 * phi);
  const double c3 = std::cos(1.5 * phi);
  const double sxx = amp * c * (1.0 - s * s3);
  const double syy = amp * c * (1.0 + s * s3) + sigma_max;
  const double txy = amp * c * s * c3;
  const double exx = (sxx - elastic.nu * syy) / elastic.E;
  const double eyy = (syy - elastic.nu * sxx) / elastic.E;
  const double gxy = 2.0 * (1.0 + elastic.nu) * txy / elastic.E;
  const double theta = gauge.angle * pi / 180.0;
  const double ct = std::cos(theta);
  const double st = std::sin(theta);
  return exx * ct * ct + eyy * st * st + gxy * st * ct;
}

// One structure's strain history. `measurements` is row-major (L x n_gauges);
// row j holds the reading at cycle (j + 1) * delta_k.
struct StrainSequence {
  std::string id;
  CrackParams params;
  std::optional<std::int64_t> failure_cycles;  // absent for unlabelled data
  std::size_t n_gauges = 0;
  std::vector<double> measurements;

  std::size_t length() const { return n_gauges == 0 ? 0 : measurements.size() / n_gauges; }
  double at(std::size_t t, std::size_t g) const { return measurements[t * n_gauges + g]; }
};

struct GeneratedStructure {
  StrainSequence sequence;
  std::size_t resamples = 0;
  std::vector<double> crack_sizes;
};

// Deterministic in (seed, stream, index): attempt k draws from its own
// substream, so accepted structures never depend on rejection history.
inline GeneratedStructure generate_structure(const MaterialConfig& config, std::uint64_t seed, std::uint64_t stream,
                                             std::size_t index, std::size_t h, const std::string& id) {
  const ElasticConstants elastic{config.youngs_modulus, config.poisson_ratio};
  const std::size_t n_g = config.gauges.size();
  for (std::uint64_t attempt = 0;; ++attempt) {
    if (attempt > 1000) throw ConfigError("structure generation keeps producing degenerate lifetimes");
    Rng rng = substream({seed, stream, static_cast<std::uint64_t>(index), attempt});
    const CrackParams params = sample_crack_params(rng, config);
    CrackHistory hist = integrate_paris(params, config.fracture_toughness, config.delta_k);
    if (hist.crack_sizes.size() < h + 1) continue;
    GeneratedStructure out;
    out.resamples = attempt;
    out.sequence.id = id;
    out.sequence.params = params;
    out.sequence.failure_cycles = hist.failure_cycles;
    out.sequence.n_gauges = n_g;
    out.sequence.measurements.reserve(hist.crack_sizes.size() * n_g);
    std::normal_distribution<double> noise(0.0, config.noise_std > 0 ? config.noise_std : 1.0);
    for (double a : hist.crack_sizes) {
      for (const auto& g : config.gauges) {
        double eps = strain_at_gauge(a, g, params.sigma_max, elastic, config.r_min);
        if (config.noise_std > 0) eps += noise(rng);
        out.sequence.measurements.push_back(eps);
      }
    }
    out.crack_sizes = std::move(hist.crack_sizes);
    return out;
  }
}

// Keeps the first floor(d * L) measurements and drops the failure time.
inline StrainSequence truncate(const StrainSequence& seq, double d) {
  if (!(d > 0.0 && d <= 1.0)) throw ConfigError("degradation ratio d must lie in (0, 1]");
  const std::size_t L = seq.length();
  // The small offset keeps products such as 0.7 * 100 from flooring to 69.
  const auto keep = static_cast<std::size_t>(std::floor(d * static_cast<double>(L) + 1e-9));
  StrainSequence out = seq;
  out.measurements.resize(std::min(keep, L) * seq.n_gauges);
  out.failure_cycles.reset();
  return out;
}

enum class Task { AE, AR, MSPA, RUL };

struct TaskSpec {
  Task kind = Task::AE;
  std::size_t q = 1;  // MSPA horizon
};

// Windows end at 1-based measurement index t in [h, last]; the count is
// last - h + 1 (or zero).
struct WindowRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t count = 0;
};

inline WindowRange window_range(std::size_t L, std::size_t h, const TaskSpec& task) {
  if (h == 0) throw ConfigError("window length h must be >= 1");
  std::size_t lookahead = 0;
  switch (task.kind) {
    case Task::AE:
    case Task::RUL:
      lookahead = 0;
      break;
    case Task::AR:
      lookahead = 1;
      break;
    case Task::MSPA:
      if (task.q == 0) throw ConfigError("MSPA horizon q must be >= 1");
      lookahead = task.q;
      break;
  }
  WindowRange r;
  r.first = h;
  if (L < h + lookahead) return r;
  r.last = L - lookahead;
  r.count = r.last - h + 1;
  return r;
}

// Remaining life, in measurement steps, after the t-th measurement.
inline double rul_target(const StrainSequence& seq, std::int64_t delta_k, std::size_t t_index) {
  if (!seq.failure_cycles) throw DataError("sequence " + seq.id + " carries no failure time (unlabelled)");
  return static_cast<double>(*seq.failure_cycles) / static_cast<double>(delta_k) - static_cast<double>(t_index);
}

struct WindowedSample {
  std::vector<double> input;  // (h x n_g) row-major
  std::vector<double> target;
  std::size_t target_rows = 0;
  std::size_t target_cols = 0;
  std::string source_id;
  std::size_t t_index = 0;  // 1-based index of the last measurement in the window
};

inline std::vector<WindowedSample> make_windows(const StrainSequence& seq, std::size_t h, const TaskSpec& task,
                                                std::int64_t delta_k = 500) {
  const std::size_t n_g = seq.n_gauges;
  const WindowRange range = window_range(seq.length(), h, task);
  std::vector<WindowedSample> out;
  out.reserve(range.count);
  for (std::size_t k = 0; k < range.count; ++k) {
    const std::size_t t = range.first + k;
    WindowedSample w;
    w.source_id = seq.id;
    w.t_index = t;
    const auto begin = seq.measurements.begin() + static_cast<std::ptrdiff_t>((t - h) * n_g);
    w.input.assign(begin, begin + static_cast<std::ptrdiff_t>(h * n_g));
    switch (task.kind) {
      case Task::AE:
        w.target = w.input;
        w.target_rows = h;
        w.target_cols = n_g;
        break;
      case Task::AR:
        w.target.assign(begin + static_cast<std::ptrdiff_t>(h * n_g), begin + static_cast<std::ptrdiff_t>((h + 1) * n_g));
        w.target_rows = 1;
        w.target_cols = n_g;
        break;
      case Task::MSPA:
        w.target.assign(begin + static_cast<std::ptrdiff_t>(h * n_g),
                        begin + static_cast<std::ptrdiff_t>((h + task.q) * n_g));
        w.target_rows = task.q;
        w.target_cols = n_g;
        break;
      case Task::RUL:
        w.target = {rul_target(seq, delta_k, t)};
        w.target_rows = 1;
        w.target_cols = 1;
        break;
    }
    out.push_back(std::move(w));
  }
  return out;
}

enum class DatasetKind { Unlabelled, Labelled };

struct Dataset {
  DatasetKind kind = DatasetKind::Labelled;
  double d_ratio = 1.0;
  std::size_t h = 30;
  std::uint64_t seed = 0;
  std::size_t n_requested = 0;
  std::size_t resamples = 0;
  std::size_t excluded = 0;
  MaterialConfig config;
  std::vector<StrainSequence> structures;
};

inline std::string structure_id(DatasetKind kind, std::uint64_t seed, std::size_t index) {
  return (kind == DatasetKind::Unlabelled ? "U" : "L") + std::to_string(seed) + "-" + std::to_string(index);
}

// Structures are generated independently per index; `jobs` workers only
// change wall time, never the result.
inline Dataset generate_dataset(const MaterialConfig& config, std::size_t n_structures, DatasetKind kind, double d,
                                std::uint64_t seed, std::size_t h = 30, unsigned jobs = 1) {
  config.validate();
  if (kind == DatasetKind::Labelled) d = 1.0;
  if (!(d > 0.0 && d <= 1.0)) throw ConfigError("degradation ratio d must lie in (0, 1]");
  const std::uint64_t stream = kind == DatasetKind::Unlabelled ? salt::kUnlabelled : salt::kLabelled;

  std::vector<GeneratedStructure> made(n_structures);
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < n_structures; i += step)
      made[i] = generate_structure(config, seed, stream, i, h, structure_id(kind, seed, i));
  };
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(1, n_structures))));
  if (jobs == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(work, j, jobs);
    for (auto& t : pool) t.join();
  }

  Dataset ds;
  ds.kind = kind;
  ds.d_ratio = d;
  ds.h = h;
  ds.seed = seed;
  ds.n_requested = n_structures;
  ds.config = config;
  ds.config.rng_seed = seed;
  for (auto& g : made) {
    ds.resamples += g.resamples;
    if (kind == DatasetKind::Labelled) {
      ds.structures.push_back(std::move(g.sequence));
      continue;
    }
    StrainSequence cut = truncate(g.sequence, d);
    if (cut.length() < h + 1) {
      ++ds.excluded;
      continue;
    }
    ds.structures.push_back(std::move(cut));
  }
  return ds;
}

}  // namespace sslrul
