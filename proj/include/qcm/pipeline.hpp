#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qcm/bvd.hpp"
#include "qcm/csv_io.hpp"
#include "qcm/descriptors.hpp"
#include "qcm/feature_select.hpp"
#include "qcm/kanazawa.hpp"
#include "qcm/lineshape.hpp"
#include "qcm/outliers.hpp"
#include "qcm/regression.hpp"

namespace qcm {

inline constexpr const char* kVersion = "qcm 1.0.0";

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause)
      : std::runtime_error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// ---- configuration --------------------------------------------------------

struct PipelineConfig {
  fs::path out_dir = "qcm_out";
  std::uint64_t seed = 1;
  unsigned threads = 0;
  bool skip_simulate = false;
  std::optional<fs::path> sweeps_in, targets_in, bounds_in, calibration_in;

  SimulationConfig sim;
  FitConfig fit;
  ConsensusConfig outliers;
  bool auto_alpha = false;
  MiConfig rank;
  CvConfig cv;
  std::vector<ModelSpec> specs = default_specs();
  CrystalConstants crystal;
  double compare_step = 0.25;

  bool outliers_enabled = true, rank_enabled = true, train_enabled = true, kanazawa_enabled = true,
       compare_enabled = true;

  std::map<std::string, std::string> overrides;  // every key=value applied, for the manifest
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return std::string(s.substr(a, b - a + 1));
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    return parse_double(v, key);
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
}

inline long to_long(const std::string& key, const std::string& v) {
  try {
    return parse_int(v, key);
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects an integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

using Setter = std::function<void(PipelineConfig&, const std::string&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto num = [&t](const std::string& k, auto member) {
      t[k] = [member](PipelineConfig& c, const std::string& key, const std::string& v) { member(c) = to_double(key, v); };
    };
    auto flag = [&t](const std::string& k, auto member) {
      t[k] = [member](PipelineConfig& c, const std::string& key, const std::string& v) { member(c) = to_bool(key, v); };
    };
    auto path = [&t](const std::string& k, auto member) {
      t[k] = [member](PipelineConfig& c, const std::string&, const std::string& v) { member(c) = fs::path(v); };
    };
    t["pipeline.out_dir"] = [](PipelineConfig& c, const std::string&, const std::string& v) { c.out_dir = v; };
    t["pipeline.seed"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      const long s = to_long(k, v);
      if (s < 0) throw ConfigError("config: pipeline.seed must be >= 0");
      c.seed = static_cast<std::uint64_t>(s);
    };
    t["pipeline.threads"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      const long n = to_long(k, v);
      if (n < 0) throw ConfigError("config: pipeline.threads must be >= 0");
      c.threads = static_cast<unsigned>(n);
    };
    flag("pipeline.skip_simulate", [](PipelineConfig& c) -> bool& { return c.skip_simulate; });
    path("pipeline.sweeps", [](PipelineConfig& c) -> std::optional<fs::path>& { return c.sweeps_in; });
    path("pipeline.targets", [](PipelineConfig& c) -> std::optional<fs::path>& { return c.targets_in; });
    path("fit.bounds", [](PipelineConfig& c) -> std::optional<fs::path>& { return c.bounds_in; });
    path("kanazawa.calibration", [](PipelineConfig& c) -> std::optional<fs::path>& { return c.calibration_in; });

    num("simulate.r_m", [](PipelineConfig& c) -> double& { return c.sim.crystal.r_m; });
    num("simulate.l_m", [](PipelineConfig& c) -> double& { return c.sim.crystal.l_m; });
    num("simulate.c_m", [](PipelineConfig& c) -> double& { return c.sim.crystal.c_m; });
    num("simulate.c_0", [](PipelineConfig& c) -> double& { return c.sim.crystal.c_0; });
    t["simulate.rounds"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      c.sim.schedule.rounds = static_cast<int>(to_long(k, v));
    };
    t["simulate.rounds_per_period"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      c.sim.schedule.sweeps_per_period = static_cast<int>(to_long(k, v));
    };
    num("simulate.peak_to_peak_hz", [](PipelineConfig& c) -> double& { return c.sim.schedule.peak_to_peak_hz; });
    num("simulate.noise_rel", [](PipelineConfig& c) -> double& { return c.sim.schedule.noise_rel; });
    t["simulate.coupling"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      if (v == "newtonian") c.sim.schedule.coupling.reset();
      else c.sim.schedule.coupling = to_double(k, v);
    };
    t["simulate.liquid"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      if (v == "none") c.sim.liquid.reset();
      else if (v == "water") c.sim.liquid = LiquidLoad{};
      else throw ConfigError("config: " + k + " expects water or none");
    };
    num("simulate.q1_mean", [](PipelineConfig& c) -> double& { return c.sim.flow.q1_mean; });
    num("simulate.q1_amp", [](PipelineConfig& c) -> double& { return c.sim.flow.q1_amp; });
    num("simulate.q2_mean", [](PipelineConfig& c) -> double& { return c.sim.flow.q2_mean; });
    num("simulate.q2_amp", [](PipelineConfig& c) -> double& { return c.sim.flow.q2_amp; });
    num("simulate.period_s", [](PipelineConfig& c) -> double& { return c.sim.flow.period_s; });
    num("simulate.stock_pct", [](PipelineConfig& c) -> double& { return c.sim.flow.stock_pct; });
    num("simulate.sample_rate_hz", [](PipelineConfig& c) -> double& { return c.sim.flow.sample_rate_hz; });

    num("fit.qc_threshold", [](PipelineConfig& c) -> double& { return c.fit.qc_threshold; });
    num("fit.r2_tol", [](PipelineConfig& c) -> double& { return c.fit.options.r2_tol; });
    t["fit.min_bound_fits"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      const long n = to_long(k, v);
      if (n < 1) throw ConfigError("config: fit.min_bound_fits must be >= 1");
      c.fit.min_bound_fits = static_cast<std::size_t>(n);
    };
    flag("fit.bounded_refit", [](PipelineConfig& c) -> bool& { return c.fit.bounded_refit; });
    flag("fit.lorentz_triple", [](PipelineConfig& c) -> bool& { return c.fit.options.lorentz_triple; });

    flag("outliers.enabled", [](PipelineConfig& c) -> bool& { return c.outliers_enabled; });
    num("outliers.alpha", [](PipelineConfig& c) -> double& { return c.outliers.alpha; });
    num("outliers.tau", [](PipelineConfig& c) -> double& { return c.outliers.tau; });
    flag("outliers.auto_alpha", [](PipelineConfig& c) -> bool& { return c.auto_alpha; });
    t["outliers.ldof_k"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      c.outliers.ldof_k = static_cast<std::size_t>(std::max(0L, to_long(k, v)));
    };
    t["outliers.trees"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      c.outliers.trees = static_cast<std::size_t>(std::max(0L, to_long(k, v)));
    };
    t["outliers.subsample"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      c.outliers.subsample = static_cast<std::size_t>(std::max(0L, to_long(k, v)));
    };

    flag("rank.enabled", [](PipelineConfig& c) -> bool& { return c.rank_enabled; });
    t["rank.bins"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      c.rank.bins = static_cast<int>(to_long(k, v));
      c.cv.mi.bins = c.rank.bins;
    };

    flag("train.enabled", [](PipelineConfig& c) -> bool& { return c.train_enabled; });
    t["train.folds"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      c.cv.folds = static_cast<int>(to_long(k, v));
    };
    t["train.k_grid"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      c.cv.k_grid.clear();
      for (const auto& item : split_list(v)) {
        const long n = to_long(k, item);
        if (n < 1) throw ConfigError("config: train.k_grid values must be >= 1");
        c.cv.k_grid.push_back(static_cast<std::size_t>(n));
      }
    };
    t["train.families"] = [](PipelineConfig& c, const std::string& k, const std::string& v) {
      std::map<Family, ModelSpec> old;
      for (const auto& s : c.specs) old[s.family] = s;
      c.specs.clear();
      for (const auto& item : split_list(v)) {
        try {
          const Family f = parse_family(item);
          c.specs.push_back(old.count(f) ? old[f] : ModelSpec{f, {}});
        } catch (const InputError& e) {
          throw ConfigError("config: " + k + ": " + e.what());
        }
      }
    };

    flag("kanazawa.enabled", [](PipelineConfig& c) -> bool& { return c.kanazawa_enabled; });
    num("kanazawa.f0_hz", [](PipelineConfig& c) -> double& { return c.crystal.f0_hz; });
    num("kanazawa.rho_q", [](PipelineConfig& c) -> double& { return c.crystal.rho_q; });
    num("kanazawa.mu_q", [](PipelineConfig& c) -> double& { return c.crystal.mu_q; });

    flag("compare.enabled", [](PipelineConfig& c) -> bool& { return c.compare_enabled; });
    num("compare.step", [](PipelineConfig& c) -> double& { return c.compare_step; });
    return t;
  }();
  return table;
}

}  // namespace detail

// train.<family>.<hyperparameter> sets one model hyperparameter.
inline void apply_setting(PipelineConfig& c, const std::string& key, const std::string& value) {
  const auto& t = detail::setters();
  if (const auto it = t.find(key); it != t.end()) {
    it->second(c, key, value);
  } else if (key.rfind("train.", 0) == 0 && std::count(key.begin(), key.end(), '.') == 2) {
    const auto dot = key.find('.', 6);
    Family f;
    try {
      f = parse_family(key.substr(6, dot - 6));
    } catch (const InputError&) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
    const std::string hp = key.substr(dot + 1);
    const auto& keys = hyperparameter_keys(f);
    if (std::find(keys.begin(), keys.end(), hp) == keys.end())
      throw ConfigError("config: unknown hyperparameter '" + hp + "' for " + to_string(f));
    const double v = detail::to_double(key, value);
    bool found = false;
    for (auto& s : c.specs)
      if (s.family == f) {
        s.hyper[hp] = v;
        found = true;
      }
    if (!found) c.specs.push_back({f, {{hp, v}}});
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
  c.overrides[key] = value;
}

inline PipelineConfig parse_config(std::string_view text, PipelineConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto s = detail::trim(line);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    const auto key = detail::trim(s.substr(0, eq)), value = detail::trim(s.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key or value");
    try {
      apply_setting(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(n) + ": " + e.what());
    }
  }
  return base;
}

inline PipelineConfig load_config(const fs::path& path, PipelineConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// Seed of a named stage, derived from the master seed only.
inline std::uint64_t stage_seed(std::uint64_t master, std::string_view stage) {
  std::uint32_t h = 2166136261u;
  for (char ch : stage) h = (h ^ static_cast<unsigned char>(ch)) * 16777619u;
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32), h};
  std::array<std::uint32_t, 2> w{};
  seq.generate(w.begin(), w.end());
  return (static_cast<std::uint64_t>(w[0]) << 32) | w[1];
}

// Every check that needs no stage output.
inline void validate_config(const PipelineConfig& c) {
  auto need = [](const std::optional<fs::path>& p, const char* what) {
    if (p && !fs::exists(*p)) throw ConfigError(std::string(what) + " not found: " + p->string());
  };
  need(c.sweeps_in, "sweep CSV");
  need(c.targets_in, "target CSV");
  need(c.bounds_in, "bounds CSV");
  need(c.calibration_in, "calibration CSV");
  if (c.skip_simulate && (!c.sweeps_in || !c.targets_in))
    throw ConfigError("skip_simulate needs pipeline.sweeps and pipeline.targets");
  try {
    c.sim.crystal.validate();
    c.sim.flow.validate();
    c.crystal.validate();
    c.rank.validate();
    for (const auto& s : c.specs) s.validate();
    check_alpha(c.outliers.alpha);
    c.cv.validate(kDescriptorCount);
  } catch (const InputError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.sim.schedule.rounds < 1 || c.sim.schedule.sweeps_per_period < 1)
    throw ConfigError("config: simulate.rounds and simulate.rounds_per_period must be >= 1");
  if (c.sim.schedule.noise_rel < 0.0) throw ConfigError("config: simulate.noise_rel must be >= 0");
  if (!(c.outliers.tau > 0.0 && c.outliers.tau <= 1.0)) throw ConfigError("config: outliers.tau must lie in (0, 1]");
  if (c.outliers.ldof_k < 2 || c.outliers.trees < 1 || c.outliers.subsample < 2)
    throw ConfigError("config: outliers.ldof_k >= 2, outliers.trees >= 1, outliers.subsample >= 2 required");
  if (!(c.fit.qc_threshold <= 1.0)) throw ConfigError("config: fit.qc_threshold must be <= 1");
  if (!(c.compare_step > 0.0)) throw ConfigError("config: compare.step must be > 0");
  if (c.specs.empty()) throw ConfigError("config: train.families is empty");
  if (c.compare_enabled && (!c.train_enabled || !c.kanazawa_enabled))
    throw ConfigError("config: compare needs train and kanazawa enabled");
}

// ---- artifacts ------------------------------------------------------------

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

// Files of one stage are written as <name>.partial and renamed once the stage succeeds.
class StageOutput {
 public:
  explicit StageOutput(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  fs::path file(const std::string& name) {
    names_.push_back(name);
    return dir_ / (name + ".partial");
  }

  std::vector<std::string> commit() {
    for (const auto& n : names_) fs::rename(dir_ / (n + ".partial"), dir_ / n);
    auto out = std::move(names_);
    names_.clear();
    return out;
  }

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::vector<std::string> names_;
};

inline void write_json(const fs::path& path, const Json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

inline Json json_number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

// ---- stages ---------------------------------------------------------------

inline SimulatedDataset stage_simulate(const SimulationConfig& sim, StageOutput& out) {
  auto ds = generate_dataset(sim);
  write_sweeps(out.file("sweeps.csv"), ds.sweeps);
  write_targets(out.file("targets.csv"), ds.targets);
  return ds;
}

struct FitStageResult {
  DatasetFit fit;
  DescriptorBuild descriptors;
};

inline FitStageResult stage_fit(std::span<const FrequencySweep> sweeps, std::span<const TargetSample> targets,
                                const FitConfig& cfg, const std::optional<FitBounds>& bounds, StageOutput& out) {
  FitStageResult r;
  r.fit = fit_dataset(sweeps, cfg, bounds);
  std::vector<int> rounds;
  for (const auto& s : sweeps)
    if (rounds.empty() || rounds.back() != s.round_index) rounds.push_back(s.round_index);
  std::sort(rounds.begin(), rounds.end());
  rounds.erase(std::unique(rounds.begin(), rounds.end()), rounds.end());
  r.descriptors = build_descriptors(r.fit.qc.retained, targets, rounds);
  write_fit_records(out.file("fits_unbounded.csv"), r.fit.unbounded);
  write_fit_records(out.file("fits.csv"), r.fit.records);
  if (r.fit.bounds) write_bounds(out.file("bounds.csv"), *r.fit.bounds);
  write_fit_report(out.file("fit_report.csv"), r.fit.records);
  write_qc_drops(out.file("qc_drops.csv"), r.fit.qc.dropped);
  write_descriptors(out.file("descriptors.csv"), r.descriptors.matrix);
  return r;
}

struct OutlierStageResult {
  DetectorScores scores;
  ConsensusResult result;
  double alpha = 0.0;
  std::vector<double> alpha_grid;
  std::vector<std::size_t> alpha_counts;
  DescriptorMatrix clean;
  std::vector<std::size_t> kept_rows;
};

inline OutlierStageResult stage_outliers(const DescriptorMatrix& d, ConsensusConfig cfg, bool auto_alpha,
                                         StageOutput& out) {
  OutlierStageResult r;
  r.scores = run_detectors(d.x, cfg);
  r.alpha_grid = default_alpha_grid();
  r.alpha_counts = alpha_sweep(r.scores, r.alpha_grid, cfg.tau);
  if (auto_alpha) cfg.alpha = elbow_alpha(r.alpha_grid, r.alpha_counts);
  r.alpha = cfg.alpha;
  r.result = consensus(r.scores, cfg);
  r.kept_rows = inlier_rows(r.result);
  r.clean = d.select_rows(r.kept_rows);
  {
    auto f = open_out(out.file("outlier_report.csv"));
    f << "row,ldof,iforest,mahalanobis,S,flag\n";
    for (std::size_t i = 0; i < d.rows(); ++i)
      f << i << ',' << fmt(r.scores.ldof_n[i]) << ',' << fmt(r.scores.iforest_n[i]) << ',' << fmt(r.scores.mahalanobis_n[i])
        << ',' << fmt(r.result.s[i]) << ',' << (r.result.flags[i] ? 1 : 0) << '\n';
  }
  {
    auto f = open_out(out.file("alpha_sweep.csv"));
    f << "alpha,count\n";
    for (std::size_t i = 0; i < r.alpha_grid.size(); ++i) f << fmt(r.alpha_grid[i]) << ',' << r.alpha_counts[i] << '\n';
  }
  Json j;
  j["alpha"] = r.alpha;
  j["tau"] = cfg.tau;
  j["auto_alpha"] = auto_alpha;
  j["rows"] = d.rows();
  j["flagged"] = r.result.flagged;
  const char* names[3] = {"ldof", "iforest", "mahalanobis"};
  for (int k = 0; k < 3; ++k) {
    j["detectors"][names[k]] = {{"threshold", r.result.detector_threshold[k]},
                                {"elbow_found", r.result.elbow_found[k]},
                                {"count", r.result.detector_counts[k]}};
  }
  const auto& v = r.result.venn;
  j["venn"] = {{"ldof_only", v.ldof_only},
               {"iforest_only", v.iforest_only},
               {"mahalanobis_only", v.mahalanobis_only},
               {"ldof_iforest", v.ldof_iforest},
               {"ldof_mahalanobis", v.ldof_mahalanobis},
               {"iforest_mahalanobis", v.iforest_mahalanobis},
               {"all_three", v.all_three},
               {"consensus_outside", v.consensus_outside}};
  write_json(out.file("outlier_summary.json"), j);
  write_descriptors(out.file("descriptors_clean.csv"), r.clean);
  return r;
}

inline RankResult stage_rank(const DescriptorMatrix& d, const MiConfig& mi, StageOutput& out) {
  const auto r = mrmr_rank(d.x, d.y, d.x.cols(), mi);
  {
    auto f = open_out(out.file("ranking.csv"));
    f << "rank,descriptor,score,relevance\n";
    for (std::size_t i = 0; i < r.order.size(); ++i)
      f << i + 1 << ',' << d.names[r.order[i]] << ',' << fmt(r.scores[i]) << ',' << fmt(r.relevance[r.order[i]]) << '\n';
  }
  const auto corr = pearson_matrix(d.x);
  {
    auto f = open_out(out.file("correlation.csv"));
    f << "descriptor";
    for (const auto& n : d.names) f << ',' << n;
    f << '\n';
    for (std::size_t i = 0; i < d.names.size(); ++i) {
      f << d.names[i];
      for (std::size_t j = 0; j < d.names.size(); ++j) f << ',' << fmt(corr.r(i, j));
      f << '\n';
    }
  }
  return r;
}

inline Json metrics_json(const Metrics& m) {
  return {{"r2", json_number(m.r2)}, {"rmse", json_number(m.rmse)}, {"mae", json_number(m.mae)}};
}

inline Json cv_report_json(const CvReport& rep, const std::vector<ModelSpec>& specs, const CvConfig& cv,
                           const std::vector<std::string>& names) {
  Json j;
  j["folds"] = cv.folds;
  j["seed"] = cv.seed;
  j["k_grid"] = cv.k_grid;
  j["mi_bins"] = cv.mi.bins;
  Json models = Json::array();
  for (const auto& s : specs) {
    Json h = Json::object();
    for (const auto& [k, v] : s.hyper) h[k] = v;
    models.push_back({{"family", to_string(s.family)}, {"hyperparameters", h}});
  }
  j["models"] = models;
  j["fold_of"] = rep.fold_of;
  Json ranks = Json::array();
  for (const auto& order : rep.fold_ranking) {
    Json one = Json::array();
    for (auto i : order) one.push_back(i < names.size() ? names[i] : std::to_string(i));
    ranks.push_back(one);
  }
  j["fold_ranking"] = ranks;
  Json cells = Json::array();
  for (const auto& c : rep.cells)
    cells.push_back({{"family", c.family}, {"k", c.k}, {"fold", c.fold}, {"train", metrics_json(c.train)}, {"val", metrics_json(c.val)}});
  j["cells"] = cells;
  Json agg = Json::array();
  for (const auto& a : rep.aggregates)
    agg.push_back({{"family", a.family},
                   {"k", a.k},
                   {"mean_val_r2", json_number(a.mean_val_r2)},
                   {"sd_val_r2", json_number(a.sd_val_r2)},
                   {"mean_val_rmse", json_number(a.mean_val_rmse)},
                   {"sd_val_rmse", json_number(a.sd_val_rmse)},
                   {"mean_val_mae", json_number(a.mean_val_mae)},
                   {"mean_train_r2", json_number(a.mean_train_r2)}});
  j["aggregates"] = agg;
  const auto& b = rep.best_cell();
  j["best"] = {{"family", b.family}, {"k", b.k}, {"mean_val_rmse", json_number(b.mean_val_rmse)},
               {"mean_val_r2", json_number(b.mean_val_r2)}};
  const auto oof = metrics(rep.targets, rep.oof);
  j["best_oof"] = metrics_json(oof);
  return j;
}

inline CvReport stage_train(const DescriptorMatrix& d, const std::vector<ModelSpec>& specs, const CvConfig& cv,
                            StageOutput& out) {
  auto rep = cross_validate(d, specs, cv);
  write_json(out.file("cv_report.json"), cv_report_json(rep, specs, cv, d.names));
  {
    auto f = open_out(out.file("topk_curve.csv"));
    f << "family,k,mean_val_r2,sd_val_r2,mean_val_rmse\n";
    for (const auto& p : topk_curve(rep))
      f << p.family << ',' << p.k << ',' << fmt(p.mean_val_r2) << ',' << fmt(p.sd_val_r2) << ',' << fmt(p.mean_val_rmse) << '\n';
  }
  {
    auto f = open_out(out.file("predictions.csv"));
    f << "row,target,oof_prediction\n";
    for (std::size_t i = 0; i < rep.oof.size(); ++i) f << i << ',' << fmt(rep.targets[i]) << ',' << fmt(rep.oof[i]) << '\n';
  }
  return rep;
}

inline KanazawaSeries stage_kanazawa(std::span<const FrequencySweep> sweeps, const CrystalConstants& c,
                                     const ViscosityCalibration& cal, StageOutput& out) {
  auto s = kanazawa_predict(sweeps, c, cal);
  write_kanazawa(out.file("kanazawa_predictions.csv"), s);
  auto f = open_out(out.file("kanazawa_skipped.csv"));
  f << "round,reason\n";
  for (const auto& k : s.skipped) {
    std::string reason = k.reason;
    std::replace(reason.begin(), reason.end(), ',', ';');
    std::replace(reason.begin(), reason.end(), '\n', ' ');
    f << k.round_index << ',' << reason << '\n';
  }
  return s;
}

// ---- compare --------------------------------------------------------------

struct ComparePoint {
  double threshold = 0.0;
  std::size_t count = 0;
  std::optional<double> impedance_rmse, kanazawa_rmse;
  double ratio = 0.0;  // kanazawa / impedance; +inf when undefined
};

struct CompareReport {
  std::size_t joined = 0, unmatched = 0;
  double impedance_rmse = 0.0, kanazawa_rmse = 0.0;
  double ratio = 0.0;  // +inf when undefined
  std::vector<ComparePoint> series;
  std::vector<std::string> notes;
};

inline double safe_ratio(double num, double den) {
  if (den > 0.0) return num / den;
  return std::numeric_limits<double>::infinity();
}

// Rows join the Kanazawa point nearest in time, within max_gap_s.
inline CompareReport compare(std::span<const double> timestamps, std::span<const double> targets,
                             std::span<const double> impedance_pred, const KanazawaSeries& kanazawa, double max_gap_s,
                             double step = 0.25) {
  if (timestamps.size() != targets.size() || targets.size() != impedance_pred.size())
    throw InputError("compare: row series differ in length");
  std::vector<KanazawaPoint> k = kanazawa.points;
  std::stable_sort(k.begin(), k.end(), [](const auto& a, const auto& b) { return a.timestamp_s < b.timestamp_s; });
  CompareReport rep;
  std::vector<double> y, yi, yk;
  for (std::size_t i = 0; i < timestamps.size(); ++i) {
    const double t = timestamps[i];
    const auto it = std::lower_bound(k.begin(), k.end(), t, [](const KanazawaPoint& p, double v) { return p.timestamp_s < v; });
    const KanazawaPoint* best = nullptr;
    double gap = std::numeric_limits<double>::infinity();
    if (it != k.end()) {
      best = &*it;
      gap = it->timestamp_s - t;
    }
    if (it != k.begin() && t - std::prev(it)->timestamp_s <= gap) {
      best = &*std::prev(it);
      gap = t - best->timestamp_s;
    }
    if (!best || gap > max_gap_s) {
      ++rep.unmatched;
      continue;
    }
    y.push_back(targets[i]);
    yi.push_back(impedance_pred[i]);
    yk.push_back(best->pred_pct);
  }
  rep.joined = y.size();
  if (rep.unmatched) rep.notes.push_back(std::to_string(rep.unmatched) + " rows without a Kanazawa point within " + fmt(max_gap_s) + " s");
  if (y.empty()) throw InputError("compare: no rows could be joined on timestamps");
  const auto grid = threshold_grid(y, step);
  const auto ci = cumulative_rmse(y, yi, grid), ck = cumulative_rmse(y, yk, grid);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!ci[i].rmse) {
      rep.notes.push_back("no rows at or below threshold " + fmt(grid[i]) + "; point omitted");
      continue;
    }
    rep.series.push_back({grid[i], ci[i].count, ci[i].rmse, ck[i].rmse, safe_ratio(*ck[i].rmse, *ci[i].rmse)});
  }
  rep.impedance_rmse = cumulative_rmse(y, yi, std::array{std::numeric_limits<double>::infinity()})[0].rmse.value();
  rep.kanazawa_rmse = cumulative_rmse(y, yk, std::array{std::numeric_limits<double>::infinity()})[0].rmse.value();
  rep.ratio = safe_ratio(rep.kanazawa_rmse, rep.impedance_rmse);
  return rep;
}

inline Json ratio_json(double r) { return std::isfinite(r) ? Json(r) : Json("undefined"); }

inline Json compare_json(const CompareReport& r) {
  Json j;
  j["joined_rows"] = r.joined;
  j["unmatched_rows"] = r.unmatched;
  j["impedance_rmse"] = r.impedance_rmse;
  j["kanazawa_rmse"] = r.kanazawa_rmse;
  j["ratio_kanazawa_over_impedance"] = ratio_json(r.ratio);
  Json s = Json::array();
  for (const auto& p : r.series)
    s.push_back({{"threshold", p.threshold}, {"n", p.count}, {"impedance_rmse", *p.impedance_rmse},
                 {"kanazawa_rmse", json_number(p.kanazawa_rmse.value_or(NAN))}, {"ratio", ratio_json(p.ratio)}});
  j["cumulative"] = s;
  j["notes"] = r.notes;
  return j;
}

// Half the median spacing of the sorted timestamps.
inline double half_interval(std::span<const double> ts) {
  std::vector<double> t(ts.begin(), ts.end());
  std::sort(t.begin(), t.end());
  std::vector<double> d;
  for (std::size_t i = 1; i < t.size(); ++i)
    if (t[i] > t[i - 1]) d.push_back(t[i] - t[i - 1]);
  if (d.empty()) return 0.0;
  return 0.5 * percentile(d, 0.5);
}

inline CompareReport stage_compare(const DescriptorMatrix& d, std::span<const double> oof, const KanazawaSeries& k,
                                   double step, StageOutput& out) {
  const auto rep = compare(d.timestamps, d.y, oof, k, half_interval(d.timestamps), step);
  write_json(out.file("compare_report.json"), compare_json(rep));
  auto f = open_out(out.file("cumulative_rmse.csv"));
  f << "threshold,n,impedance_rmse,kanazawa_rmse,ratio\n";
  for (const auto& p : rep.series)
    f << fmt(p.threshold) << ',' << p.count << ',' << fmt(*p.impedance_rmse) << ','
      << (p.kanazawa_rmse ? fmt(*p.kanazawa_rmse) : std::string("")) << ','
      << (std::isfinite(p.ratio) ? fmt(p.ratio) : std::string("undefined")) << '\n';
  return rep;
}

// ---- full pipeline --------------------------------------------------------

struct PipelineResult {
  std::optional<CompareReport> compare;
  std::optional<CvReport> cv;
  std::size_t descriptor_rows = 0, clean_rows = 0;
  fs::path manifest;
};

inline void remove_partials(const fs::path& dir) {
  if (!fs::exists(dir)) return;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".partial") fs::remove(e.path());
}

inline PipelineResult run_pipeline(PipelineConfig cfg) {
  validate_config(cfg);
  if (cfg.threads) thread_setting() = cfg.threads;
  const bool simulate = !cfg.skip_simulate;
  std::map<std::string, std::uint64_t> seeds;
  for (const char* s : {"simulate", "fit", "outliers", "train"}) seeds[s] = stage_seed(cfg.seed, s);
  cfg.sim.seed = seeds["simulate"];
  cfg.fit.options.seed = seeds["fit"];
  cfg.outliers.seed = seeds["outliers"];
  cfg.cv.seed = seeds["train"];

  fs::create_directories(cfg.out_dir);
  remove_partials(cfg.out_dir);
  StageOutput out(cfg.out_dir);
  std::vector<std::pair<std::string, std::vector<std::string>>> produced;
  auto run = [&](const std::string& stage, auto&& body) {
    try {
      auto r = body();
      produced.emplace_back(stage, out.commit());
      return r;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e.what());
    }
  };

  std::vector<FrequencySweep> sweeps;
  std::vector<TargetSample> targets;
  if (simulate) {
    auto ds = run("simulate", [&] { return stage_simulate(cfg.sim, out); });
    sweeps = std::move(ds.sweeps);
    targets = std::move(ds.targets);
  } else {
    std::tie(sweeps, targets) = run("load", [&] {
      return std::make_pair(read_sweeps(*cfg.sweeps_in), read_targets(*cfg.targets_in));
    });
  }
  std::optional<FitBounds> fixed;
  if (cfg.bounds_in) fixed = run("load", [&] { return read_bounds(*cfg.bounds_in); });

  PipelineResult res;
  auto fitted = run("fit", [&] { return stage_fit(sweeps, targets, cfg.fit, fixed, out); });
  DescriptorMatrix data = fitted.descriptors.matrix;
  res.descriptor_rows = data.rows();
  if (cfg.outliers_enabled) {
    auto o = run("outliers", [&] { return stage_outliers(data, cfg.outliers, cfg.auto_alpha, out); });
    data = o.clean;
  }
  res.clean_rows = data.rows();
  if (cfg.rank_enabled) run("rank", [&] { return stage_rank(data, cfg.rank, out); });
  if (cfg.train_enabled) res.cv = run("train", [&] { return stage_train(data, cfg.specs, cfg.cv, out); });
  std::optional<KanazawaSeries> kz;
  if (cfg.kanazawa_enabled)
    kz = run("kanazawa", [&] {
      const auto cal = cfg.calibration_in ? read_calibration(*cfg.calibration_in) : ViscosityCalibration::glycerol_water_25c();
      return stage_kanazawa(sweeps, cfg.crystal, cal, out);
    });
  if (cfg.compare_enabled)
    res.compare = run("compare", [&] { return stage_compare(data, res.cv->oof, *kz, cfg.compare_step, out); });

  Json m;
  m["version"] = kVersion;
  m["master_seed"] = cfg.seed;
  Json sj = Json::object();
  for (const auto& [k, v] : seeds) sj[k] = v;
  m["stage_seeds"] = sj;
  Json oj = Json::object();
  for (const auto& [k, v] : cfg.overrides) oj[k] = v;
  m["config"] = oj;
  Json inputs = Json::array();
  for (const auto* p : {&cfg.sweeps_in, &cfg.targets_in, &cfg.bounds_in, &cfg.calibration_in})
    if (*p && (!simulate || (p != &cfg.sweeps_in && p != &cfg.targets_in)))
      inputs.push_back({{"path", (*p)->string()}, {"sha256", sha256_file(**p)}});
  m["inputs"] = inputs;
  Json stages = Json::array();
  for (const auto& [stage, files] : produced) {
    Json fj = Json::array();
    for (const auto& f : files)
      fj.push_back({{"file", f}, {"bytes", fs::file_size(cfg.out_dir / f)}, {"sha256", sha256_file(cfg.out_dir / f)}});
    stages.push_back({{"stage", stage}, {"artifacts", fj}});
  }
  m["stages"] = stages;
  res.manifest = cfg.out_dir / "manifest.json";
  write_json(res.manifest, m);
  return res;
}

}  // namespace qcm
