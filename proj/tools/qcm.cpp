#include <CLI11.hpp>

#include <iostream>

#include "qcm/pipeline.hpp"

namespace {

using namespace qcm;

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kStageError = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  unsigned threads = 0;
};

PipelineConfig resolve(const Globals& g) {
  PipelineConfig c = g.config.empty() ? PipelineConfig{} : load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (!g.out_dir.empty()) c.out_dir = g.out_dir;
  if (g.threads) c.threads = g.threads;
  if (c.threads) thread_setting() = c.threads;
  return c;
}

void require(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("missing ") + what);
  if (!fs::exists(path)) throw ConfigError(std::string(what) + " not found: " + path);
}

// Runs one stage against the output directory, committing its files on success.
template <class Fn>
void stage(const PipelineConfig& c, const std::string& name, Fn&& body) {
  StageOutput out(c.out_dir);
  try {
    body(out);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
  for (const auto& f : out.commit()) std::cout << (c.out_dir / f).string() << '\n';
}

DescriptorMatrix filter_flagged(const DescriptorMatrix& d, const std::string& report) {
  if (report.empty()) return d;
  const auto t = read_csv(report);
  expect_header(t, {"row", "ldof", "iforest", "mahalanobis", "S", "flag"}, report);
  if (t.rows.size() != d.rows()) throw InputError("outlier report has " + std::to_string(t.rows.size()) + " rows, descriptors " + std::to_string(d.rows()));
  std::vector<std::size_t> keep;
  for (const auto& r : t.rows)
    if (parse_int(r.cells[5], where(report, r)) == 0) keep.push_back(static_cast<std::size_t>(parse_int(r.cells[0], where(report, r))));
  return d.select_rows(keep);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QCM impedance line-shape inference pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "flat key = value config file");
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--out-dir", g.out_dir, "artifact directory");
  app.add_option("--threads", g.threads, "worker threads (0 = all cores)");

  auto* sim = app.add_subcommand("simulate", "BvD sweeps and reference targets");

  std::string sweeps, targets, bounds_path, fits_path, descriptors, outlier_report, predictions, kanazawa_path, calibration;
  auto* fit = app.add_subcommand("fit", "line-shape fits, bounds, QC and descriptors");
  fit->add_option("--sweeps", sweeps, "sweep CSV")->required();
  fit->add_option("--targets", targets, "target CSV")->required();
  fit->add_option("--bounds", bounds_path, "fixed bounds CSV (skips deriving them)");

  auto* db = app.add_subcommand("derive-bounds", "P2/P98 bounds from unbounded fits");
  db->add_option("--fits", fits_path, "fit-record CSV of unbounded fits")->required();

  auto* qc = app.add_subcommand("qc", "drop fits below the R^2 threshold and build descriptors");
  double qc_threshold = kQcThreshold;
  qc->add_option("--fits", fits_path, "fit-record CSV")->required();
  qc->add_option("--targets", targets, "target CSV")->required();
  qc->add_option("--threshold", qc_threshold, "minimum R^2");

  auto* outl = app.add_subcommand("outliers", "consensus outlier scoring");
  std::optional<double> alpha, tau;
  bool auto_alpha = false;
  outl->add_option("--descriptors", descriptors, "descriptor CSV")->required();
  outl->add_option("--alpha", alpha, "LDOF weight");
  outl->add_option("--tau", tau, "consensus threshold");
  outl->add_flag("--auto-alpha", auto_alpha, "pick alpha at the knee of the alpha sweep");

  auto* rank = app.add_subcommand("rank", "mRMR ranking and correlation matrix");
  rank->add_option("--descriptors", descriptors, "descriptor CSV")->required();

  auto* train = app.add_subcommand("train", "cross-validated regression");
  std::string k_grid, families;
  train->add_option("--descriptors", descriptors, "descriptor CSV")->required();
  train->add_option("--outliers", outlier_report, "outlier report; flagged rows are removed");
  train->add_option("--k-grid", k_grid, "comma-separated top-k values");
  train->add_option("--families", families, "comma-separated model families");

  auto* kz = app.add_subcommand("kanazawa", "conductance half-bandwidth baseline");
  kz->add_option("--sweeps", sweeps, "sweep CSV")->required();
  kz->add_option("--calibration", calibration, "viscosity calibration CSV (pct,eta_pa_s,rho_kg_m3)");

  auto* cmp = app.add_subcommand("compare", "cumulative RMSE against the baseline");
  cmp->add_option("--descriptors", descriptors, "descriptor CSV used for training")->required();
  cmp->add_option("--predictions", predictions, "predictions.csv from train")->required();
  cmp->add_option("--kanazawa", kanazawa_path, "kanazawa_predictions.csv")->required();

  auto* pipe = app.add_subcommand("pipeline", "simulate -> fit -> outliers -> rank -> train -> kanazawa -> compare");
  bool skip_sim = false;
  pipe->add_flag("--skip-simulate", skip_sim, "use --sweeps/--targets instead of simulating");
  pipe->add_option("--sweeps", sweeps, "sweep CSV");
  pipe->add_option("--targets", targets, "target CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    PipelineConfig c = resolve(g);
    if (*sim) {
      validate_config(c);
      c.sim.seed = stage_seed(c.seed, "simulate");
      stage(c, "simulate", [&](StageOutput& o) { stage_simulate(c.sim, o); });
    } else if (*fit) {
      require(sweeps, "sweep CSV");
      require(targets, "target CSV");
      if (!bounds_path.empty()) require(bounds_path, "bounds CSV");
      validate_config(c);
      c.fit.options.seed = stage_seed(c.seed, "fit");
      stage(c, "fit", [&](StageOutput& o) {
        std::optional<FitBounds> b;
        if (!bounds_path.empty()) b = read_bounds(bounds_path);
        stage_fit(read_sweeps(sweeps), read_targets(targets), c.fit, b, o);
      });
    } else if (*db) {
      require(fits_path, "fit-record CSV");
      stage(c, "derive-bounds", [&](StageOutput& o) {
        write_bounds(o.file("bounds.csv"), derive_bounds(read_fit_records(fits_path), c.fit.min_bound_fits));
      });
    } else if (*qc) {
      require(fits_path, "fit-record CSV");
      require(targets, "target CSV");
      stage(c, "qc", [&](StageOutput& o) {
        const auto recs = read_fit_records(fits_path);
        const auto q = qc_filter(recs, qc_threshold);
        std::vector<int> rounds;
        for (const auto& r : recs) rounds.push_back(r.round_index);
        std::sort(rounds.begin(), rounds.end());
        rounds.erase(std::unique(rounds.begin(), rounds.end()), rounds.end());
        const auto d = build_descriptors(q.retained, read_targets(targets), rounds);
        write_qc_drops(o.file("qc_drops.csv"), q.dropped);
        write_descriptors(o.file("descriptors.csv"), d.matrix);
      });
    } else if (*outl) {
      require(descriptors, "descriptor CSV");
      if (alpha) c.outliers.alpha = *alpha;
      if (tau) c.outliers.tau = *tau;
      c.auto_alpha = c.auto_alpha || auto_alpha;
      validate_config(c);
      c.outliers.seed = stage_seed(c.seed, "outliers");
      stage(c, "outliers", [&](StageOutput& o) { stage_outliers(read_descriptors(descriptors), c.outliers, c.auto_alpha, o); });
    } else if (*rank) {
      require(descriptors, "descriptor CSV");
      validate_config(c);
      stage(c, "rank", [&](StageOutput& o) { stage_rank(read_descriptors(descriptors), c.rank, o); });
    } else if (*train) {
      require(descriptors, "descriptor CSV");
      if (!outlier_report.empty()) require(outlier_report, "outlier report");
      if (!k_grid.empty()) apply_setting(c, "train.k_grid", k_grid);
      if (!families.empty()) apply_setting(c, "train.families", families);
      validate_config(c);
      c.cv.seed = stage_seed(c.seed, "train");
      stage(c, "train", [&](StageOutput& o) {
        stage_train(filter_flagged(read_descriptors(descriptors), outlier_report), c.specs, c.cv, o);
      });
    } else if (*kz) {
      require(sweeps, "sweep CSV");
      if (!calibration.empty()) require(calibration, "calibration CSV");
      validate_config(c);
      stage(c, "kanazawa", [&](StageOutput& o) {
        const auto cal = calibration.empty() ? ViscosityCalibration::glycerol_water_25c() : read_calibration(calibration);
        stage_kanazawa(read_sweeps(sweeps), c.crystal, cal, o);
      });
    } else if (*cmp) {
      require(descriptors, "descriptor CSV");
      require(predictions, "predictions CSV");
      require(kanazawa_path, "kanazawa CSV");
      validate_config(c);
      stage(c, "compare", [&](StageOutput& o) {
        const auto d = read_descriptors(descriptors);
        const auto t = read_csv(predictions);
        expect_header(t, {"row", "target", "oof_prediction"}, predictions);
        if (t.rows.size() != d.rows())
          throw InputError("predictions have " + std::to_string(t.rows.size()) + " rows, descriptors " + std::to_string(d.rows()));
        std::vector<double> oof(d.rows());
        for (const auto& r : t.rows) {
          const auto i = parse_int(r.cells[0], where(predictions, r));
          if (i < 0 || static_cast<std::size_t>(i) >= d.rows()) throw InputError(where(predictions, r) + ": row index out of range");
          oof[static_cast<std::size_t>(i)] = parse_double(r.cells[2], where(predictions, r));
        }
        stage_compare(d, oof, read_kanazawa(kanazawa_path), c.compare_step, o);
      });
    } else if (*pipe) {
      if (skip_sim) c.skip_simulate = true;
      if (!sweeps.empty()) c.sweeps_in = fs::path(sweeps);
      if (!targets.empty()) c.targets_in = fs::path(targets);
      const auto r = run_pipeline(c);
      std::cout << "manifest " << r.manifest.string() << '\n';
      std::cout << "descriptor rows " << r.descriptor_rows << ", after outliers " << r.clean_rows << '\n';
      if (r.cv) {
        const auto& b = r.cv->best_cell();
        std::cout << "best " << b.family << " k=" << b.k << " val R2 " << b.mean_val_r2 << " RMSE " << b.mean_val_rmse << '\n';
      }
      if (r.compare)
        std::cout << "RMSE impedance " << r.compare->impedance_rmse << ", Kanazawa " << r.compare->kanazawa_rmse << ", ratio "
                  << (std::isfinite(r.compare->ratio) ? std::to_string(r.compare->ratio) : "undefined") << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const StageError& e) {
    std::cerr << e.what() << '\n';
    return kStageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageError;
  }
  return kOk;
}
