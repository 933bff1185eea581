// One PASS/FAIL line per acceptance criterion. argv[1] is a scratch directory.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "qcm/pipeline.hpp"
#include "synthetic.hpp"

using namespace qcm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int prec = 6) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return percentile_sorted(v, 0.5);
}

// Golden-section search for a minimum of f on [a, b].
double golden_min(const std::function<double(double)>& f, double a, double b) {
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - g * (b - a), d = a + g * (b - a);
  while (b - a > 1e-6) {
    if (f(c) < f(d)) b = d;
    else a = c;
    c = b - g * (b - a);
    d = a + g * (b - a);
  }
  return 0.5 * (a + b);
}

// Argmin over a uniform scan, refined by golden section inside the winning cell.
double scan_min(const std::function<double(double)>& f, double lo, double hi, double step) {
  double best = lo, fb = f(lo);
  for (double x = lo; x <= hi; x += step)
    if (const double v = f(x); v < fb) {
      fb = v;
      best = x;
    }
  return golden_min(f, best - step, best + step);
}

Outcome c1_bvd() {
  const BvdParams p;
  const double fs = series_resonance(p), fp = parallel_resonance(p);
  const double scan_s = scan_min([&](double f) { return std::abs(motional_impedance(p, f)); }, fs - 2000.0, fs + 2000.0, 0.05);
  const double scan_p = scan_min([&](double f) { return -std::abs(bvd_impedance(p, f)); }, fp - 2000.0, fp + 2000.0, 0.05);
  // Hand value: 1 / (2 pi sqrt(9e-3 * 28e-15)) = 1.0025819e7.
  const bool ok = std::abs(fs - scan_s) <= 0.1 && std::abs(fp - scan_p) <= 0.1 && std::abs(fs - 1.0025819e7) <= 1.0 &&
                  std::abs(fp - 1.00539e7) <= 50.0;
  return {ok, "f_s " + num(fs, 10) + " scan " + num(scan_s, 10) + "; f_p " + num(fp, 10) + " scan " + num(scan_p, 10)};
}

Outcome c2_simulation() {
  SimulationConfig cfg;
  cfg.schedule.rounds = 100;
  const auto ds = generate_dataset(cfg);
  double dev = 0.0;
  for (std::size_t r = 0; r < ds.tracked_peak_hz.size(); ++r) dev = std::max(dev, std::abs(ds.tracked_peak_hz[r] - ds.target_peak_hz[r]));
  const auto [tlo, thi] = std::minmax_element(ds.target_peak_hz.begin(), ds.target_peak_hz.end());
  const auto [klo, khi] = std::minmax_element(ds.tracked_peak_hz.begin(), ds.tracked_peak_hz.end());
  const double pp_target = *thi - *tlo, pp_tracked = *khi - *klo;
  const bool ok = ds.tracked_peak_hz.size() == 100 && std::abs(pp_target - 50.0) <= 1e-9 && std::abs(pp_tracked - 50.0) <= 1.0 &&
                  dev <= 0.5;
  return {ok, "commanded pk-pk " + num(pp_target) + " Hz, tracked pk-pk " + num(pp_tracked) + " Hz, max deviation " +
                  num(dev, 3) + " Hz"};
}

Outcome c3_fits() {
  const GaussianPair truth{1.0, -0.3, 0.5, 0.4, 0.6, 0.8};
  const auto want = truth.to_array();
  std::vector<double> x(1000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = -3.0 + 6.0 * static_cast<double>(i) / 999.0;
  std::array<std::vector<double>, 6> errs;
  double worst = 1.0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::normal_distribution<double> nd(0.0, 0.01);  // 1% of the unit peak
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = truth(x[i]) + nd(rng);
    const auto rec = fit_gauss2(x, y);
    if (!rec.ok()) return {false, "trace " + std::to_string(seed) + " failed: " + rec.error};
    for (std::size_t j = 0; j < 6; ++j) errs[j].push_back(std::abs(rec.params[j] - want[j]) / std::abs(want[j]));
    worst = std::min(worst, rec.r2);
  }
  double med = 0.0;
  for (const auto& e : errs) med = std::max(med, median(e));

  SimulationConfig cfg;
  cfg.schedule.rounds = 100;
  const auto fit = fit_dataset(generate_dataset(cfg).sweeps, FitConfig{});
  double clean_min = 1.0;
  for (const auto& r : fit.records) clean_min = std::min(clean_min, r.ok() ? r.r2 : -INFINITY);
  const bool ok = med <= 0.02 && worst >= 0.99 && clean_min >= 0.97;
  return {ok, "200 traces: worst per-parameter median error " + num(100 * med, 3) + "%, min R2 " + num(worst, 5) +
                  "; clean simulation min R2 " + num(clean_min, 5)};
}

Outcome c4_bounds_qc() {
  std::vector<FitRecord> recs;
  for (int i = 1; i <= 100; ++i) {
    FitRecord r;
    r.kind = FeatureKind::R;
    r.round_index = i;
    r.r2 = 1.0;
    r.params.assign(6, static_cast<double>(i));
    recs.push_back(r);
  }
  const auto b = derive_bounds(recs);
  const double lo = b[FeatureKind::R].lower[0], hi = b[FeatureKind::R].upper[0];
  // Index q (n - 1): 1 + 0.02 * 99 = 2.98, 1 + 0.98 * 99 = 98.02.
  const bool pct_ok = std::abs(lo - 2.98) <= 1e-12 && std::abs(hi - 98.02) <= 1e-12;

  recs[3].r2 = 0.949;
  recs[7].r2 = 0.95;
  const auto q = qc_filter(recs);
  const bool qc_ok = q.dropped.size() == 1 && q.dropped[0].round_index == 4 && q.retained.size() == 99;
  return {pct_ok && qc_ok, "P2 " + num(lo) + ", P98 " + num(hi) + "; QC dropped " + std::to_string(q.dropped.size()) +
                               " of 100 (R2 0.949 out, 0.95 kept)"};
}

Outcome c5_outliers() {
  double precision = 0.0, recall = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto data = qcm_test::contaminated_blob(648, 10, 0.05, seed);
    ConsensusConfig cfg;
    cfg.seed = seed;
    const auto r = consensus(run_detectors(data.x, cfg), cfg);
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t k = 0; k < 648; ++k) {
      tp += r.flags[k] && data.truth[k];
      fp += r.flags[k] && !data.truth[k];
      fn += !r.flags[k] && data.truth[k];
    }
    precision += tp + fp > 0 ? tp / (tp + fp) : 0.0;
    recall += tp / (tp + fn);
  }
  precision /= 20;
  recall /= 20;

  DetectorScores s;
  s.ldof_n = {0.9, 0.0, 0.45};
  s.iforest_n = {0.2, 0.0, 0.6};
  s.mahalanobis_n = {0.1, 0.0, 0.6};
  const auto r = consensus(s, ConsensusConfig{}, std::array<double, 3>{0.7, 0.7, 0.7});
  const bool outside = r.flags[2] && r.detector_flags[2] == std::array<bool, 3>{false, false, false} && r.venn.consensus_outside == 1;

  const std::vector<double> grid{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  const std::vector<std::size_t> counts{100, 40, 20, 15, 14, 13};
  const std::vector<double> y(counts.begin(), counts.end());
  const bool knee = knee_index(grid, y) == 2 && elbow_alpha(grid, counts) == 0.4;

  return {precision >= 0.8 && recall >= 0.8 && outside && knee,
          "precision " + num(precision, 4) + ", recall " + num(recall, 4) + "; S(0.45,0.6,0.6) = " + num(r.s[2], 3) +
              (outside ? " flagged outside every detector" : " NOT outside") + "; knee index " +
              std::to_string(knee_index(grid, y))};
}

// Entropy route with bins from counting strictly smaller values.
double mi_oracle(std::span<const double> x, std::span<const double> y) {
  auto bins = [](std::span<const double> v) {
    std::vector<int> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::size_t below = 0;
      for (double w : v) below += w < v[i];
      out[i] = static_cast<int>(below * 8 / v.size());
    }
    return out;
  };
  auto entropy = [](const auto& keys) {
    std::map<std::decay_t<decltype(keys[0])>, double> counts;
    for (const auto& k : keys) counts[k] += 1.0;
    double h = 0.0;
    for (const auto& [k, c] : counts) h -= c / static_cast<double>(keys.size()) * std::log2(c / static_cast<double>(keys.size()));
    return h;
  };
  const auto bx = bins(x), by = bins(y);
  std::vector<std::pair<int, int>> joint;
  for (std::size_t i = 0; i < bx.size(); ++i) joint.emplace_back(bx[i], by[i]);
  return entropy(bx) + entropy(by) - entropy(joint);
}

Outcome c6_mrmr() {
  std::size_t matched = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(100 + trial);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> w(-1.0, 1.0);
    std::vector<double> y(200);
    for (auto& v : y) v = nd(rng);
    std::vector<std::vector<double>> cols;
    for (int c = 0; c < 6; ++c) {
      std::vector<double> col(200);
      for (auto& v : col) v = nd(rng);
      const double a = w(rng), b = c > 0 ? w(rng) : 0.0;
      for (std::size_t i = 0; i < 200; ++i) col[i] += 2.0 * a * y[i] + (c > 0 ? b * cols[0][i] : 0.0);
      cols.push_back(col);
    }
    Matrix x(200, 6);
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t r = 0; r < 200; ++r) x(r, c) = cols[c][r];
    const auto got = mrmr_rank(x, y, 6);
    std::vector<double> rel(6);
    for (std::size_t c = 0; c < 6; ++c) rel[c] = mi_oracle(cols[c], y);
    std::vector<std::size_t> chosen;
    bool ok = true;
    for (std::size_t step = 0; step < 6 && ok; ++step) {
      double best = -INFINITY, mine = -INFINITY;
      for (std::size_t j = 0; j < 6; ++j) {
        if (std::find(chosen.begin(), chosen.end(), j) != chosen.end()) continue;
        double red = 0.0;
        for (auto s : chosen) red += mi_oracle(cols[j], cols[s]);
        const double score = rel[j] - (chosen.empty() ? 0.0 : red / static_cast<double>(chosen.size()));
        best = std::max(best, score);
        if (j == got.order[step]) mine = score;
      }
      ok = mine >= best - 1e-9 && std::abs(got.scores[step] - mine) <= 1e-9;
      chosen.push_back(got.order[step]);
    }
    matched += ok;
  }

  std::mt19937_64 rng(42);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> a(10000), b(10000);
  for (auto& v : a) v = nd(rng);
  for (auto& v : b) v = nd(rng);
  const double self = mutual_information(a, a), indep = mutual_information(a, b);
  return {matched == 100 && std::abs(self - 3.0) <= 1e-9 && indep <= 0.02,
          std::to_string(matched) + "/100 trials match brute force; I(X;X) = " + num(self, 6) + " bits; independent " +
              num(indep, 3) + " bits"};
}

// Shared by criteria 7 and 8.
PipelineConfig noisy_config(const fs::path& dir) {
  auto c = parse_config("simulate.rounds = 700\nsimulate.noise_rel = 0.01\n");
  c.out_dir = dir;
  return c;
}

Outcome c8_benchmark(const PipelineResult& res) {
  const auto& best = res.cv->best_cell();
  double r20 = NAN, r52 = NAN;
  for (const auto& p : topk_curve(*res.cv)) {
    if (p.family != best.family) continue;
    if (p.k == 20) r20 = p.mean_val_r2;
    if (p.k == 52) r52 = p.mean_val_r2;
  }
  const bool ok = best.mean_val_r2 >= 0.9 && std::abs(r20 - r52) <= 0.05 * std::abs(r52);
  return {ok, std::to_string(res.clean_rows) + " rows; best " + best.family + " k=" + std::to_string(best.k) + " val R2 " +
                  num(best.mean_val_r2, 6) + "; R2 at k=20 " + num(r20, 6) + ", k=52 " + num(r52, 6)};
}

Outcome c7_leakage(const fs::path& clean_csv) {
  const auto base = read_descriptors(clean_csv);
  const auto specs = default_specs();
  std::map<std::string, std::vector<double>> per_family;
  for (std::uint64_t perm = 0; perm < 10; ++perm) {
    auto d = base;
    std::mt19937_64 rng(7000 + perm);
    std::shuffle(d.y.begin(), d.y.end(), rng);
    CvConfig cv;
    cv.seed = perm;
    const auto rep = cross_validate(d, specs, cv);
    // Each family at the k it would select.
    std::map<std::string, double> best;
    for (const auto& a : rep.aggregates)
      if (!best.count(a.family) || a.mean_val_r2 > best[a.family]) best[a.family] = a.mean_val_r2;
    for (const auto& [f, r2] : best) per_family[f].push_back(r2);
  }
  bool ok = true;
  std::string detail;
  for (const auto& [f, v] : per_family) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    ok = ok && m >= -0.2 && m <= 0.05;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    detail += f + " " + num(m, 3) + " [" + num(*lo, 3) + ", " + num(*hi, 3) + "]; ";
  }
  return {ok, std::to_string(base.rows()) + " rows, mean val R2 per family (range over permutations): " + detail};
}

int cli(const std::string& args) {
  const std::string cmd = std::string(QCM_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Outcome c10_determinism(const fs::path& work) {
  const auto a = work / "rerun_a", b = work / "rerun_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const int ra = cli("pipeline --seed 7 --out-dir " + a.string()), rb = cli("pipeline --seed 7 --out-dir " + b.string());
  if (ra != 0 || rb != 0) return {false, "pipeline exit codes " + std::to_string(ra) + ", " + std::to_string(rb)};
  std::size_t files = 0, same = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    same += fs::exists(b / e.path().filename()) && slurp(e.path()) == slurp(b / e.path().filename());
  }
  const auto n_b = static_cast<std::size_t>(std::distance(fs::directory_iterator(b), fs::directory_iterator{}));
  return {files == same && files == n_b && files > 0 && fs::exists(a / "manifest.json"),
          std::to_string(same) + "/" + std::to_string(files) + " artifacts byte-identical (manifest included)"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "qcm_acceptance";
  fs::create_directories(work);
  int failed = 0;
  auto report = [&](int id, const char* what, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << what << "): " << o.detail << " [" << num(secs, 3)
              << " s]" << std::endl;
  };

  report(1, "BvD analytics", c1_bvd);
  report(2, "simulation fidelity", c2_simulation);
  report(3, "fit round trip", c3_fits);
  report(4, "bounds and QC", c4_bounds_qc);
  report(5, "outlier ensemble", c5_outliers);
  report(6, "mRMR correctness", c6_mrmr);

  std::optional<PipelineResult> noisy;
  const auto noisy_dir = work / "noisy";
  double noisy_secs = 0.0;
  {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fs::remove_all(noisy_dir);
      noisy = run_pipeline(noisy_config(noisy_dir));
    } catch (const std::exception& e) {
      std::cout << "noisy pipeline failed: " << e.what() << std::endl;
    }
    noisy_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  report(7, "leakage guard", [&] {
    if (!noisy) return Outcome{false, "noisy pipeline did not run"};
    return c7_leakage(noisy_dir / "descriptors_clean.csv");
  });
  report(8, "end-to-end benchmark", [&] {
    if (!noisy) return Outcome{false, "noisy pipeline did not run"};
    auto o = c8_benchmark(*noisy);
    o.detail += "; pipeline " + num(noisy_secs, 3) + " s";
    return o;
  });
  report(9, "Kanazawa oracle", [] {
    // 1e7^1.5 * sqrt(1000 * 1e-3 / (pi * 2650 * 2.947e10)) = 3.16228e10 * 6.38427e-8
    const double g = gamma_from_viscosity(1e-3, 1000.0);
    std::vector<double> f(20001), y(20001);
    for (std::size_t i = 0; i < f.size(); ++i) {
      f[i] = -50000.0 + 5.0 * static_cast<double>(i);
      y[i] = 1.0 / (1.0 + std::pow(f[i] / 500.0, 2));
    }
    const double lor = extract_gamma(f, y).gamma_hz;
    const CrystalConstants c;
    const double back = gamma_from_viscosity(viscosity_from_gamma(g, c, 1000.0), 1000.0, c);
    const bool ok = std::abs(g - 3.16227766e10 * 6.38427e-8) <= 0.5 && std::abs(g - 2.01e3) <= 10.0 &&
                    std::abs(lor - 500.0) <= 0.5 && std::abs(back - g) <= 1e-12 * g;
    return Outcome{ok, "water Gamma " + num(g, 6) + " Hz; Lorentzian c=500 -> " + num(lor, 6) + " Hz; round trip rel err " +
                           num(std::abs(back - g) / g, 3)};
  });
  report(10, "determinism", [&] { return c10_determinism(work); });

  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
