#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "qcm/bvd.hpp"
#include "qcm/csv_io.hpp"
#include "qcm/kanazawa.hpp"

using namespace qcm;

namespace {

std::vector<double> grid(double lo, double hi, std::size_t n) {
  std::vector<double> f(n);
  for (std::size_t i = 0; i < n; ++i) f[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return f;
}

double lorentz(double x, double a, double b, double c, double d) { return a / (1.0 + std::pow((x - b) / c, 2)) + d; }

// Conductance sweep whose G is an exact Lorentzian; +-1000 half widths so the tails leave no baseline.
FrequencySweep lorentz_sweep(double f_r, double gamma, int round) {
  FrequencySweep s;
  s.kind = FeatureKind::G;
  s.round_index = round;
  s.timestamp_s = 36.0 * round;
  s.freq_hz = grid(f_r - 1000.0 * gamma, f_r + 1000.0 * gamma, 200001);
  for (double f : s.freq_hz) s.z_ohm.emplace_back(1.0 / lorentz(f, 2e-3, f_r, gamma, 0.0), 0.0);
  return s;
}

}  // namespace

TEST(Kanazawa, WaterHalfBandwidthByHand) {
  // 1e7^1.5 = 3.16228e10; pi * 2650 * 2.947e10 = 2.45346e14; sqrt(1 / 2.45346e14) = 6.38427e-8
  const double hand = 3.16227766e10 * 6.38427e-8;
  const double g = gamma_from_viscosity(1e-3, 1000.0);
  EXPECT_NEAR(g, hand, 0.5);
  EXPECT_NEAR(g, 2.01e3, 10.0);
}

TEST(Kanazawa, LorentzianHalfWidthIsC) {
  const auto f = grid(-50000.0, 50000.0, 20001);
  std::vector<double> g, shifted;
  for (double x : f) {
    g.push_back(lorentz(x, 1.0, 0.0, 500.0, 0.0));
    shifted.push_back(lorentz(x, 1.0, 0.0, 500.0, 0.2));
  }
  const auto r = extract_gamma(f, g);
  EXPECT_NEAR(r.gamma_hz, 500.0, 0.5);
  EXPECT_NEAR(r.f_r_hz, 0.0, 0.5);
  const auto s = extract_gamma(f, shifted);
  EXPECT_NEAR(s.gamma_hz, r.gamma_hz, 1e-9);
  EXPECT_NEAR(s.f_r_hz, r.f_r_hz, 1e-9);
}

TEST(Kanazawa, BvdSweepMatchesOversampledGrid) {
  const auto p = apply_liquid_load(BvdParams{}, LiquidLoad{});
  const auto window = locate_windows(p)[index_of(FeatureKind::G)];
  auto reading = [&](std::size_t n) {
    FrequencySweep s;
    s.freq_hz = grid(window.center_hz - 0.5 * window.span_hz, window.center_hz + 0.5 * window.span_hz, n);
    s.z_ohm = bvd_sweep(p, s.freq_hz);
    return extract_gamma(derive_observables(s, Observable::G)).gamma_hz;
  };
  const double coarse = reading(kSweepPoints), dense = reading(100 * kSweepPoints);
  EXPECT_NEAR(coarse, dense, 0.02 * dense);
}

TEST(Kanazawa, ExtractGammaRejectsFlatTraces) {
  const auto f = grid(0.0, 100.0, 50);
  EXPECT_THROW(extract_gamma(f, std::vector<double>(50, 1.0)), InputError);
  EXPECT_THROW(extract_gamma(std::span(f).first(5), std::vector<double>(5, 1.0)), InputError);
}

TEST(Kanazawa, ViscosityRoundTripAndSquareLaw) {
  const CrystalConstants c;
  for (double eta : {1e-5, 8.9e-4, 1e-3, 0.05, 1.4}) {
    const double g = gamma_from_viscosity(eta, 1100.0, c);
    EXPECT_NEAR(viscosity_from_gamma(g, c, 1100.0), eta, 1e-12 * eta);
    EXPECT_NEAR(gamma_from_viscosity(viscosity_from_gamma(g, c, 1100.0), 1100.0, c), g, 1e-12 * g);
    EXPECT_NEAR(viscosity_from_gamma(2.0 * g, c, 1100.0), 4.0 * eta, 4e-12 * eta);
  }
  EXPECT_THROW(viscosity_from_gamma(0.0, c, 1000.0), InputError);
  EXPECT_THROW(viscosity_from_gamma(100.0, c, -1.0), InputError);
}

TEST(Calibration, KnotIdentityAndBetweenKnots) {
  const auto cal = ViscosityCalibration::glycerol_water_25c();
  for (const auto& k : cal.knots()) {
    const auto inv = cal.concentration(k.eta_pa_s);
    EXPECT_EQ(inv.pct, k.pct);
    EXPECT_FALSE(inv.clamped);
  }
  EXPECT_EQ(cal.concentration(cal.knots().front().eta_pa_s).pct, 0.0);
  const auto& ks = cal.knots();
  for (std::size_t i = 0; i + 1 < ks.size(); ++i) {
    double last = ks[i].pct;
    for (int j = 1; j < 10; ++j) {
      const double eta = ks[i].eta_pa_s + (ks[i + 1].eta_pa_s - ks[i].eta_pa_s) * j / 10.0;
      const double c = cal.concentration(eta).pct;
      EXPECT_GT(c, ks[i].pct);
      EXPECT_LT(c, ks[i + 1].pct);
      EXPECT_GE(c, last);
      last = c;
    }
  }
}

TEST(Calibration, ClampsOutsideTheTable) {
  const auto cal = ViscosityCalibration::glycerol_water_25c();
  auto lo = cal.concentration(1e-4);
  EXPECT_EQ(lo.pct, 0.0);
  EXPECT_TRUE(lo.clamped);
  auto hi = cal.concentration(1.0);
  EXPECT_EQ(hi.pct, cal.knots().back().pct);
  EXPECT_TRUE(hi.clamped);
}

TEST(Calibration, NonMonotoneTableRejected) {
  EXPECT_THROW(ViscosityCalibration({{0.0, 1e-3, 1000.0}, {1.0, 0.9e-3, 1002.0}}), InputError);
  EXPECT_THROW(ViscosityCalibration({{1.0, 1e-3, 1000.0}, {0.5, 1.1e-3, 1002.0}}), InputError);
  EXPECT_THROW(ViscosityCalibration({{0.0, 1e-3, 1000.0}}), InputError);
}

TEST(Calibration, DataFileMatchesBuiltInTable) {
  const auto file = read_calibration(std::filesystem::path(QCM_DATA_DIR) / "glycerol_water_25C.csv");
  const auto built = ViscosityCalibration::glycerol_water_25c();
  ASSERT_EQ(file.knots().size(), built.knots().size());
  for (std::size_t i = 0; i < built.knots().size(); ++i) {
    EXPECT_EQ(file.knots()[i].pct, built.knots()[i].pct);
    EXPECT_EQ(file.knots()[i].eta_pa_s, built.knots()[i].eta_pa_s);
    EXPECT_EQ(file.knots()[i].rho_kg_m3, built.knots()[i].rho_kg_m3);
  }
}

TEST(KanazawaPredict, RecoversConcentrationFromConsistentSpectra) {
  const auto cal = ViscosityCalibration::glycerol_water_25c();
  const CrystalConstants c;
  std::vector<FrequencySweep> sweeps;
  std::vector<double> truth;
  int round = 0;
  for (double want : {0.25, 0.5, 0.8, 1.0, 1.37, 1.6, 2.0}) {
    // Bisect eta on the calibration so the truth sits on the same curve.
    double lo = cal.knots().front().eta_pa_s, hi = cal.knots().back().eta_pa_s;
    for (int it = 0; it < 200; ++it) (cal.concentration(0.5 * (lo + hi)).pct < want ? lo : hi) = 0.5 * (lo + hi);
    const double eta = 0.5 * (lo + hi);
    const double gamma = gamma_from_viscosity(eta, cal.density(want), c);
    sweeps.push_back(lorentz_sweep(1.0e7 - gamma, gamma, round++));
    truth.push_back(want);
  }
  // Other kinds are ignored.
  FrequencySweep other = sweeps.front();
  other.kind = FeatureKind::R;
  sweeps.push_back(other);

  const auto series = kanazawa_predict(sweeps, c, cal);
  ASSERT_EQ(series.points.size(), truth.size());
  EXPECT_TRUE(series.skipped.empty());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    EXPECT_NEAR(series.points[i].pred_pct, truth[i], 0.02 * truth[i]) << i;
    EXPECT_EQ(series.points[i].round_index, static_cast<int>(i));
    EXPECT_FALSE(series.points[i].clamped);
  }
}

TEST(KanazawaPredict, ConstantViscosityGivesConstantSeries) {
  const auto cal = ViscosityCalibration::glycerol_water_25c();
  const double gamma = gamma_from_viscosity(9.5e-4, 1002.0);
  std::vector<FrequencySweep> sweeps;
  for (int r = 0; r < 4; ++r) sweeps.push_back(lorentz_sweep(1.0e7 - gamma, gamma, r));
  const auto s = kanazawa_predict(sweeps, CrystalConstants{}, cal);
  ASSERT_EQ(s.points.size(), 4u);
  for (const auto& p : s.points) EXPECT_EQ(p.pred_pct, s.points[0].pred_pct);
}

TEST(KanazawaPredict, MonotoneInGamma) {
  const auto cal = ViscosityCalibration::glycerol_water_25c();
  double last = -1.0;
  for (double g = 1900.0; g <= 2300.0; g += 10.0) {
    const double p = kanazawa_from_gamma(g, CrystalConstants{}, cal).pred_pct;
    EXPECT_GE(p, last);
    last = p;
  }
}

TEST(KanazawaPredict, BadRoundsAreSkippedWithReason) {
  const auto cal = ViscosityCalibration::glycerol_water_25c();
  std::vector<FrequencySweep> sweeps{lorentz_sweep(1e7, 2000.0, 0)};
  FrequencySweep flat = sweeps[0];
  flat.round_index = 1;
  for (auto& z : flat.z_ohm) z = Complex(100.0, 0.0);
  sweeps.push_back(flat);
  const auto s = kanazawa_predict(sweeps, CrystalConstants{}, cal);
  ASSERT_EQ(s.points.size(), 1u);
  ASSERT_EQ(s.skipped.size(), 1u);
  EXPECT_EQ(s.skipped[0].round_index, 1);
  EXPECT_FALSE(s.skipped[0].reason.empty());
}

TEST(KanazawaPredict, SimulatedScheduleGivesFullFiniteSeries) {
  SimulationConfig cfg;
  cfg.schedule.rounds = 30;
  const auto data = generate_dataset(cfg);
  const auto s = kanazawa_predict(data.sweeps, cfg.quartz, ViscosityCalibration::glycerol_water_25c());
  EXPECT_EQ(s.points.size(), 30u);
  EXPECT_TRUE(s.skipped.empty());
  double sse = 0.0;
  for (std::size_t i = 0; i < s.points.size(); ++i) sse += std::pow(s.points[i].pred_pct - data.targets[i].target_pct, 2);
  EXPECT_TRUE(std::isfinite(std::sqrt(sse / 30.0)));
}
