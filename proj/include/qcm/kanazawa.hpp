#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "qcm/common.hpp"
#include "qcm/spectra.hpp"
#include "qcm/tracking.hpp"

namespace qcm {

// AT-cut quartz constants.
struct CrystalConstants {
  double f0_hz = 1.0e7;
  double rho_q = 2650.0;    // kg/m^3
  double mu_q = 2.947e10;   // Pa

  void validate() const {
    if (!(f0_hz > 0.0 && rho_q > 0.0 && mu_q > 0.0)) throw InputError("CrystalConstants: all constants must be positive");
  }
};

// Kanazawa-Gordon magnitude for a Newtonian liquid: |df| = Gamma = f0^1.5 sqrt(rho eta / (pi rho_q mu_q)).
inline double gamma_from_viscosity(double eta_pa_s, double rho_l, const CrystalConstants& c = {}) {
  c.validate();
  if (!(eta_pa_s >= 0.0 && rho_l > 0.0)) throw InputError("gamma_from_viscosity: non-physical liquid");
  return std::pow(c.f0_hz, 1.5) * std::sqrt(rho_l * eta_pa_s / (std::numbers::pi * c.rho_q * c.mu_q));
}

struct GammaReading {
  double f_r_hz = 0.0;
  double gamma_hz = 0.0;
  double baseline = 0.0;
  double peak = 0.0;
};

// Half-bandwidth of a conductance resonance. The baseline is the mean of the
// outer 5% of samples on each side; Gamma is the half width at half of
// (peak - baseline), located by linear interpolation on each flank.
inline GammaReading extract_gamma(std::span<const double> freq_hz, std::span<const double> g) {
  const std::size_t n = freq_hz.size();
  if (n != g.size() || n < 8) throw InputError("extract_gamma: need at least 8 aligned samples");
  const std::size_t m = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.05 * static_cast<double>(n))));
  double base = 0.0;
  for (std::size_t i = 0; i < m; ++i) base += g[i] + g[n - 1 - i];
  base /= static_cast<double>(2 * m);

  const auto tracked = track_extremum(freq_hz, g, ExtremumMode::Max);

  const auto top = static_cast<std::size_t>(std::max_element(g.begin(), g.end()) - g.begin());
  // Vertex of the parabola through the three samples around the grid maximum.
  double peak = g[top];
  if (top > 0 && top + 1 < n) {
    const double y0 = g[top - 1], y1 = g[top], y2 = g[top + 1];
    const double x0 = freq_hz[top - 1] - freq_hz[top], x2 = freq_hz[top + 1] - freq_hz[top];
    // Quadratic through (x0,y0), (0,y1), (x2,y2).
    const double d0 = (y0 - y1) / x0, d2 = (y2 - y1) / x2;
    const double a = (d2 - d0) / (x2 - x0);
    const double b = d0 - a * x0;
    if (a < 0.0) peak = y1 - b * b / (4.0 * a);
  }
  if (!(peak > base)) throw InputError("extract_gamma: peak does not rise above the baseline");
  const double half = base + 0.5 * (peak - base);

  std::size_t j = top;
  while (j > 0 && g[j] > half) --j;
  if (g[j] > half) throw InputError("extract_gamma: half height not crossed on the low-frequency flank");
  const double left = freq_hz[j] + (half - g[j]) * (freq_hz[j + 1] - freq_hz[j]) / (g[j + 1] - g[j]);
  j = top;
  while (j + 1 < n && g[j] > half) ++j;
  if (g[j] > half) throw InputError("extract_gamma: half height not crossed on the high-frequency flank");
  const double right = freq_hz[j - 1] + (half - g[j - 1]) * (freq_hz[j] - freq_hz[j - 1]) / (g[j] - g[j - 1]);

  GammaReading r;
  r.f_r_hz = tracked.freq_hz;
  r.gamma_hz = 0.5 * (right - left);
  r.baseline = base;
  r.peak = peak;
  if (!(r.gamma_hz > 0.0)) throw InputError("extract_gamma: non-positive half-bandwidth");
  return r;
}

inline GammaReading extract_gamma(const ObservableTrace& g_trace) { return extract_gamma(g_trace.freq_hz, g_trace.value); }

// Inverse of gamma_from_viscosity: eta = Gamma^2 pi rho_q mu_q / (f0^3 rho_l).
inline double viscosity_from_gamma(double gamma_hz, const CrystalConstants& c, double rho_l) {
  c.validate();
  if (!(gamma_hz > 0.0) || !(rho_l > 0.0)) throw InputError("viscosity_from_gamma: non-physical inputs");
  return gamma_hz * gamma_hz * std::numbers::pi * c.rho_q * c.mu_q / (c.f0_hz * c.f0_hz * c.f0_hz * rho_l);
}

inline double viscosity_from_gamma(const GammaReading& g, const CrystalConstants& c, double rho_l) {
  return viscosity_from_gamma(g.gamma_hz, c, rho_l);
}

// Glycerol-water calibration knots (concentration, viscosity, density).
// Inversion uses a monotone piecewise-cubic Hermite interpolant of
// concentration over viscosity.
class ViscosityCalibration {
 public:
  struct Knot {
    double pct;
    double eta_pa_s;
    double rho_kg_m3;
  };

  explicit ViscosityCalibration(std::vector<Knot> knots) : knots_(std::move(knots)) {
    if (knots_.size() < 2) throw InputError("ViscosityCalibration: need at least two knots");
    for (std::size_t i = 1; i < knots_.size(); ++i) {
      if (!(knots_[i].pct > knots_[i - 1].pct))
        throw InputError("ViscosityCalibration: concentrations must be strictly increasing");
      if (!(knots_[i].eta_pa_s > knots_[i - 1].eta_pa_s))
        throw InputError("ViscosityCalibration: viscosity must increase strictly with concentration (row " +
                         std::to_string(i) + ")");
    }
    for (const auto& k : knots_)
      if (!(k.eta_pa_s > 0.0 && k.rho_kg_m3 > 0.0)) throw InputError("ViscosityCalibration: non-physical knot");
    slopes_ = pchip_slopes();
  }

  // Glycerol-water at 25 C from the Cheng (2008) viscosity correlation,
  // volume-weighted density.
  static ViscosityCalibration glycerol_water_25c() {
    return ViscosityCalibration({{0.0, 8.927393e-04, 996.85},  {0.5, 9.060324e-04, 998.16},
                                 {1.0, 9.195960e-04, 999.46},  {1.5, 9.334369e-04, 1000.77},
                                 {2.0, 9.475624e-04, 1002.07}, {2.5, 9.619796e-04, 1003.38},
                                 {3.0, 9.766963e-04, 1004.68}, {3.5, 9.917201e-04, 1005.99},
                                 {4.0, 1.007059e-03, 1007.30}, {4.5, 1.022722e-03, 1008.60},
                                 {5.0, 1.038716e-03, 1009.91}});
  }

  const std::vector<Knot>& knots() const noexcept { return knots_; }

  struct Inversion {
    double pct;
    bool clamped;
  };

  Inversion concentration(double eta) const {
    if (eta <= knots_.front().eta_pa_s) return {knots_.front().pct, eta < knots_.front().eta_pa_s};
    if (eta >= knots_.back().eta_pa_s) return {knots_.back().pct, eta > knots_.back().eta_pa_s};
    std::size_t i = 0;
    while (knots_[i + 1].eta_pa_s < eta) ++i;
    const double x0 = knots_[i].eta_pa_s, x1 = knots_[i + 1].eta_pa_s;
    const double h = x1 - x0;
    const double t = (eta - x0) / h;
    const double h00 = (1 + 2 * t) * (1 - t) * (1 - t), h10 = t * (1 - t) * (1 - t);
    const double h01 = t * t * (3 - 2 * t), h11 = t * t * (t - 1);
    return {h00 * knots_[i].pct + h10 * h * slopes_[i] + h01 * knots_[i + 1].pct + h11 * h * slopes_[i + 1], false};
  }

  // Linear interpolation of density at a concentration (clamped to the table).
  double density(double pct) const {
    if (pct <= knots_.front().pct) return knots_.front().rho_kg_m3;
    if (pct >= knots_.back().pct) return knots_.back().rho_kg_m3;
    std::size_t i = 0;
    while (knots_[i + 1].pct < pct) ++i;
    const double t = (pct - knots_[i].pct) / (knots_[i + 1].pct - knots_[i].pct);
    return knots_[i].rho_kg_m3 + t * (knots_[i + 1].rho_kg_m3 - knots_[i].rho_kg_m3);
  }

 private:
  // Fritsch-Carlson slopes dc/deta.
  std::vector<double> pchip_slopes() const {
    const std::size_t n = knots_.size();
    std::vector<double> h(n - 1), d(n - 1), m(n, 0.0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      h[i] = knots_[i + 1].eta_pa_s - knots_[i].eta_pa_s;
      d[i] = (knots_[i + 1].pct - knots_[i].pct) / h[i];
    }
    if (n == 2) return {d[0], d[0]};
    for (std::size_t i = 1; i + 1 < n; ++i) {
      if (d[i - 1] * d[i] <= 0.0) continue;
      const double w1 = 2 * h[i] + h[i - 1], w2 = h[i] + 2 * h[i - 1];
      m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
    }
    auto end_slope = [](double h0, double h1, double d0, double d1) {
      double s = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
      if (s * d0 <= 0.0) s = 0.0;
      else if (d0 * d1 <= 0.0 && std::abs(s) > std::abs(3 * d0)) s = 3 * d0;
      return s;
    };
    m[0] = end_slope(h[0], h[1], d[0], d[1]);
    m[n - 1] = end_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    return m;
  }

  std::vector<Knot> knots_;
  std::vector<double> slopes_;
};

struct KanazawaPoint {
  int round_index = 0;
  double timestamp_s = 0.0;
  double gamma_hz = 0.0;
  double eta_pa_s = 0.0;
  double pred_pct = 0.0;
  bool clamped = false;
};

struct KanazawaSkip {
  int round_index = 0;
  std::string reason;
};

struct KanazawaSeries {
  std::vector<KanazawaPoint> points;
  std::vector<KanazawaSkip> skipped;
};

// Gamma -> viscosity -> concentration. The liquid density follows the
// calibration table, starting from the lowest-concentration knot and iterating
// the inversion once.
inline KanazawaPoint kanazawa_from_gamma(double gamma_hz, const CrystalConstants& c, const ViscosityCalibration& cal) {
  KanazawaPoint p;
  p.gamma_hz = gamma_hz;
  const double rho0 = cal.knots().front().rho_kg_m3;
  const auto first = cal.concentration(viscosity_from_gamma(gamma_hz, c, rho0));
  p.eta_pa_s = viscosity_from_gamma(gamma_hz, c, cal.density(first.pct));
  const auto inv = cal.concentration(p.eta_pa_s);
  p.pred_pct = inv.pct;
  p.clamped = inv.clamped;
  return p;
}

// One prediction per conductance sweep; sweeps of other kinds are ignored.
inline KanazawaSeries kanazawa_predict(std::span<const FrequencySweep> sweeps, const CrystalConstants& c,
                                       const ViscosityCalibration& cal) {
  KanazawaSeries out;
  for (const auto& s : sweeps) {
    if (s.kind != FeatureKind::G) continue;
    try {
      const auto g = extract_gamma(derive_observables(s, Observable::G));
      auto p = kanazawa_from_gamma(g.gamma_hz, c, cal);
      p.round_index = s.round_index;
      p.timestamp_s = s.timestamp_s;
      out.points.push_back(p);
    } catch (const std::exception& e) {
      out.skipped.push_back({s.round_index, e.what()});
    }
  }
  return out;
}

}  // namespace qcm
