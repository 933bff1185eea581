#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qcm/common.hpp"
#include "qcm/kanazawa.hpp"
#include "qcm/spectra.hpp"
#include "qcm/tracking.hpp"

namespace qcm {

// Butterworth-Van Dyke equivalent circuit: motional R_m, L_m, C_m in parallel
// with the static capacitance C_0.
struct BvdParams {
  double r_m = 5.0;       // Ohm
  double l_m = 9e-3;      // H
  double c_m = 28e-15;    // F
  double c_0 = 5e-12;     // F

  void validate() const {
    if (!(r_m > 0.0 && l_m > 0.0 && c_m > 0.0 && c_0 > 0.0))
      throw InputError("BvdParams: all circuit elements must be strictly positive");
  }
};

inline Complex motional_impedance(const BvdParams& p, double f_hz) {
  const double w = 2.0 * std::numbers::pi * f_hz;
  return {p.r_m, w * p.l_m - 1.0 / (w * p.c_m)};
}

inline Complex bvd_impedance(const BvdParams& p, double f_hz) {
  if (!(f_hz > 0.0)) throw InputError("bvd_impedance: frequency must be positive");
  const double w = 2.0 * std::numbers::pi * f_hz;
  const Complex zm = motional_impedance(p, f_hz);
  const Complex zc{0.0, -1.0 / (w * p.c_0)};
  return zm * zc / (zm + zc);
}

inline double series_resonance(const BvdParams& p) {
  return 1.0 / (2.0 * std::numbers::pi * std::sqrt(p.l_m * p.c_m));
}

inline double parallel_resonance(const BvdParams& p) {
  return series_resonance(p) * std::sqrt(1.0 + p.c_m / p.c_0);
}

inline std::vector<Complex> bvd_sweep(const BvdParams& p, std::span<const double> freq_hz) {
  std::vector<Complex> z(freq_hz.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = bvd_impedance(p, freq_hz[i]);
  return z;
}

// Phase-angle maximum on the window's 1000-point grid, refined by the parabola tracker.
inline ExtremumEstimate phase_peak(const BvdParams& p, const WindowConfig& window, const TrackerOptions& opt = {}) {
  p.validate();
  const auto f = window.grid();
  std::vector<double> theta(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const Complex z = bvd_impedance(p, f[i]);
    theta[i] = std::atan2(z.imag(), z.real()) * 180.0 / std::numbers::pi;
  }
  try {
    return track_extremum(f, theta, ExtremumMode::Max, opt);
  } catch (const InputError& e) {
    throw InputError(std::string("phase_peak_frequency: ") + e.what() + "; recenter the window");
  }
}

inline double phase_peak_frequency(const BvdParams& p, const WindowConfig& window) {
  return phase_peak(p, window).freq_hz;
}

// Newtonian liquid in contact with one face of the crystal.
struct LiquidLoad {
  double density = 996.85;        // kg/m^3
  double viscosity = 8.927393e-4; // Pa s
};

// Adds a Kanazawa-Gordon bulk-liquid load to the motional branch: the series
// resonance drops by Gamma and the motional resistance grows so that the
// conductance half-bandwidth grows by the same Gamma.
inline BvdParams apply_liquid_load(const BvdParams& crystal, const LiquidLoad& liquid, CrystalConstants quartz = {}) {
  crystal.validate();
  const double fs = series_resonance(crystal);
  quartz.f0_hz = fs;
  const double gamma = gamma_from_viscosity(liquid.viscosity, liquid.density, quartz);
  BvdParams out = crystal;
  out.l_m = crystal.l_m * (fs / (fs - gamma)) * (fs / (fs - gamma));
  out.r_m = crystal.r_m + 4.0 * std::numbers::pi * out.l_m * gamma;
  return out;
}

// Co-update of the motional branch along dR/R = k dL/L.
inline BvdParams scale_load(const BvdParams& p, double rel_dl, double coupling) {
  BvdParams out = p;
  out.l_m = p.l_m * (1.0 + rel_dl);
  out.r_m = p.r_m * (1.0 + coupling * rel_dl);
  out.validate();
  return out;
}

// Coupling for which the conductance half-bandwidth rises exactly as much as
// the series resonance falls (Newtonian loading): k = 2 pi f_s L_m / R_m.
inline double newtonian_coupling(const BvdParams& p) {
  return 2.0 * std::numbers::pi * series_resonance(p) * p.l_m / p.r_m;
}

struct SolveOptions {
  double tolerance_hz = 0.02;
  double accept_hz = 0.5;
  int max_iterations = 80;
  double coupling = 1.0;
  double window_span_hz = 5000.0;
};

// Finds the L_m/R_m update that moves the phase-angle peak onto target_hz.
// The two unknowns are tied by the coupling, which leaves a bounded scalar
// search over dL/L solved by Brent's method on the peak-position error.
inline BvdParams solve_load(const BvdParams& p, double target_hz, const SolveOptions& opt = {}) {
  p.validate();
  const WindowConfig window{FeatureKind::ZTheta, opt.window_span_hz, target_hz, true};
  auto err = [&](double s) { return phase_peak_frequency(scale_load(p, s, opt.coupling), window) - target_hz; };

  double a = 0.0, fa = err(a);
  if (std::abs(fa) <= opt.tolerance_hz) return p;
  // Peak frequency scales roughly as (1 + s)^-1/2.
  double step = 2.0 * fa / target_hz;
  if (step == 0.0) step = 1e-9;
  double b = step, fb = err(b);
  int expand = 0;
  while (fa * fb > 0.0) {
    if (++expand > 40) throw ConvergenceError("solve_load: failed to bracket the target peak", std::abs(fb));
    a = b;
    fa = fb;
    step *= 1.6;
    b = a + step;
    fb = err(b);
  }

  double c = a, fc = fa, d = b - a, e = d;
  for (int it = 0; it < opt.max_iterations; ++it) {
    if (fb * fc > 0.0) {
      c = a;
      fc = fa;
      d = e = b - a;
    }
    if (std::abs(fc) < std::abs(fb)) {
      a = b; b = c; c = a;
      fa = fb; fb = fc; fc = fa;
    }
    if (std::abs(fb) <= opt.tolerance_hz) return scale_load(p, b, opt.coupling);
    const double tol = 4.0 * std::numeric_limits<double>::epsilon() * std::abs(b) + 1e-18;
    const double m = 0.5 * (c - b);
    if (std::abs(m) <= tol) {
      if (std::abs(fb) <= opt.accept_hz) return scale_load(p, b, opt.coupling);
      throw ConvergenceError("solve_load: bracket collapsed on a discontinuity", std::abs(fb));
    }
    if (std::abs(e) >= tol && std::abs(fa) > std::abs(fb)) {
      double pp, q, r;
      const double s = fb / fa;
      if (a == c) {
        pp = 2.0 * m * s;
        q = 1.0 - s;
      } else {
        q = fa / fc;
        r = fb / fc;
        pp = s * (2.0 * m * q * (q - r) - (b - a) * (r - 1.0));
        q = (q - 1.0) * (r - 1.0) * (s - 1.0);
      }
      if (pp > 0.0) q = -q;
      pp = std::abs(pp);
      if (2.0 * pp < std::min(3.0 * m * q - std::abs(tol * q), std::abs(e * q))) {
        e = d;
        d = pp / q;
      } else {
        d = m;
        e = m;
      }
    } else {
      d = m;
      e = m;
    }
    a = b;
    fa = fb;
    b += std::abs(d) > tol ? d : (m > 0 ? tol : -tol);
    fb = err(b);
  }
  if (std::abs(fb) <= opt.accept_hz) return scale_load(p, b, opt.coupling);
  throw ConvergenceError("solve_load: iteration limit reached", std::abs(fb));
}

// Two-channel flow: water on channel 1, glycerol stock on channel 2 in
// antiphase so the total stays constant.
struct FlowProfile {
  double q1_mean = 40.0;   // uL/min
  double q1_amp = 10.0;
  double q2_mean = 10.0;
  double q2_amp = 10.0;
  double period_s = 3600.0;
  double stock_pct = 5.0;
  double sample_rate_hz = 20.0;

  double q1(double t) const { return q1_mean + q1_amp * std::cos(2.0 * std::numbers::pi * t / period_s); }
  double q2(double t) const { return q2_mean - q2_amp * std::cos(2.0 * std::numbers::pi * t / period_s); }

  void validate() const {
    if (!(period_s > 0.0 && sample_rate_hz > 0.0 && stock_pct >= 0.0))
      throw InputError("FlowProfile: period, sample rate and stock must be positive");
    if (q1_mean - q1_amp < 0.0 || q2_mean - q2_amp < 0.0) throw InputError("FlowProfile: negative flow");
  }
};

inline double concentration_trace(const FlowProfile& flow, double t_s) {
  if (t_s < 0.0) throw InputError("concentration_trace: negative time");
  const double q1 = flow.q1(t_s), q2 = flow.q2(t_s);
  return flow.stock_pct * q2 / (q1 + q2);
}

// Flow-derived concentration sampled at the flow-sensor rate, then linearly
// interpolated onto arbitrary timestamps.
class ConcentrationLog {
 public:
  ConcentrationLog(const FlowProfile& flow, double duration_s) : dt_(1.0 / flow.sample_rate_hz) {
    flow.validate();
    const auto n = static_cast<std::size_t>(std::ceil(duration_s / dt_)) + 2;
    c_.resize(n);
    for (std::size_t i = 0; i < n; ++i) c_[i] = concentration_trace(flow, static_cast<double>(i) * dt_);
  }

  double at(double t_s) const {
    if (t_s <= 0.0) return c_.front();
    const double pos = t_s / dt_;
    const auto i = static_cast<std::size_t>(pos);
    if (i + 1 >= c_.size()) return c_.back();
    const double w = pos - static_cast<double>(i);
    return c_[i] + w * (c_[i + 1] - c_[i]);
  }

 private:
  double dt_;
  std::vector<double> c_;
};

struct LoadSchedule {
  int sweeps_per_period = 100;   // rounds per loading period
  double peak_to_peak_hz = 50.0;
  int rounds = 100;
  double noise_rel = 0.0;
  // k in dR/R = k dL/L; empty selects the Newtonian coupling of the base circuit.
  std::optional<double> coupling;
};

struct SimulationConfig {
  BvdParams crystal;
  std::optional<LiquidLoad> liquid = LiquidLoad{};
  CrystalConstants quartz;
  LoadSchedule schedule;
  FlowProfile flow;
  // Empty: Table spans, centers located on the loaded circuit.
  std::optional<std::array<WindowConfig, kFeatureCount>> windows;
  std::uint64_t seed = 1;
};

struct SimulatedDataset {
  std::vector<FrequencySweep> sweeps;   // rounds x 9, round-major in FeatureKind order
  std::vector<TargetSample> targets;   // one per round, at the round timestamp
  std::vector<double> target_peak_hz;   // commanded phase-peak trajectory
  std::vector<double> tracked_peak_hz;  // phase peak tracked on each round's Z_theta sweep
  std::vector<BvdParams> params;
  BvdParams base;
  std::array<WindowConfig, kFeatureCount> initial_windows;
};

inline BvdParams simulation_base(const SimulationConfig& cfg) {
  return cfg.liquid ? apply_liquid_load(cfg.crystal, *cfg.liquid, cfg.quartz) : cfg.crystal;
}

// Default spans centered on each feature's extremum of the given circuit,
// located on a 0.5 Hz scan around both resonances.
inline std::array<WindowConfig, kFeatureCount> locate_windows(const BvdParams& p) {
  p.validate();
  auto windows = default_windows();
  const double fs = series_resonance(p), fp = parallel_resonance(p);
  const double lo = fs - 60000.0, hi = fp + 60000.0, step = 0.5;
  const auto n = static_cast<std::size_t>((hi - lo) / step) + 1;
  std::array<double, kFeatureCount> best_val;
  std::array<double, kFeatureCount> best_f{};
  best_val.fill(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    const double f = lo + step * static_cast<double>(i);
    const Complex z = bvd_impedance(p, f);
    const Complex y = 1.0 / z;
    for (FeatureKind k : kAllFeatures) {
      double v = 0.0;
      switch (observable_of(k)) {
        case Observable::R: v = z.real(); break;
        case Observable::X: v = z.imag(); break;
        case Observable::Zabs: v = std::abs(z); break;
        case Observable::Theta: v = std::atan2(z.imag(), z.real()); break;
        case Observable::G: v = y.real(); break;
        case Observable::B: v = y.imag(); break;
      }
      if (extremum_of(k) == ExtremumMode::Min) v = -v;
      if (v > best_val[index_of(k)]) {
        best_val[index_of(k)] = v;
        best_f[index_of(k)] = f;
      }
    }
  }
  for (auto& w : windows) w.center_hz = best_f[index_of(w.kind)];
  return windows;
}

inline double round_interval_s(const SimulationConfig& cfg) {
  return cfg.flow.period_s / static_cast<double>(cfg.schedule.sweeps_per_period);
}

// Rounds of nine sweeps. The commanded phase-peak position follows
// peak0 - pp (1 - cos(2 pi r / sweeps_per_period)) / 2, which is in phase with
// the flow-derived concentration. R_m and L_m are re-solved once per round;
// tracked windows are recentered on the extremum seen in the previous round.
// Sweeps of round r are spread evenly around the round timestamp r * interval.
inline SimulatedDataset generate_dataset(const SimulationConfig& cfg) {
  const auto& sched = cfg.schedule;
  if (sched.rounds <= 0 || sched.sweeps_per_period <= 0) throw InputError("generate_dataset: rounds and sweeps_per_period must be positive");
  if (sched.noise_rel < 0.0) throw InputError("generate_dataset: negative noise level");
  cfg.flow.validate();

  SimulatedDataset out;
  out.base = simulation_base(cfg);
  out.initial_windows = cfg.windows ? *cfg.windows : locate_windows(out.base);
  for (const auto& w : out.initial_windows)
    if (!(w.span_hz > 0.0)) throw InputError("generate_dataset: window span must be positive");

  const double peak0 = phase_peak_frequency(out.base, out.initial_windows[index_of(FeatureKind::ZTheta)]);
  SolveOptions solve;
  solve.coupling = sched.coupling ? *sched.coupling : newtonian_coupling(out.base);
  solve.window_span_hz = out.initial_windows[index_of(FeatureKind::ZTheta)].span_hz;

  const auto rounds = static_cast<std::size_t>(sched.rounds);
  out.target_peak_hz.resize(rounds);
  out.params.resize(rounds);
  for (std::size_t r = 0; r < rounds; ++r) {
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(r) / sched.sweeps_per_period;
    out.target_peak_hz[r] = peak0 - sched.peak_to_peak_hz * 0.5 * (1.0 - std::cos(phase));
  }
  parallel_for(rounds, [&](std::size_t r) {
    out.params[r] = r == 0 && out.target_peak_hz[0] == peak0 ? out.base : solve_load(out.base, out.target_peak_hz[r], solve);
  });

  const double interval = round_interval_s(cfg);
  const ConcentrationLog conc(cfg.flow, interval * static_cast<double>(rounds + 1));
  auto windows = out.initial_windows;
  out.sweeps.reserve(rounds * kFeatureCount);
  out.tracked_peak_hz.resize(rounds);

  for (std::size_t r = 0; r < rounds; ++r) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(r), 0x51a7u};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double t_round = interval * static_cast<double>(r);
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
      auto& w = windows[j];
      FrequencySweep s;
      s.kind = w.kind;
      s.round_index = static_cast<int>(r);
      s.timestamp_s = t_round + (static_cast<double>(j) - 4.0) * interval / static_cast<double>(kFeatureCount);
      s.freq_hz = w.grid();
      s.z_ohm = bvd_sweep(out.params[r], s.freq_hz);
      if (sched.noise_rel > 0.0)
        for (auto& z : s.z_ohm) z *= 1.0 + sched.noise_rel * normal(rng);
      if (w.tracking) {
        ExtremumEstimate est;
        try {
          est = track_extremum(feature_trace(s), extremum_of(w.kind));
        } catch (const InputError& e) {
          throw InputError("generate_dataset: feature " + std::string(to_string(w.kind)) + " drifted out of its " +
                           std::to_string(w.span_hz) + " Hz window in round " + std::to_string(r) + " (" + e.what() +
                           "); use a larger span");
        }
        if (w.kind == FeatureKind::ZTheta) out.tracked_peak_hz[r] = est.freq_hz;
        w = recenter_window(w, est.freq_hz);
      }
      out.sweeps.push_back(std::move(s));
    }
    out.targets.push_back({t_round, conc.at(t_round)});
  }
  return out;
}

}  // namespace qcm
