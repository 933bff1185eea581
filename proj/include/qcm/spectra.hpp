#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qcm/common.hpp"

namespace qcm {

using Complex = std::complex<double>;

inline constexpr std::size_t kSweepPoints = 1000;

// The nine resonance observables acquired per round, in acquisition order.
enum class FeatureKind : int {
  BPeak = 0,
  BTrough,
  ZTheta,
  ZabsTrough,
  ZabsPeak,
  XPeak,
  XTrough,
  R,
  G,
};

inline constexpr std::size_t kFeatureCount = 9;

inline constexpr std::array<FeatureKind, kFeatureCount> kAllFeatures = {
    FeatureKind::BPeak,    FeatureKind::BTrough, FeatureKind::ZTheta,
    FeatureKind::ZabsTrough, FeatureKind::ZabsPeak, FeatureKind::XPeak,
    FeatureKind::XTrough,  FeatureKind::R,       FeatureKind::G,
};

inline constexpr std::size_t index_of(FeatureKind k) { return static_cast<std::size_t>(k); }

inline constexpr std::string_view to_string(FeatureKind k) {
  constexpr std::array<std::string_view, kFeatureCount> names = {
      "B_peak", "B_trough", "Z_theta", "Zabs_trough", "Zabs_peak", "X_peak", "X_trough", "R", "G"};
  return names[index_of(k)];
}

inline std::optional<FeatureKind> parse_feature_kind(std::string_view s) {
  for (FeatureKind k : kAllFeatures)
    if (to_string(k) == s) return k;
  return std::nullopt;
}

enum class Observable { R, X, Zabs, Theta, G, B };

enum class ExtremumMode { Max, Min };

// Which observable a feature window is fitted on, and which extremum it follows.
inline constexpr Observable observable_of(FeatureKind k) {
  switch (k) {
    case FeatureKind::BPeak:
    case FeatureKind::BTrough: return Observable::B;
    case FeatureKind::ZTheta: return Observable::Theta;
    case FeatureKind::ZabsTrough:
    case FeatureKind::ZabsPeak: return Observable::Zabs;
    case FeatureKind::XPeak:
    case FeatureKind::XTrough: return Observable::X;
    case FeatureKind::R: return Observable::R;
    case FeatureKind::G: return Observable::G;
  }
  return Observable::R;
}

inline constexpr ExtremumMode extremum_of(FeatureKind k) {
  switch (k) {
    case FeatureKind::BTrough:
    case FeatureKind::ZabsTrough:
    case FeatureKind::XTrough: return ExtremumMode::Min;
    default: return ExtremumMode::Max;
  }
}

struct WindowConfig {
  FeatureKind kind = FeatureKind::G;
  double span_hz = 0.0;
  double center_hz = 0.0;
  bool tracking = true;

  // Evenly spaced grid of n points covering [center - span/2, center + span/2].
  std::vector<double> grid(std::size_t n = kSweepPoints) const {
    std::vector<double> f(n);
    const double lo = center_hz - 0.5 * span_hz;
    const double step = span_hz / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) f[i] = lo + step * static_cast<double>(i);
    return f;
  }
};

// Acquisition windows of the reference instrument setup (1000 points, no averaging).
inline std::array<WindowConfig, kFeatureCount> default_windows() {
  return {{
      {FeatureKind::BPeak, 3000.0, 10008449.0, true},
      {FeatureKind::BTrough, 3000.0, 10014600.0, true},
      {FeatureKind::ZTheta, 5000.0, 10011947.0, true},
      {FeatureKind::ZabsTrough, 5000.0, 10008836.0, true},
      {FeatureKind::ZabsPeak, 5000.0, 10015060.0, true},
      {FeatureKind::XPeak, 5000.0, 10009210.0, true},
      {FeatureKind::XTrough, 5000.0, 10015444.0, true},
      {FeatureKind::R, 3000.0, 10012285.0, true},
      {FeatureKind::G, 50000.0, 10011585.0, false},
  }};
}

struct FrequencySweep {
  FeatureKind kind = FeatureKind::G;
  int round_index = 0;
  double timestamp_s = 0.0;
  std::vector<double> freq_hz;
  std::vector<Complex> z_ohm;
};

// Checks the structural invariants of a sweep. When a span is given the grid
// must cover it to within one grid step.
inline void validate_sweep(const FrequencySweep& s, std::optional<double> span_hz = std::nullopt,
                           std::size_t expected_points = kSweepPoints) {
  const std::string tag = "sweep " + std::string(to_string(s.kind)) + " round " + std::to_string(s.round_index);
  if (s.freq_hz.size() != s.z_ohm.size())
    throw InputError(tag + ": freq and impedance lengths differ");
  if (expected_points != 0 && s.freq_hz.size() != expected_points)
    throw InputError(tag + ": expected " + std::to_string(expected_points) + " points, got " +
                     std::to_string(s.freq_hz.size()));
  for (std::size_t i = 1; i < s.freq_hz.size(); ++i)
    if (!(s.freq_hz[i] > s.freq_hz[i - 1]))
      throw InputError(tag + ": frequency grid not strictly increasing at index " + std::to_string(i));
  if (span_hz && s.freq_hz.size() > 1) {
    const double step = (s.freq_hz.back() - s.freq_hz.front()) / static_cast<double>(s.freq_hz.size() - 1);
    if (std::abs((s.freq_hz.back() - s.freq_hz.front()) - *span_hz) > step)
      throw InputError(tag + ": grid does not cover the window span");
  }
}

// Reference concentration at a time point (%v/v).
struct TargetSample {
  double timestamp_s = 0.0;
  double target_pct = 0.0;
};

struct ObservableTrace {
  std::vector<double> freq_hz;
  std::vector<double> value;
};

// R, X and |Z| in Ohm, theta in degrees, G and B in Siemens.
inline ObservableTrace derive_observables(const FrequencySweep& sweep, Observable which) {
  ObservableTrace out;
  out.freq_hz = sweep.freq_hz;
  out.value.resize(sweep.z_ohm.size());
  for (std::size_t i = 0; i < sweep.z_ohm.size(); ++i) {
    const Complex z = sweep.z_ohm[i];
    switch (which) {
      case Observable::R: out.value[i] = z.real(); break;
      case Observable::X: out.value[i] = z.imag(); break;
      case Observable::Zabs: out.value[i] = std::abs(z); break;
      case Observable::Theta:
        out.value[i] = std::atan2(z.imag(), z.real()) * 180.0 / std::numbers::pi;
        break;
      case Observable::G:
      case Observable::B: {
        if (z == Complex(0.0, 0.0))
          throw InputError("derive_observables: zero impedance at sample " + std::to_string(i));
        const Complex y = 1.0 / z;
        out.value[i] = which == Observable::G ? y.real() : y.imag();
        break;
      }
    }
  }
  return out;
}

inline ObservableTrace feature_trace(const FrequencySweep& sweep) {
  return derive_observables(sweep, observable_of(sweep.kind));
}

struct NormStats {
  double mean_hz = 0.0;
  double std_hz = 1.0;
};

// Frequency-grid statistics of the first sweep of a feature (population std).
inline NormStats reference_stats(const FrequencySweep& first_sweep) {
  NormStats s{mean(first_sweep.freq_hz), stddev(first_sweep.freq_hz)};
  if (!(s.std_hz > 0.0)) throw InputError("reference_stats: constant frequency grid");
  return s;
}

inline std::vector<double> normalize_frequency(std::span<const double> freq_hz, const NormStats& stats) {
  if (!(stats.std_hz > 0.0)) throw InputError("normalize_frequency: non-positive std");
  std::vector<double> x(freq_hz.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (freq_hz[i] - stats.mean_hz) / stats.std_hz;
  return x;
}

inline std::vector<double> normalize_frequency(const FrequencySweep& sweep, const NormStats& stats) {
  return normalize_frequency(sweep.freq_hz, stats);
}

inline double denormalize_frequency(double x, const NormStats& stats) { return x * stats.std_hz + stats.mean_hz; }

}  // namespace qcm
