#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "qcm/common.hpp"
#include "qcm/spectra.hpp"

namespace qcm {

struct ExtremumEstimate {
  double freq_hz = 0.0;
  double value = 0.0;
};

// Multiple-parabola peak tracker settings. The fit span starts at
// initial_fraction of the window and halves on each pass; within the span only
// the contiguous run of points in the top (or bottom) top_fraction of the local
// value range is used. The run is chosen on a moving average over
// smooth_fraction of the samples; the parabola is fitted to the raw samples.
struct TrackerOptions {
  int passes = 3;
  double initial_fraction = 0.25;
  double top_fraction = 0.5;
  std::size_t min_points = 5;
  double smooth_fraction = 0.02;
};

namespace detail {

struct Parabola {
  double c0, c1, c2;  // y = c0 + c1 u + c2 u^2, u = (f - origin) / scale
  double origin, scale;
};

inline Parabola fit_parabola(std::span<const double> f, std::span<const double> y, std::size_t lo,
                             std::size_t hi, double origin) {
  double scale = 0.5 * (f[hi] - f[lo]);
  if (!(scale > 0.0)) scale = 1.0;
  double ymean = 0.0;
  for (std::size_t i = lo; i <= hi; ++i) ymean += y[i];
  ymean /= static_cast<double>(hi - lo + 1);
  // Normal equations for [1, u, u^2].
  double s[5] = {0, 0, 0, 0, 0};
  double t[3] = {0, 0, 0};
  for (std::size_t i = lo; i <= hi; ++i) {
    const double u = (f[i] - origin) / scale;
    const double dy = y[i] - ymean;
    double p = 1.0;
    for (int k = 0; k < 5; ++k) {
      s[k] += p;
      if (k < 3) t[k] += p * dy;
      p *= u;
    }
  }
  std::array<std::array<double, 4>, 3> a = {{{s[0], s[1], s[2], t[0]}, {s[1], s[2], s[3], t[1]}, {s[2], s[3], s[4], t[2]}}};
  for (int c = 0; c < 3; ++c) {
    int piv = c;
    for (int r = c + 1; r < 3; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    if (a[c][c] == 0.0) throw InputError("track_extremum: singular parabola fit");
    for (int r = c + 1; r < 3; ++r) {
      const double m = a[r][c] / a[c][c];
      for (int k = c; k < 4; ++k) a[r][k] -= m * a[c][k];
    }
  }
  double coef[3];
  for (int r = 2; r >= 0; --r) {
    double v = a[r][3];
    for (int k = r + 1; k < 3; ++k) v -= a[r][k] * coef[k];
    coef[r] = v / a[r][r];
  }
  return {coef[0] + ymean, coef[1], coef[2], origin, scale};
}

}  // namespace detail

inline ExtremumEstimate track_extremum(std::span<const double> freq_hz, std::span<const double> value,
                                       ExtremumMode mode, const TrackerOptions& opt = {}) {
  const std::size_t n = freq_hz.size();
  if (n != value.size() || n < opt.min_points)
    throw InputError("track_extremum: need at least " + std::to_string(opt.min_points) + " aligned samples");
  const double sign = mode == ExtremumMode::Max ? 1.0 : -1.0;

  // Centered moving average of the signed values, for point selection only.
  const auto half_w = static_cast<std::size_t>(opt.smooth_fraction * static_cast<double>(n) / 2.0);
  std::vector<double> sm(n);
  {
    std::vector<double> cs(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) cs[i + 1] = cs[i] + sign * value[i];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = i >= half_w ? i - half_w : 0, b = std::min(n - 1, i + half_w);
      sm[i] = (cs[b + 1] - cs[a]) / static_cast<double>(b - a + 1);
    }
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (sm[i] > sm[best]) best = i;
  if (best == 0 || best == n - 1)
    throw InputError("track_extremum: no interior extremum (extremum at window edge)");

  const double width = freq_hz.back() - freq_hz.front();
  double est = freq_hz[best];
  ExtremumEstimate out{est, value[best]};

  // A later, narrower pass that loses the curvature keeps the previous estimate.
  for (int pass = 0; pass < opt.passes; ++pass) {
    const double half = 0.5 * opt.initial_fraction * width / std::ldexp(1.0, pass);
    std::size_t lo = 0;
    while (lo < n && freq_hz[lo] < est - half) ++lo;
    std::size_t hi = n - 1;
    while (hi > 0 && freq_hz[hi] > est + half) --hi;
    if (lo > hi) lo = hi = best;

    std::size_t top = lo;
    double floor_v = sm[lo];
    for (std::size_t i = lo; i <= hi; ++i) {
      if (sm[i] > sm[top]) top = i;
      floor_v = std::min(floor_v, sm[i]);
    }
    const double level = sm[top] - opt.top_fraction * (sm[top] - floor_v);
    std::size_t a = top, b = top;
    while (a > lo && sm[a - 1] >= level) --a;
    while (b < hi && sm[b + 1] >= level) ++b;
    while (b - a + 1 < opt.min_points) {
      if (a > 0) --a;
      if (b - a + 1 < opt.min_points && b + 1 < n) ++b;
      if (a == 0 && b == n - 1) break;
    }

    // Noisy flat extrema: retry on the whole span, then (first pass) the whole window.
    auto try_fit = [&](std::size_t i0, std::size_t i1, double& vertex, double& peak) {
      const auto p = detail::fit_parabola(freq_hz, value, i0, i1, est);
      if (!(sign * p.c2 < 0.0)) return 1;
      const double u = -p.c1 / (2.0 * p.c2);
      vertex = p.origin + u * p.scale;
      peak = p.c0 + p.c1 * u + p.c2 * u * u;
      return vertex >= freq_hz[i0] && vertex <= freq_hz[i1] ? 0 : 2;
    };
    double vertex = est, peak = out.value;
    int why = try_fit(a, b, vertex, peak);
    if (why && (a != lo || b != hi) && hi - lo + 1 >= opt.min_points) why = try_fit(lo, hi, vertex, peak);
    if (why && pass == 0) why = try_fit(0, n - 1, vertex, peak);
    if (why) {
      if (pass > 0) break;
      throw InputError(why == 1 ? "track_extremum: parabola curvature does not match the requested extremum"
                                : "track_extremum: parabola vertex outside the window");
    }
    est = vertex;
    out = {vertex, peak};
  }
  return out;
}

inline ExtremumEstimate track_extremum(const ObservableTrace& trace, ExtremumMode mode,
                                       const TrackerOptions& opt = {}) {
  return track_extremum(trace.freq_hz, trace.value, mode, opt);
}

// Moves a tracked window onto the latest extremum estimate. Fixed windows (G)
// are returned unchanged.
inline WindowConfig recenter_window(const WindowConfig& window, double tracked_hz) {
  WindowConfig out = window;
  if (window.tracking) out.center_hz = tracked_hz;
  return out;
}

}  // namespace qcm
