#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qcm/common.hpp"
#include "qcm/levenberg_marquardt.hpp"
#include "qcm/spectra.hpp"

namespace qcm {

// g(x) = a1 exp(-((x-b1)/c1)^2) + a2 exp(-((x-b2)/c2)^2)
struct GaussianPair {
  double a1 = 0, b1 = 0, c1 = 1, a2 = 0, b2 = 0, c2 = 1;

  double operator()(double x) const {
    const double u1 = (x - b1) / c1, u2 = (x - b2) / c2;
    return a1 * std::exp(-u1 * u1) + a2 * std::exp(-u2 * u2);
  }
  std::array<double, 6> to_array() const { return {a1, b1, c1, a2, b2, c2}; }
  static GaussianPair from(std::span<const double> p) { return {p[0], p[1], p[2], p[3], p[4], p[5]}; }
};

// L(x) = a / ((x-b)^2 + c^2) + d
struct LorentzQuad {
  double a = 0, b = 0, c = 1, d = 0;

  double operator()(double x) const { return a / ((x - b) * (x - b) + c * c) + d; }
  double peak_value() const { return a / (c * c) + d; }
  double fwhm() const { return 2.0 * std::abs(c); }
  std::array<double, 4> to_array() const { return {a, b, c, d}; }
  static LorentzQuad from(std::span<const double> p) { return {p[0], p[1], p[2], p[3]}; }
};

inline double gaussian_fwhm(double c) { return 2.0 * std::abs(c) * std::sqrt(std::log(2.0)); }

inline constexpr bool uses_lorentz(FeatureKind k) { return k == FeatureKind::G; }
inline constexpr std::size_t param_count(FeatureKind k) { return uses_lorentz(k) ? 4 : 6; }

inline const std::vector<std::string>& param_names(FeatureKind k) {
  static const std::vector<std::string> gauss = {"a1", "b1", "c1", "a2", "b2", "c2"};
  static const std::vector<std::string> lorentz = {"a", "b", "c", "d"};
  return uses_lorentz(k) ? lorentz : gauss;
}

struct FitRecord {
  FeatureKind kind = FeatureKind::G;
  int round_index = 0;
  double timestamp_s = 0.0;
  std::vector<double> params;
  double r2 = 0.0;
  bool bounded = false;
  std::vector<std::size_t> active_bounds;
  std::string error;  // non-empty when the fit itself failed

  bool ok() const { return error.empty(); }
};

struct ParamBounds {
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<bool> widened;  // degenerate percentile range widened
};

struct FitBounds {
  std::array<ParamBounds, kFeatureCount> per_kind;

  const ParamBounds& operator[](FeatureKind k) const { return per_kind[index_of(k)]; }
  ParamBounds& operator[](FeatureKind k) { return per_kind[index_of(k)]; }
  bool has(FeatureKind k) const { return !per_kind[index_of(k)].lower.empty(); }
};

struct FitOptions {
  LmOptions lm;
  double r2_tol = 1e-9;  // stop once a step gains less R^2 than this
  bool lorentz_triple = false;
  std::uint64_t seed = 0;  // perturbed-start seed; callers derive it from (round, kind)
  std::vector<double> warm_start;  // extra start, e.g. the unbounded solution for a bounded refit
};

inline double r_squared(std::span<const double> y, double sse) {
  const double m = mean(y);
  double sst = 0.0;
  for (double v : y) sst += (v - m) * (v - m);
  if (!(sst > 0.0)) throw InputError("r_squared: constant observations");
  return 1.0 - sse / sst;
}

namespace detail {

inline LmOptions with_r2_tol(const FitOptions& opt, std::span<const double> y) {
  LmOptions lm = opt.lm;
  const double m = mean(y);
  double sst = 0.0;
  for (double v : y) sst += (v - m) * (v - m);
  lm.atol = std::max(lm.atol, opt.r2_tol * sst);
  return lm;
}

inline void check_trace(std::span<const double> x, std::span<const double> y, std::size_t min_points) {
  if (x.size() != y.size()) throw InputError("fit: x and y differ in length");
  if (x.size() < min_points) throw InputError("fit: need at least " + std::to_string(min_points) + " points");
  for (std::size_t i = 1; i < x.size(); ++i)
    if (!(x[i] >= x[i - 1])) throw InputError("fit: x must be sorted");
  for (double v : y)
    if (!std::isfinite(v)) throw InputError("fit: non-finite observation");
  const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
  const double scale = std::max(std::abs(*lo), std::abs(*hi));
  if (!(*hi - *lo > 1e-13 * scale)) throw InputError("fit: flat trace has no amplitude to fit");
}

inline double gauss2_eval(double x, const std::array<double, 6>& p, std::array<double, 6>& g) {
  double v = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double a = p[3 * k], b = p[3 * k + 1], c = p[3 * k + 2];
    const double u = (x - b) / c;
    const double e = std::exp(-u * u);
    g[3 * k] = e;
    g[3 * k + 1] = a * e * 2.0 * u / c;
    g[3 * k + 2] = a * e * 2.0 * u * u / c;
    v += a * e;
  }
  return v;
}

template <std::size_t N>
double lorentz_sum_eval(double x, const std::array<double, N>& p, std::array<double, N>& g) {
  constexpr std::size_t terms = (N - 1) / 3;
  double v = p[N - 1];
  for (std::size_t k = 0; k < terms; ++k) {
    const double a = p[3 * k], b = p[3 * k + 1], c = p[3 * k + 2];
    const double dx = x - b;
    const double q = 1.0 / (dx * dx + c * c);
    g[3 * k] = q;
    g[3 * k + 1] = 2.0 * a * dx * q * q;
    g[3 * k + 2] = -2.0 * a * c * q * q;
    v += a * q;
  }
  g[N - 1] = 1.0;
  return v;
}

// Shape summary used to seed the starts.
struct TraceShape {
  double base;      // mean of the outer 5% on both sides
  std::size_t top;  // index of the dominant extremum relative to base
  double height;    // y[top] - base (signed)
  double half_width;
  double centroid;
  double spread;    // second-moment std of |y - base| above zero
  double q25, q75;  // quartiles of that weight distribution
};

inline TraceShape describe(std::span<const double> x, std::span<const double> y, std::optional<double> sign) {
  const std::size_t n = x.size();
  const std::size_t e = std::max<std::size_t>(1, n / 20);
  TraceShape s{};
  for (std::size_t i = 0; i < e; ++i) s.base += y[i] + y[n - 1 - i];
  s.base /= static_cast<double>(2 * e);
  double m = 1.0;
  if (sign) {
    m = *sign;
  } else {
    const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
    m = (*hi - s.base) >= (s.base - *lo) ? 1.0 : -1.0;
  }
  s.top = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (m * y[i] > m * y[s.top]) s.top = i;
  s.height = y[s.top] - s.base;
  const double half = s.base + 0.5 * s.height;
  std::size_t j = s.top, k = s.top;
  while (j > 0 && m * (y[j] - half) > 0) --j;
  while (k + 1 < n && m * (y[k] - half) > 0) ++k;
  const double dx = (x.back() - x.front()) / static_cast<double>(n - 1);
  s.half_width = std::max(0.5 * (x[k] - x[j]), 2.0 * dx);

  double wsum = 0.0, wx = 0.0;
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::max(0.0, m * (y[i] - s.base));
    wsum += w[i];
    wx += w[i] * x[i];
  }
  if (wsum > 0.0) {
    s.centroid = wx / wsum;
    double v = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) v += w[i] * (x[i] - s.centroid) * (x[i] - s.centroid);
    s.spread = std::max(std::sqrt(v / wsum), 2.0 * dx);
    s.q25 = s.q75 = x[s.top];
    bool got25 = false;
    for (std::size_t i = 0; i < n; ++i) {
      acc += w[i];
      if (!got25 && acc >= 0.25 * wsum) {
        s.q25 = x[i];
        got25 = true;
      }
      if (acc >= 0.75 * wsum) {
        s.q75 = x[i];
        break;
      }
    }
  } else {
    s.centroid = x[s.top];
    s.spread = 0.25 * (x.back() - x.front());
    s.q25 = x[s.top] - s.half_width;
    s.q75 = x[s.top] + s.half_width;
  }
  return s;
}

template <std::size_t N>
std::array<double, N> clamp_to(std::array<double, N> p, const std::optional<Box<N>>& box) {
  if (box)
    for (std::size_t i = 0; i < N; ++i) p[i] = std::clamp(p[i], box->lower[i], box->upper[i]);
  return p;
}

// Box used when no percentile bounds are given. Centers stay within four
// window widths of the window and widths within [dx/2, 4 W]; amplitudes and
// offsets are free. Without it some kinds drift towards components of
// unbounded width and never converge.
template <std::size_t N>
Box<N> plausibility_box(std::span<const double> x) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  constexpr double reach = 4.0;
  const double w = x.back() - x.front();
  const double mid = 0.5 * (x.front() + x.back());
  const double dx = w / static_cast<double>(x.size() - 1);
  Box<N> box;
  box.lower.fill(-inf);
  box.upper.fill(inf);
  for (std::size_t k = 0; k + 2 < N; k += 3) {
    box.lower[k + 1] = mid - reach * w;
    box.upper[k + 1] = mid + reach * w;
    box.lower[k + 2] = 0.5 * dx;
    box.upper[k + 2] = reach * w;
  }
  return box;
}

template <std::size_t N>
std::optional<Box<N>> to_box(const ParamBounds* b) {
  if (!b || b->lower.empty()) return std::nullopt;
  if (b->lower.size() != N || b->upper.size() != N) throw InputError("fit: bounds have the wrong parameter count");
  Box<N> box;
  for (std::size_t i = 0; i < N; ++i) {
    if (!(b->lower[i] < b->upper[i])) throw InputError("fit: bounds must satisfy lower < upper");
    box.lower[i] = b->lower[i];
    box.upper[i] = b->upper[i];
  }
  return box;
}

// Runs LM from every start and keeps the lowest SSE among converged runs.
template <std::size_t N, class Model>
LmResult<N> best_of(const Model& model, std::span<const double> x, std::span<const double> y,
                    const std::vector<std::array<double, N>>& starts, const std::optional<Box<N>>& box,
                    const LmOptions& opt) {
  std::optional<LmResult<N>> best;
  double best_any = std::numeric_limits<double>::infinity();
  for (const auto& s : starts) {
    bool finite = true;
    for (double v : s) finite = finite && std::isfinite(v);
    if (!finite) continue;
    try {
      auto r = levenberg_marquardt<N>(model, x, y, s, box, opt);
      if (!std::isfinite(r.sse)) continue;
      best_any = std::min(best_any, r.sse);
      if (r.converged && (!best || r.sse < best->sse)) best = r;
    } catch (const ConvergenceError& e) {
      best_any = std::min(best_any, e.residual());
    }
  }
  if (!best) throw ConvergenceError("fit: no start converged", best_any);
  return *best;
}

template <std::size_t N>
std::vector<std::size_t> active_set(const std::array<double, N>& p, const std::optional<Box<N>>& box) {
  std::vector<std::size_t> out;
  if (!box) return out;
  for (std::size_t i = 0; i < N; ++i)
    if (p[i] <= box->lower[i] || p[i] >= box->upper[i]) out.push_back(i);
  return out;
}

inline bool inside(std::span<const double> p, const ParamBounds* b) {
  if (!b || b->lower.empty()) return true;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] < b->lower[i] || p[i] > b->upper[i]) return false;
  return true;
}

}  // namespace detail

// Widths to |c|, then the component with the larger |amplitude| first. The
// predicted curve is unchanged.
inline GaussianPair canonical(GaussianPair g) {
  g.c1 = std::abs(g.c1);
  g.c2 = std::abs(g.c2);
  if (std::abs(g.a2) > std::abs(g.a1)) {
    std::swap(g.a1, g.a2);
    std::swap(g.b1, g.b2);
    std::swap(g.c1, g.c2);
  }
  return g;
}

inline LorentzQuad canonical(LorentzQuad l) {
  l.c = std::abs(l.c);
  return l;
}

// Two-term Gaussian fit. Starts: coincident wide/narrow components from the
// weighted moments; a greedy start (one Gaussian at the grid extremum, the
// second at the largest residual); and a perturbed peak-plus-background start.
inline FitRecord fit_gauss2(std::span<const double> x, std::span<const double> y, const ParamBounds* bounds = nullptr,
                            const FitOptions& opt = {}, std::optional<double> sign = std::nullopt) {
  detail::check_trace(x, y, 12);
  const auto box = detail::to_box<6>(bounds);
  const auto s = detail::describe(x, y, sign);
  const double span = x.back() - x.front();
  const double x_mid = 0.5 * (x.front() + x.back());
  const double c_pk = s.half_width / std::sqrt(std::log(2.0));
  const double peak = y[s.top];
  auto model = [](double xv, const std::array<double, 6>& p, std::array<double, 6>& g) {
    return detail::gauss2_eval(xv, p, g);
  };

  std::vector<std::array<double, 6>> starts;
  const double w_mom = s.spread * std::sqrt(2.0);
  starts.push_back({0.7 * peak, s.centroid, 2.0 * w_mom, 0.3 * peak, s.centroid, 0.7 * w_mom});

  {
    auto one = [](double xv, const std::array<double, 3>& p, std::array<double, 3>& g) {
      const double u = (xv - p[1]) / p[2];
      const double e = std::exp(-u * u);
      g = {e, p[0] * e * 2.0 * u / p[2], p[0] * e * 2.0 * u * u / p[2]};
      return p[0] * e;
    };
    LmOptions short_opt = detail::with_r2_tol(opt, y);
    short_opt.max_iterations = 200;
    std::array<double, 3> p1{peak, x[s.top], c_pk};
    try {
      p1 = levenberg_marquardt<3>(one, x, y, p1, std::nullopt, short_opt).params;
    } catch (const ConvergenceError&) {
    }
    std::size_t q = 0;
    double rq = 0.0;
    std::array<double, 3> g{};
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = y[i] - one(x[i], p1, g);
      if (std::abs(r) > std::abs(rq)) {
        rq = r;
        q = i;
      }
    }
    starts.push_back({p1[0], p1[1], p1[2], rq, x[q], c_pk});
  }

  {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::array<double, 6> p{s.height, x[s.top], c_pk, s.base, x_mid, 2.0 * span};
    for (std::size_t i = 0; i < 6; ++i) p[i] *= std::exp(0.3 * nd(rng));
    p[1] = x[s.top] + s.half_width * nd(rng);
    p[4] = x_mid + 0.25 * span * nd(rng);
    starts.push_back(p);
  }

  if (opt.warm_start.size() == 6) {
    std::array<double, 6> w{};
    std::copy(opt.warm_start.begin(), opt.warm_start.end(), w.begin());
    starts.insert(starts.begin(), w);
  }
  if (box)
    for (auto& st : starts) st = detail::clamp_to<6>(st, box);
  if (bounds && bounds->lower.size() == 6) {
    // Midpoint of the box: a start that is always feasible and interior.
    std::array<double, 6> mid{};
    for (std::size_t i = 0; i < 6; ++i) mid[i] = 0.5 * (bounds->lower[i] + bounds->upper[i]);
    starts.push_back(mid);
  }

  const auto search = box ? *box : detail::plausibility_box<6>(x);
  for (auto& st : starts) {
    st[2] = std::abs(st[2]);
    st[5] = std::abs(st[5]);
    st = detail::clamp_to<6>(st, search);
  }
  const auto best = detail::best_of<6>(model, x, y, starts, search, detail::with_r2_tol(opt, y));
  FitRecord rec;
  rec.r2 = r_squared(y, best.sse);
  rec.bounded = box.has_value();
  rec.active_bounds = detail::active_set<6>(best.params, box);
  auto g = GaussianPair::from(best.params);
  auto cg = canonical(g);
  const auto arr = cg.to_array();
  // A component swap that would leave the box keeps the box order.
  if (!rec.bounded || detail::inside(arr, bounds)) g = cg;
  const auto out = g.to_array();
  rec.params.assign(out.begin(), out.end());
  return rec;
}

// Lorentzian with offset. Default: the single 4-parameter form. Triple mode fits
// three Lorentzians with a shared offset and reports the dominant term with d.
inline FitRecord fit_lorentz(std::span<const double> x, std::span<const double> y, const ParamBounds* bounds = nullptr,
                             const FitOptions& opt = {}) {
  detail::check_trace(x, y, 12);
  const auto s = detail::describe(x, y, std::nullopt);
  const auto box = detail::to_box<4>(bounds);

  std::vector<std::array<double, 4>> starts;
  const double c_pk = s.half_width;
  starts.push_back({s.height * c_pk * c_pk, x[s.top], c_pk, s.base});
  const double c_iqr = std::max(0.5 * (s.q75 - s.q25), 1e-6);
  starts.push_back({s.height * c_iqr * c_iqr, s.centroid, c_iqr, s.base});
  {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    const double c = c_pk * std::exp(0.3 * nd(rng));
    starts.push_back({s.height * std::exp(0.2 * nd(rng)) * c * c, x[s.top] + 0.5 * c_pk * nd(rng), c, s.base});
  }
  if (opt.warm_start.size() == 4) {
    std::array<double, 4> w{};
    std::copy(opt.warm_start.begin(), opt.warm_start.end(), w.begin());
    starts.insert(starts.begin(), w);
  }
  if (box) {
    for (auto& st : starts) st = detail::clamp_to<4>(st, box);
    std::array<double, 4> mid{};
    for (std::size_t i = 0; i < 4; ++i) mid[i] = 0.5 * (box->lower[i] + box->upper[i]);
    starts.push_back(mid);
  }
  auto model4 = [](double xv, const std::array<double, 4>& p, std::array<double, 4>& g) {
    return detail::lorentz_sum_eval<4>(xv, p, g);
  };
  const auto search = box ? *box : detail::plausibility_box<4>(x);
  for (auto& st : starts) {
    st[2] = std::abs(st[2]);
    st = detail::clamp_to<4>(st, search);
  }
  auto best = detail::best_of<4>(model4, x, y, starts, search, detail::with_r2_tol(opt, y));
  std::array<double, 4> result = best.params;
  double sse = best.sse;
  std::vector<std::size_t> active = detail::active_set<4>(best.params, box);

  if (opt.lorentz_triple) {
    // Greedy seeding: the single fit plus two small terms at the largest residuals.
    std::array<double, 10> p10{};
    std::copy(best.params.begin(), best.params.begin() + 3, p10.begin());
    p10[9] = best.params[3];
    std::vector<double> resid(x.size());
    std::array<double, 4> g4{};
    for (std::size_t i = 0; i < x.size(); ++i) resid[i] = y[i] - model4(x[i], best.params, g4);
    for (int t = 1; t <= 2; ++t) {
      std::size_t q = 0;
      for (std::size_t i = 1; i < x.size(); ++i)
        if (std::abs(resid[i]) > std::abs(resid[q])) q = i;
      const double c = std::abs(best.params[2]);
      p10[3 * t] = resid[q] * c * c;
      p10[3 * t + 1] = x[q];
      p10[3 * t + 2] = c;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - x[q];
        resid[i] -= p10[3 * t] / (dx * dx + c * c);
      }
    }
    auto model10 = [](double xv, const std::array<double, 10>& p, std::array<double, 10>& g) {
      return detail::lorentz_sum_eval<10>(xv, p, g);
    };
    try {
      const auto box10 = detail::plausibility_box<10>(x);
      for (std::size_t k = 0; k < 3; ++k) p10[3 * k + 2] = std::abs(p10[3 * k + 2]);
      const auto r = levenberg_marquardt<10>(model10, x, y, detail::clamp_to<10>(p10, box10), box10, detail::with_r2_tol(opt, y));
      if (r.sse < sse) {
        std::size_t dom = 0;
        double hmax = -1.0;
        for (std::size_t k = 0; k < 3; ++k) {
          const double h = std::abs(r.params[3 * k] / (r.params[3 * k + 2] * r.params[3 * k + 2]));
          if (h > hmax) {
            hmax = h;
            dom = k;
          }
        }
        std::array<double, 4> cand{r.params[3 * dom], r.params[3 * dom + 1], r.params[3 * dom + 2], r.params[9]};
        if (detail::inside(cand, bounds)) {
          result = cand;
          sse = r.sse;
          active = detail::active_set<4>(result, box);
        }
      }
    } catch (const ConvergenceError&) {
    }
  }

  FitRecord rec;
  rec.r2 = r_squared(y, sse);
  rec.bounded = box.has_value();
  rec.active_bounds = std::move(active);
  auto l = LorentzQuad::from(result);
  auto cl = canonical(l);
  if (!rec.bounded || detail::inside(cl.to_array(), bounds)) l = cl;
  const auto out = l.to_array();
  rec.params.assign(out.begin(), out.end());
  return rec;
}

// Deterministic seed for the perturbed start of one (round, kind) fit.
inline std::uint64_t fit_seed(std::uint64_t master, int round_index, FeatureKind kind) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(round_index), static_cast<std::uint32_t>(index_of(kind)), 0xf17u};
  std::array<std::uint32_t, 2> v{};
  seq.generate(v.begin(), v.end());
  return (static_cast<std::uint64_t>(v[0]) << 32) | v[1];
}

// Fits one sweep against its kind's model on the normalized frequency axis.
inline FitRecord fit_sweep(const FrequencySweep& sweep, const NormStats& norm, const ParamBounds* bounds,
                           const FitOptions& opt) {
  const auto x = normalize_frequency(sweep, norm);
  const auto y = feature_trace(sweep).value;
  FitOptions o = opt;
  o.seed = fit_seed(opt.seed, sweep.round_index, sweep.kind);
  FitRecord rec;
  try {
    if (uses_lorentz(sweep.kind)) {
      rec = fit_lorentz(x, y, bounds, o);
    } else {
      const double sign = extremum_of(sweep.kind) == ExtremumMode::Max ? 1.0 : -1.0;
      rec = fit_gauss2(x, y, bounds, o, sign);
    }
  } catch (const std::exception& e) {
    rec = FitRecord{};
    rec.r2 = -std::numeric_limits<double>::infinity();
    rec.bounded = bounds && !bounds->lower.empty();
    rec.error = e.what();
    rec.params.assign(param_count(sweep.kind), std::numeric_limits<double>::quiet_NaN());
  }
  rec.kind = sweep.kind;
  rec.round_index = sweep.round_index;
  rec.timestamp_s = sweep.timestamp_s;
  return rec;
}

inline constexpr std::size_t kMinBoundFits = 50;

// Per-kind [P2, P98] of each parameter over successful unbounded fits. A
// degenerate range is widened by 1e-9 relative and flagged.
inline FitBounds derive_bounds(std::span<const FitRecord> unbounded, std::size_t min_fits = kMinBoundFits,
                               double q_lo = 0.02, double q_hi = 0.98) {
  FitBounds out;
  for (FeatureKind k : kAllFeatures) {
    const std::size_t np = param_count(k);
    std::vector<std::vector<double>> cols(np);
    for (const auto& r : unbounded)
      if (r.kind == k && r.ok() && r.params.size() == np)
        for (std::size_t j = 0; j < np; ++j) cols[j].push_back(r.params[j]);
    const std::size_t n = cols[0].size();
    if (n == 0) continue;
    if (n < min_fits)
      throw InputError("derive_bounds: " + std::string(to_string(k)) + " has " + std::to_string(n) +
                       " unbounded fits, need at least " + std::to_string(min_fits));
    auto& pb = out[k];
    pb.lower.resize(np);
    pb.upper.resize(np);
    pb.widened.assign(np, false);
    for (std::size_t j = 0; j < np; ++j) {
      std::sort(cols[j].begin(), cols[j].end());
      double lo = percentile_sorted(cols[j], q_lo), hi = percentile_sorted(cols[j], q_hi);
      if (!(lo < hi)) {
        const double v = 0.5 * (lo + hi);
        const double eps = v != 0.0 ? 1e-9 * std::abs(v) : 1e-9;
        lo = v - eps;
        hi = v + eps;
        pb.widened[j] = true;
      }
      pb.lower[j] = lo;
      pb.upper[j] = hi;
    }
  }
  return out;
}

struct QcDrop {
  FeatureKind kind;
  int round_index;
  double r2;
  std::string reason;
};

struct QcResult {
  std::vector<FitRecord> retained;
  std::vector<QcDrop> dropped;
};

inline constexpr double kQcThreshold = 0.95;

inline QcResult qc_filter(std::span<const FitRecord> records, double threshold = kQcThreshold) {
  QcResult out;
  for (const auto& r : records) {
    if (!r.ok())
      out.dropped.push_back({r.kind, r.round_index, r.r2, r.error});
    else if (r.r2 < threshold)
      out.dropped.push_back({r.kind, r.round_index, r.r2, "r2 below threshold"});
    else
      out.retained.push_back(r);
  }
  return out;
}

// Frequency normalization per kind from the first sweep (lowest round index)
// of that kind.
inline std::array<std::optional<NormStats>, kFeatureCount> norm_stats_by_kind(std::span<const FrequencySweep> sweeps) {
  std::array<std::optional<NormStats>, kFeatureCount> out;
  std::array<int, kFeatureCount> first_round;
  first_round.fill(std::numeric_limits<int>::max());
  for (const auto& s : sweeps) {
    const auto k = index_of(s.kind);
    if (s.round_index < first_round[k]) {
      first_round[k] = s.round_index;
      out[k] = reference_stats(s);
    }
  }
  return out;
}

struct FitConfig {
  FitOptions options;
  double qc_threshold = kQcThreshold;
  std::size_t min_bound_fits = kMinBoundFits;
  bool bounded_refit = true;
};

struct DatasetFit {
  std::vector<FitRecord> unbounded;
  std::optional<FitBounds> bounds;
  std::vector<FitRecord> records;  // final fits (bounded when a refit ran)
  QcResult qc;
};

inline std::vector<FitRecord> fit_all(std::span<const FrequencySweep> sweeps,
                                      const std::array<std::optional<NormStats>, kFeatureCount>& norm,
                                      const FitBounds* bounds, const FitOptions& opt,
                                      std::span<const FitRecord> warm = {}) {
  std::vector<FitRecord> out(sweeps.size());
  parallel_for(sweeps.size(), [&](std::size_t i) {
    const auto& s = sweeps[i];
    const ParamBounds* pb = bounds && bounds->has(s.kind) ? &(*bounds)[s.kind] : nullptr;
    FitOptions o = opt;
    if (i < warm.size() && warm[i].ok()) o.warm_start = warm[i].params;
    out[i] = fit_sweep(s, *norm[index_of(s.kind)], pb, o);
  });
  return out;
}

// Unbounded fits of every sweep, then percentile bounds (derived here unless
// supplied), bounded refits and R^2 quality control.
inline DatasetFit fit_dataset(std::span<const FrequencySweep> sweeps, const FitConfig& cfg,
                              std::optional<FitBounds> fixed_bounds = std::nullopt) {
  DatasetFit out;
  const auto norm = norm_stats_by_kind(sweeps);
  out.unbounded = fit_all(sweeps, norm, nullptr, cfg.options);
  if (cfg.bounded_refit) {
    out.bounds = fixed_bounds ? std::move(fixed_bounds) : derive_bounds(out.unbounded, cfg.min_bound_fits);
    out.records = fit_all(sweeps, norm, &*out.bounds, cfg.options, out.unbounded);
  } else {
    out.records = out.unbounded;
  }
  out.qc = qc_filter(out.records, cfg.qc_threshold);
  return out;
}

}  // namespace qcm
