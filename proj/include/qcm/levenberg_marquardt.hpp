#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>

#include "qcm/common.hpp"

namespace qcm {

template <std::size_t N>
struct Box {
  std::array<double, N> lower;
  std::array<double, N> upper;
};

struct LmOptions {
  int max_iterations = 500;
  double ftol = 1e-10;   // relative SSE decrease
  double xtol = 1e-10;   // relative step
  double atol = 0.0;     // absolute SSE decrease; ignored while a step still halves the SSE
  double lambda0 = 1e-3;
};

template <std::size_t N>
struct LmResult {
  std::array<double, N> params{};
  double sse = 0.0;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

// Cholesky solve of a small SPD system restricted to the free set; false if not PD.
template <std::size_t N>
bool cholesky_solve(std::array<std::array<double, N>, N> a, std::array<double, N> b, const std::array<bool, N>& free,
                    std::array<double, N>& out) {
  std::array<std::size_t, N> idx{};
  std::size_t m = 0;
  for (std::size_t i = 0; i < N; ++i)
    if (free[i]) idx[m++] = i;
  std::array<std::array<double, N>, N> l{};
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[idx[i]][idx[j]];
      for (std::size_t k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
      if (i == j) {
        if (!(s > 0.0)) return false;
        l[i][i] = std::sqrt(s);
      } else {
        l[i][j] = s / l[j][j];
      }
    }
  }
  std::array<double, N> z{};
  for (std::size_t i = 0; i < m; ++i) {
    double s = b[idx[i]];
    for (std::size_t k = 0; k < i; ++k) s -= l[i][k] * z[k];
    z[i] = s / l[i][i];
  }
  out.fill(0.0);
  for (std::size_t ii = m; ii-- > 0;) {
    double s = z[ii];
    for (std::size_t k = ii + 1; k < m; ++k) s -= l[k][ii] * out[idx[k]];
    out[idx[ii]] = s / l[ii][ii];
  }
  return true;
}

}  // namespace detail

// Levenberg-Marquardt with Marquardt diagonal scaling. With a box, steps are
// projected onto it and parameters pinned at a bound with the gradient pointing
// outward are frozen for that iteration.
// model(x, p, grad) returns f(x; p) and writes df/dp into grad.
template <std::size_t N, class Model>
LmResult<N> levenberg_marquardt(const Model& model, std::span<const double> x, std::span<const double> y,
                                std::array<double, N> p, const std::optional<Box<N>>& box = std::nullopt,
                                const LmOptions& opt = {}) {
  if (x.size() != y.size()) throw InputError("levenberg_marquardt: x and y differ in length");
  auto project = [&](std::array<double, N>& q) {
    if (!box) return;
    for (std::size_t i = 0; i < N; ++i) q[i] = std::clamp(q[i], box->lower[i], box->upper[i]);
  };
  project(p);
  LmResult<N> res;
  double lambda = opt.lambda0;
  using Mat = std::array<std::array<double, N>, N>;
  Mat jtj{}, t_jtj{};
  std::array<double, N> jtr{}, t_jtr{};
  double sse = 0.0;

  // SSE, J^T J and J^T r at q in one pass.
  auto linearize_at = [&](const std::array<double, N>& q, Mat& m, std::array<double, N>& v) {
    std::array<double, N> grad{};
    for (auto& r : m) r.fill(0.0);
    v.fill(0.0);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = y[i] - model(x[i], q, grad);
      s += r * r;
      for (std::size_t a = 0; a < N; ++a) {
        v[a] += grad[a] * r;
        for (std::size_t b = 0; b <= a; ++b) m[a][b] += grad[a] * grad[b];
      }
    }
    for (std::size_t a = 0; a < N; ++a)
      for (std::size_t b = 0; b < a; ++b) m[b][a] = m[a][b];
    return s;
  };

  sse = linearize_at(p, jtj, jtr);
  if (!std::isfinite(sse)) throw ConvergenceError("levenberg_marquardt: non-finite residual at start", sse);

  for (int it = 0; it < opt.max_iterations; ++it) {
    res.iterations = it + 1;
    std::array<bool, N> free{};
    double dmax = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      free[i] = true;
      if (box) {
        if (p[i] <= box->lower[i] && jtr[i] <= 0.0) free[i] = false;
        if (p[i] >= box->upper[i] && jtr[i] >= 0.0) free[i] = false;
      }
      dmax = std::max(dmax, jtj[i][i]);
    }
    if (std::none_of(free.begin(), free.end(), [](bool b) { return b; }) || dmax == 0.0) {
      res.converged = true;
      break;
    }

    bool accepted = false;
    while (!accepted) {
      auto a = jtj;
      for (std::size_t i = 0; i < N; ++i) a[i][i] += lambda * std::max(jtj[i][i], 1e-15 * dmax);
      std::array<double, N> step{};
      std::array<double, N> trial = p;
      double trial_sse = std::numeric_limits<double>::infinity();
      if (detail::cholesky_solve<N>(a, jtr, free, step)) {
        for (std::size_t i = 0; i < N; ++i) trial[i] += step[i];
        project(trial);
        trial_sse = linearize_at(trial, t_jtj, t_jtr);
      }
      if (std::isfinite(trial_sse) && trial_sse < sse) {
        bool small = true;
        for (std::size_t i = 0; i < N; ++i)
          if (std::abs(trial[i] - p[i]) > opt.xtol * (std::abs(p[i]) + opt.xtol)) small = false;
        const double drop = sse - trial_sse;
        p = trial;
        sse = trial_sse;
        jtj = t_jtj;
        jtr = t_jtr;
        lambda = std::max(lambda / 3.0, 1e-15);
        accepted = true;
        // atol only once progress is no longer superlinear, so exact data still converges fully.
        if (drop <= opt.ftol * sse || (drop <= opt.atol && drop <= sse) || small) {
          res.converged = true;
          break;
        }
      } else {
        lambda *= 4.0;
        if (lambda > 1e16) {
          // No descent direction left: stationary within numerical precision.
          res.converged = true;
          break;
        }
      }
    }
    if (res.converged) break;
  }
  res.params = p;
  res.sse = sse;
  return res;
}

}  // namespace qcm
