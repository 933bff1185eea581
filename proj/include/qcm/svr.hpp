#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "qcm/common.hpp"

namespace qcm {

struct SvrOptions {
  double c = 10.0;
  double epsilon = 0.01;
  double gamma = 0.0;  // <= 0: 1 / (d * var(X))
  double tol = 1e-3;   // maximal violating pair gap
  long max_iterations = 10000000;
};

struct SvrModel {
  Matrix support;
  std::vector<double> coef;
  double rho = 0.0;
  double gamma = 0.0;
  long iterations = 0;

  double predict_row(std::span<const double> row) const {
    double s = -rho;
    for (std::size_t i = 0; i < support.rows(); ++i) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < support.cols(); ++c) {
        const double t = support(i, c) - row[c];
        d2 += t * t;
      }
      s += coef[i] * std::exp(-gamma * d2);
    }
    return s;
  }
};

inline double svr_default_gamma(const Matrix& x) {
  const auto& v = x.data();
  const double var = v.empty() ? 0.0 : std::pow(stddev(v), 2);
  const double d = static_cast<double>(x.cols());
  return var > 0.0 ? 1.0 / (d * var) : 1.0 / std::max(d, 1.0);
}

// epsilon-SVR dual with an RBF kernel, solved by SMO over the 2n doubled
// variables with second-order working-set selection.
inline SvrModel fit_svr(const Matrix& x, std::span<const double> y, const SvrOptions& opt = {}) {
  const std::size_t n = x.rows(), d = x.cols();
  if (y.size() != n) throw InputError("fit_svr: target length differs from row count");
  if (n < 2) throw InputError("fit_svr: need at least two rows");
  if (!(opt.c > 0.0)) throw InputError("fit_svr: C must be > 0");
  if (!(opt.epsilon >= 0.0)) throw InputError("fit_svr: epsilon must be >= 0");
  const double gamma = opt.gamma > 0.0 ? opt.gamma : svr_default_gamma(x);

  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    k[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double t = x(i, c) - x(j, c);
        d2 += t * t;
      }
      k[i * n + j] = k[j * n + i] = std::exp(-gamma * d2);
    }
  }
  const std::size_t l = 2 * n;
  std::vector<signed char> sgn(l);
  std::vector<double> alpha(l, 0.0), g(l);
  for (std::size_t i = 0; i < n; ++i) {
    sgn[i] = 1;
    sgn[i + n] = -1;
    g[i] = opt.epsilon - y[i];
    g[i + n] = opt.epsilon + y[i];
  }
  const double cap = opt.c;
  auto q = [&](std::size_t a, std::size_t b) { return sgn[a] * sgn[b] * k[(a % n) * n + (b % n)]; };
  auto upper = [&](std::size_t t) { return alpha[t] >= cap; };
  auto lower = [&](std::size_t t) { return alpha[t] <= 0.0; };
  constexpr double tau = 1e-12;

  long it = 0;
  double violation = 0.0;
  for (;; ++it) {
    if (it >= opt.max_iterations)
      throw ConvergenceError("fit_svr: KKT violation " + std::to_string(violation) + " after " + std::to_string(it) +
                                 " iterations",
                             violation);
    double gmax = -std::numeric_limits<double>::infinity();
    std::size_t i = l;
    for (std::size_t t = 0; t < l; ++t) {
      if (sgn[t] == 1) {
        if (!upper(t) && -g[t] >= gmax) {
          gmax = -g[t];
          i = t;
        }
      } else if (!lower(t) && g[t] >= gmax) {
        gmax = g[t];
        i = t;
      }
    }
    if (i == l) break;
    double gmax2 = -std::numeric_limits<double>::infinity();
    double best = std::numeric_limits<double>::infinity();
    std::size_t j = l;
    for (std::size_t t = 0; t < l; ++t) {
      if (sgn[t] == 1) {
        if (!lower(t)) {
          const double diff = gmax + g[t];
          gmax2 = std::max(gmax2, g[t]);
          if (diff > 0.0) {
            double quad = 2.0 - 2.0 * sgn[i] * q(i, t);
            if (quad <= 0.0) quad = tau;
            const double obj = -diff * diff / quad;
            if (obj <= best) {
              best = obj;
              j = t;
            }
          }
        }
      } else if (!upper(t)) {
        const double diff = gmax - g[t];
        gmax2 = std::max(gmax2, -g[t]);
        if (diff > 0.0) {
          double quad = 2.0 + 2.0 * sgn[i] * q(i, t);
          if (quad <= 0.0) quad = tau;
          const double obj = -diff * diff / quad;
          if (obj <= best) {
            best = obj;
            j = t;
          }
        }
      }
    }
    violation = gmax + gmax2;
    if (violation < opt.tol || j == l) break;

    const double qij = q(i, j);
    const double ai = alpha[i], aj = alpha[j];
    if (sgn[i] != sgn[j]) {
      double quad = 2.0 + 2.0 * qij;
      if (quad <= 0.0) quad = tau;
      const double delta = (-g[i] - g[j]) / quad;
      const double diff = alpha[i] - alpha[j];
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0.0) {
        if (alpha[j] < 0.0) {
          alpha[j] = 0.0;
          alpha[i] = diff;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = -diff;
      }
      if (diff > 0.0) {
        if (alpha[i] > cap) {
          alpha[i] = cap;
          alpha[j] = cap - diff;
        }
      } else if (alpha[j] > cap) {
        alpha[j] = cap;
        alpha[i] = cap + diff;
      }
    } else {
      double quad = 2.0 - 2.0 * qij;
      if (quad <= 0.0) quad = tau;
      const double delta = (g[i] - g[j]) / quad;
      const double sum = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > cap) {
        if (alpha[i] > cap) {
          alpha[i] = cap;
          alpha[j] = sum - cap;
        }
      } else if (alpha[j] < 0.0) {
        alpha[j] = 0.0;
        alpha[i] = sum;
      }
      if (sum > cap) {
        if (alpha[j] > cap) {
          alpha[j] = cap;
          alpha[i] = sum - cap;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = sum;
      }
    }
    const double di = alpha[i] - ai, dj = alpha[j] - aj;
    for (std::size_t t = 0; t < l; ++t) g[t] += q(i, t) * di + q(j, t) * dj;
  }

  double ub = std::numeric_limits<double>::infinity(), lb = -ub, sum_free = 0.0;
  int n_free = 0;
  for (std::size_t t = 0; t < l; ++t) {
    const double yg = sgn[t] * g[t];
    if (upper(t)) {
      if (sgn[t] == -1) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (lower(t)) {
      if (sgn[t] == 1) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      ++n_free;
      sum_free += yg;
    }
  }
  SvrModel m;
  m.rho = n_free > 0 ? sum_free / n_free : 0.5 * (ub + lb);
  m.gamma = gamma;
  m.iterations = it;
  m.support = Matrix(0, d);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = alpha[i] - alpha[i + n];
    if (c != 0.0) {
      m.support.append_row(x.row(i));
      m.coef.push_back(c);
    }
  }
  return m;
}

}  // namespace qcm
