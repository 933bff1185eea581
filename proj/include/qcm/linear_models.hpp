#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "qcm/common.hpp"

namespace qcm {

struct LinearModel {
  std::vector<double> coef;
  double intercept = 0.0;
  int sweeps = 0;
  double gap = 0.0;

  double predict_row(std::span<const double> row) const {
    double s = intercept;
    for (std::size_t j = 0; j < coef.size(); ++j) s += coef[j] * row[j];
    return s;
  }
};

struct ElasticNetOptions {
  double lambda = 1e-3;
  double l1_ratio = 1.0;  // 1 = lasso
  double tol = 1e-6;      // duality gap relative to ||y - mean||^2
  int max_sweeps = 200000;
  int check_every = 10;
};

// Minimizes (1/2n)||y - b - Xw||^2 + lambda*(r||w||_1 + (1-r)/2 ||w||^2)
// by cyclic coordinate descent on the Gram matrix of the centered data.
// Stops once the duality gap falls under tol*||y_c||^2 (objective scaled by n).
inline LinearModel fit_elastic_net(const Matrix& x, std::span<const double> y, const ElasticNetOptions& opt = {}) {
  const std::size_t n = x.rows(), d = x.cols();
  if (y.size() != n) throw InputError("fit_elastic_net: target length differs from row count");
  if (n < 2) throw InputError("fit_elastic_net: need at least two rows");
  if (!(opt.lambda >= 0.0)) throw InputError("fit_elastic_net: lambda must be >= 0");
  if (!(opt.l1_ratio >= 0.0 && opt.l1_ratio <= 1.0)) throw InputError("fit_elastic_net: l1_ratio must lie in [0, 1]");

  std::vector<double> xm(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) xm[j] += x(r, j);
  for (auto& v : xm) v /= static_cast<double>(n);
  const double ym = mean(y);

  std::vector<double> gram(d * d, 0.0), xty(d, 0.0);
  double yty = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double yr = y[r] - ym;
    yty += yr * yr;
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = x(r, a) - xm[a];
      xty[a] += xa * yr;
      for (std::size_t b = a; b < d; ++b) gram[a * d + b] += xa * (x(r, b) - xm[b]);
    }
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < a; ++b) gram[a * d + b] = gram[b * d + a];

  const double nn = static_cast<double>(n);
  const double l1 = opt.lambda * opt.l1_ratio * nn;
  const double l2 = opt.lambda * (1.0 - opt.l1_ratio) * nn;
  std::vector<double> w(d, 0.0), gw(d, 0.0);  // gw = G w

  auto gap_now = [&] {
    double wgw = 0.0, wxty = 0.0, wn2 = 0.0, wl1 = 0.0, dual = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      wgw += w[j] * gw[j];
      wxty += w[j] * xty[j];
      wn2 += w[j] * w[j];
      wl1 += std::abs(w[j]);
      dual = std::max(dual, std::abs(xty[j] - gw[j] - l2 * w[j]));
    }
    const double rr = std::max(0.0, yty - 2.0 * wxty + wgw);
    const double ry = yty - wxty;
    double c = 1.0, g;
    if (dual > l1) {
      c = l1 / dual;
      g = 0.5 * (rr + rr * c * c);
    } else {
      g = rr;
    }
    g += l1 * wl1 - c * ry + 0.5 * l2 * (1.0 + c * c) * wn2;
    return g;
  };

  auto primal = [&] {
    double wgw = 0.0, wxty = 0.0, wn2 = 0.0, wl1 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      wgw += w[j] * gw[j];
      wxty += w[j] * xty[j];
      wn2 += w[j] * w[j];
      wl1 += std::abs(w[j]);
    }
    return 0.5 * std::max(0.0, yty - 2.0 * wxty + wgw) + l1 * wl1 + 0.5 * l2 * wn2;
  };
  auto refresh_gw = [&] {
    for (std::size_t k = 0; k < d; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        if (w[j] != 0.0) s += gram[k * d + j] * w[j];
      gw[k] = s;
    }
  };

  // Feature-sign steps on the current support: solve the sign-fixed system,
  // walk towards it up to the first coefficient that would change sign, zero
  // that one and repeat. Kept only if the objective went down.
  auto polish = [&] {
    const auto w_old = w, gw_old = gw;
    const double p_old = primal();
    for (std::size_t pass = 0; pass < d; ++pass) {
      std::vector<std::size_t> act;
      for (std::size_t j = 0; j < d; ++j)
        if (w[j] != 0.0) act.push_back(j);
      if (act.empty()) break;
      const auto m = static_cast<Eigen::Index>(act.size());
      Eigen::MatrixXd a(m, m);
      Eigen::VectorXd b(m);
      for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index k = 0; k < m; ++k) a(i, k) = gram[act[i] * d + act[k]];
        a(i, i) += l2;
        b(i) = xty[act[i]] - l1 * (w[act[i]] > 0.0 ? 1.0 : -1.0);
      }
      const Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
      if (ldlt.info() != Eigen::Success) break;
      const Eigen::VectorXd sol = ldlt.solve(b);
      if (!sol.allFinite()) break;
      double t = 1.0;
      Eigen::Index hit = -1;
      for (Eigen::Index i = 0; i < m; ++i) {
        const double wi = w[act[i]];
        if ((sol(i) > 0.0) != (wi > 0.0) || sol(i) == 0.0) {
          const double ti = wi / (wi - sol(i));
          if (ti < t) {
            t = ti;
            hit = i;
          }
        }
      }
      for (Eigen::Index i = 0; i < m; ++i) w[act[i]] += t * (sol(i) - w[act[i]]);
      if (hit < 0) break;
      w[act[hit]] = 0.0;
    }
    refresh_gw();
    if (primal() >= p_old) {
      w = w_old;
      gw = gw_old;
    }
  };

  LinearModel m;
  const double tol = opt.tol * yty;
  bool done = false;
  for (int s = 1; s <= opt.max_sweeps; ++s) {
    double wmax = 0.0, dmax = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double gjj = gram[j * d + j];
      if (gjj <= 0.0) continue;
      const double old = w[j];
      const double rho = xty[j] - gw[j] + gjj * old;
      const double shrunk = std::copysign(std::max(std::abs(rho) - l1, 0.0), rho);
      const double nw = shrunk / (gjj + l2);
      if (nw != old) {
        const double delta = nw - old;
        for (std::size_t k = 0; k < d; ++k) gw[k] += gram[k * d + j] * delta;
        w[j] = nw;
        dmax = std::max(dmax, std::abs(delta));
      }
      wmax = std::max(wmax, std::abs(nw));
    }
    m.sweeps = s;
    if (s % opt.check_every == 0 || dmax <= 1e-12 * std::max(wmax, 1e-300) || dmax == 0.0) {
      m.gap = gap_now();
      if (m.gap > tol && s % (10 * opt.check_every) == 0) {
        polish();
        m.gap = gap_now();
      }
      if (m.gap <= tol) {
        done = true;
        break;
      }
    }
  }
  if (!done)
    throw ConvergenceError("fit_elastic_net: duality gap " + std::to_string(m.gap) + " above tolerance " +
                               std::to_string(tol) + " after " + std::to_string(m.sweeps) + " sweeps",
                           m.gap);
  m.coef = w;
  m.intercept = ym;
  for (std::size_t j = 0; j < d; ++j) m.intercept -= w[j] * xm[j];
  return m;
}

// Smallest lambda (lasso) at which every coefficient is zero: max|X_c^T y_c| / n.
inline double lasso_lambda_max(const Matrix& x, std::span<const double> y) {
  const std::size_t n = x.rows();
  const double ym = mean(y);
  double out = 0.0;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    const auto c = x.col(j);
    const double cm = mean(c);
    double s = 0.0;
    for (std::size_t r = 0; r < n; ++r) s += (c[r] - cm) * (y[r] - ym);
    out = std::max(out, std::abs(s) / static_cast<double>(n));
  }
  return out;
}

}  // namespace qcm
