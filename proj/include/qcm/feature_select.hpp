#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "qcm/common.hpp"

namespace qcm {

struct MiConfig {
  int bins = 8;

  void validate() const {
    if (bins < 2) throw InputError("MiConfig: bins must be at least 2");
  }
};

// Equal-frequency bins by rank: sorted position i goes to bin floor(i * bins / n).
// Tied values take the bin of their first sorted occurrence.
inline std::vector<int> quantile_bins(std::span<const double> v, int bins) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<int> out(n);
  int current = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = static_cast<int>(i * static_cast<std::size_t>(bins) / n);
    if (i == 0 || v[order[i]] != v[order[i - 1]]) current = b;
    out[order[i]] = current;
  }
  return out;
}

// Plug-in mutual information in bits of two binned variables.
inline double binned_mi(std::span<const int> a, std::span<const int> b, int bins) {
  const std::size_t n = a.size();
  std::vector<double> joint(static_cast<std::size_t>(bins * bins), 0.0), pa(bins, 0.0), pb(bins, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    joint[static_cast<std::size_t>(a[i] * bins + b[i])] += 1.0;
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
  }
  const double nn = static_cast<double>(n);
  double mi = 0.0;
  for (int i = 0; i < bins; ++i)
    for (int j = 0; j < bins; ++j) {
      const double c = joint[static_cast<std::size_t>(i * bins + j)];
      if (c > 0.0) mi += c / nn * std::log2(c * nn / (pa[i] * pb[j]));
    }
  return std::max(0.0, mi);
}

inline double mutual_information(std::span<const double> x, std::span<const double> y, const MiConfig& cfg = {}) {
  cfg.validate();
  if (x.size() != y.size()) throw InputError("mutual_information: lengths differ");
  if (x.size() < static_cast<std::size_t>(4 * cfg.bins))
    throw InputError("mutual_information: need at least 4 samples per bin");
  const auto bx = quantile_bins(x, cfg.bins), by = quantile_bins(y, cfg.bins);
  return binned_mi(bx, by, cfg.bins);
}

struct Relevance {
  std::vector<double> relevance;  // I(x_i; y)
  Matrix redundancy;              // I(x_i; x_j), diagonal H(x_i)
};

inline Relevance relevance_and_redundancy(const Matrix& x, std::span<const double> y, const MiConfig& cfg = {}) {
  cfg.validate();
  const std::size_t n = x.rows(), d = x.cols();
  if (y.size() != n) throw InputError("relevance_and_redundancy: target length differs from row count");
  if (n < static_cast<std::size_t>(4 * cfg.bins)) throw InputError("relevance_and_redundancy: need at least 4 samples per bin");
  std::vector<std::vector<int>> bins(d);
  for (std::size_t c = 0; c < d; ++c) bins[c] = quantile_bins(x.col(c), cfg.bins);
  const auto by = quantile_bins(y, cfg.bins);
  Relevance r;
  r.relevance.resize(d);
  r.redundancy = Matrix(d, d);
  parallel_for(d, [&](std::size_t i) {
    r.relevance[i] = binned_mi(bins[i], by, cfg.bins);
    for (std::size_t j = i; j < d; ++j) r.redundancy(i, j) = binned_mi(bins[i], bins[j], cfg.bins);
  });
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < i; ++j) r.redundancy(i, j) = r.redundancy(j, i);
  return r;
}

struct RankResult {
  std::vector<std::size_t> order;
  std::vector<double> scores;     // criterion value at each selection step
  std::vector<double> relevance;  // all columns
};

// Greedy mRMR, difference form: next pick maximizes
// relevance_j - mean_{s in S} redundancy_js. Ties go to the lower column index.
inline RankResult mrmr_from(const Relevance& rel, std::size_t k) {
  const std::size_t d = rel.relevance.size();
  if (k < 1 || k > d) throw InputError("mrmr_rank: k must lie in [1, number of columns]");
  RankResult out;
  out.relevance = rel.relevance;
  std::vector<bool> used(d, false);
  std::vector<double> red_sum(d, 0.0);
  for (std::size_t step = 0; step < k; ++step) {
    std::size_t best = d;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d; ++j) {
      if (used[j]) continue;
      const double sc = step == 0 ? rel.relevance[j] : rel.relevance[j] - red_sum[j] / static_cast<double>(step);
      if (sc > best_score) {
        best_score = sc;
        best = j;
      }
    }
    used[best] = true;
    out.order.push_back(best);
    out.scores.push_back(best_score);
    for (std::size_t j = 0; j < d; ++j) red_sum[j] += rel.redundancy(j, best);
  }
  return out;
}

inline RankResult mrmr_rank(const Matrix& x, std::span<const double> y, std::size_t k, const MiConfig& cfg = {}) {
  return mrmr_from(relevance_and_redundancy(x, y, cfg), k);
}

struct Correlation {
  Matrix r;
  std::vector<bool> constant;  // columns given correlation 0 by convention
};

inline Correlation pearson_matrix(const Matrix& x) {
  const std::size_t n = x.rows(), d = x.cols();
  Correlation out;
  out.r = Matrix(d, d);
  out.constant.assign(d, false);
  std::vector<std::vector<double>> z(d);
  for (std::size_t c = 0; c < d; ++c) {
    auto col = x.col(c);
    const double m = mean(col);
    double ss = 0.0;
    for (double& v : col) {
      v -= m;
      ss += v * v;
    }
    if (!(ss > 0.0)) {
      out.constant[c] = true;
    } else {
      const double s = std::sqrt(ss);
      for (double& v : col) v /= s;
    }
    z[c] = std::move(col);
  }
  for (std::size_t i = 0; i < d; ++i) {
    out.r(i, i) = 1.0;
    for (std::size_t j = i + 1; j < d; ++j) {
      double v = 0.0;
      if (!out.constant[i] && !out.constant[j]) {
        for (std::size_t t = 0; t < n; ++t) v += z[i][t] * z[j][t];
        v = std::clamp(v, -1.0, 1.0);
      }
      out.r(i, j) = out.r(j, i) = v;
    }
  }
  return out;
}

}  // namespace qcm
