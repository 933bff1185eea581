#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qcm/common.hpp"

namespace qcm {

struct ConsensusConfig {
  double alpha = 0.6;
  double tau = 0.5;
  std::size_t ldof_k = 20;
  std::size_t trees = 100;
  std::size_t subsample = 256;
  std::uint64_t seed = 0;
};

// ---- LDOF -----------------------------------------------------------------

// Mean distance to the k nearest neighbours over the mean pairwise distance
// among those neighbours. Coincident neighbourhoods give +inf.
inline std::vector<double> ldof_scores(const Matrix& x, std::size_t k) {
  const std::size_t n = x.rows(), d = x.cols();
  if (k < 2 || n <= k) throw InputError("ldof_scores: need N > k >= 2");
  std::vector<double> dist(n * n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double t = x(i, c) - x(j, c);
        s += t * t;
      }
      dist[i * n + j] = std::sqrt(s);
    }
  });
  std::vector<double> out(n);
  parallel_for(n, [&](std::size_t i) {
    std::vector<std::size_t> idx;
    idx.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) idx.push_back(j);
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), [&](std::size_t a, std::size_t b) {
      const double da = dist[i * n + a], db = dist[i * n + b];
      return da < db || (da == db && a < b);
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    double knn = 0.0;
    for (auto j : idx) knn += dist[i * n + j];
    knn /= static_cast<double>(k);
    double inner = 0.0;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = a + 1; b < k; ++b) inner += dist[idx[a] * n + idx[b]];
    inner /= static_cast<double>(k * (k - 1) / 2);
    out[i] = inner > 0.0 ? knn / inner : std::numeric_limits<double>::infinity();
  });
  return out;
}

// ---- Isolation forest -----------------------------------------------------

// Average unsuccessful-search path length in a binary search tree of n items.
inline double iforest_c(double n) {
  if (n <= 1.0) return 0.0;
  if (n <= 2.0) return 1.0;
  constexpr double euler = 0.57721566490153286;
  return 2.0 * (std::log(n - 1.0) + euler) - 2.0 * (n - 1.0) / n;
}

namespace detail {

struct IsoNode {
  int feature = -1;  // -1: leaf
  double split = 0.0;
  int left = -1, right = -1;
  std::size_t size = 0;
};

inline int grow_iso(std::vector<IsoNode>& nodes, const Matrix& x, std::vector<std::size_t>& idx, std::size_t lo,
                    std::size_t hi, int depth, int max_depth, std::mt19937_64& rng) {
  const int id = static_cast<int>(nodes.size());
  nodes.push_back({});
  nodes[id].size = hi - lo;
  if (hi - lo <= 1 || depth >= max_depth) return id;
  std::vector<int> candidates;
  std::vector<std::pair<double, double>> ranges;
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double mn = x(idx[lo], c), mx = mn;
    for (std::size_t i = lo + 1; i < hi; ++i) {
      mn = std::min(mn, x(idx[i], c));
      mx = std::max(mx, x(idx[i], c));
    }
    if (mx > mn) {
      candidates.push_back(static_cast<int>(c));
      ranges.emplace_back(mn, mx);
    }
  }
  if (candidates.empty()) return id;
  const auto pick = std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng);
  const int f = candidates[pick];
  const auto [mn, mx] = ranges[pick];
  double split = std::uniform_real_distribution<double>(mn, mx)(rng);
  if (!(split > mn)) split = std::nextafter(mn, mx);
  const auto mid_it = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(hi),
                                     [&](std::size_t r) { return x(r, static_cast<std::size_t>(f)) < split; });
  const auto mid = static_cast<std::size_t>(mid_it - idx.begin());
  nodes[id].feature = f;
  nodes[id].split = split;
  const int l = grow_iso(nodes, x, idx, lo, mid, depth + 1, max_depth, rng);
  const int r = grow_iso(nodes, x, idx, mid, hi, depth + 1, max_depth, rng);
  nodes[id].left = l;
  nodes[id].right = r;
  return id;
}

}  // namespace detail

// Standard isolation score 2^(-E[h(x)] / c(psi)); each tree draws its own
// subsample and splits from an RNG seeded by (seed, tree).
inline std::vector<double> iforest_scores(const Matrix& x, std::size_t trees = 100, std::size_t subsample = 256,
                                          std::uint64_t seed = 0) {
  const std::size_t n = x.rows();
  if (n < 8) throw InputError("iforest_scores: need at least 8 rows");
  if (trees == 0) throw InputError("iforest_scores: need at least one tree");
  const std::size_t psi = std::min(subsample, n);
  const int max_depth = static_cast<int>(std::ceil(std::log2(static_cast<double>(psi))));
  std::vector<std::vector<double>> depth(trees, std::vector<double>(n));
  parallel_for(trees, [&](std::size_t t) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(t), 0x1f0u};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t i = 0; i < psi; ++i) {
      const auto j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
      std::swap(all[i], all[j]);
    }
    std::vector<std::size_t> sample(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(psi));
    std::vector<detail::IsoNode> nodes;
    detail::grow_iso(nodes, x, sample, 0, psi, 0, max_depth, rng);
    for (std::size_t r = 0; r < n; ++r) {
      int id = 0;
      int h = 0;
      while (nodes[id].feature >= 0) {
        id = x(r, static_cast<std::size_t>(nodes[id].feature)) < nodes[id].split ? nodes[id].left : nodes[id].right;
        ++h;
      }
      depth[t][r] = h + iforest_c(static_cast<double>(nodes[id].size));
    }
  });
  const double cn = iforest_c(static_cast<double>(psi));
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    double e = 0.0;
    for (std::size_t t = 0; t < trees; ++t) e += depth[t][r];
    e /= static_cast<double>(trees);
    out[r] = std::pow(2.0, -e / cn);
  }
  return out;
}

// ---- Mahalanobis with Ledoit-Wolf shrinkage -------------------------------

struct ShrunkCovariance {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  double shrinkage = 0.0;
};

// Sample covariance (1/n) blended towards mu * I with the Ledoit-Wolf weight.
inline ShrunkCovariance ledoit_wolf(const Matrix& x) {
  const auto n = static_cast<Eigen::Index>(x.rows()), p = static_cast<Eigen::Index>(x.cols());
  if (n < 2 || p < 1) throw InputError("ledoit_wolf: need at least two rows");
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(x.data().data(), n, p);
  ShrunkCovariance out;
  out.mean = m.colwise().mean().transpose();
  const Eigen::MatrixXd xc = m.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd emp = xc.transpose() * xc / static_cast<double>(n);
  const double mu = emp.trace() / static_cast<double>(p);
  const Eigen::MatrixXd x2 = xc.array().square().matrix();
  const double beta_sum = (x2.transpose() * x2).sum();
  const double delta_sum = (xc.transpose() * xc).array().square().sum() / (static_cast<double>(n) * static_cast<double>(n));
  double beta = (beta_sum / static_cast<double>(n) - delta_sum) / (static_cast<double>(p) * static_cast<double>(n));
  double delta = (delta_sum - 2.0 * mu * emp.trace() + static_cast<double>(p) * mu * mu) / static_cast<double>(p);
  beta = std::min(beta, delta);
  out.shrinkage = beta == 0.0 ? 0.0 : beta / delta;
  out.covariance = (1.0 - out.shrinkage) * emp;
  out.covariance.diagonal().array() += out.shrinkage * mu;
  return out;
}

inline std::vector<double> mahalanobis_scores(const Matrix& x) {
  if (x.rows() <= 2) throw InputError("mahalanobis_scores: need N > 2");
  const auto lw = ledoit_wolf(x);
  Eigen::MatrixXd cov = lw.covariance;
  // All-constant input leaves a zero matrix; any positive ridge gives d = 0 there.
  if (!(cov.diagonal().maxCoeff() > 0.0)) cov.diagonal().array() += 1.0;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
  std::vector<double> out(x.rows());
  Eigen::VectorXd v(static_cast<Eigen::Index>(x.cols()));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) v[static_cast<Eigen::Index>(c)] = x(r, c) - lw.mean[static_cast<Eigen::Index>(c)];
    out[r] = std::sqrt(std::max(0.0, v.dot(ldlt.solve(v))));
  }
  return out;
}

// ---- Fusion ---------------------------------------------------------------

// Clip to the sample's own P1/P99 and min-max to [0, 1]. Non-finite scores are
// first replaced by the largest finite score; constant scores map to 0.
inline std::vector<double> normalize_scores(std::span<const double> raw, double q_lo = 0.01, double q_hi = 0.99) {
  std::vector<double> v(raw.begin(), raw.end());
  if (v.empty()) return v;
  double max_finite = -std::numeric_limits<double>::infinity();
  for (double s : v)
    if (std::isfinite(s)) max_finite = std::max(max_finite, s);
  if (!std::isfinite(max_finite)) max_finite = 0.0;
  for (double& s : v)
    if (!std::isfinite(s)) s = std::isnan(s) || s > 0 ? max_finite : -max_finite;
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  const double lo = percentile_sorted(sorted, q_lo), hi = percentile_sorted(sorted, q_hi);
  for (double& s : v) s = hi > lo ? (std::clamp(s, lo, hi) - lo) / (hi - lo) : 0.0;
  return v;
}

struct DetectorScores {
  std::vector<double> ldof, iforest, mahalanobis;          // raw
  std::vector<double> ldof_n, iforest_n, mahalanobis_n;    // normalized
};

// All three detectors on column-standardized data.
inline DetectorScores run_detectors(const Matrix& x, const ConsensusConfig& cfg) {
  const Matrix z = standardize_columns(x);
  DetectorScores s;
  s.ldof = ldof_scores(z, cfg.ldof_k);
  s.iforest = iforest_scores(z, cfg.trees, cfg.subsample, cfg.seed);
  s.mahalanobis = mahalanobis_scores(z);
  s.ldof_n = normalize_scores(s.ldof);
  s.iforest_n = normalize_scores(s.iforest);
  s.mahalanobis_n = normalize_scores(s.mahalanobis);
  return s;
}

inline double fuse(double ldof, double iforest, double mahalanobis, double alpha) {
  return alpha * ldof + 0.5 * (1.0 - alpha) * (iforest + mahalanobis);
}

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("consensus: alpha must lie in [0, 1]");
}

inline std::vector<double> fused_scores(const DetectorScores& s, double alpha) {
  check_alpha(alpha);
  const std::size_t n = s.ldof_n.size();
  if (s.iforest_n.size() != n || s.mahalanobis_n.size() != n) throw InputError("consensus: score arrays differ in length");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fuse(s.ldof_n[i], s.iforest_n[i], s.mahalanobis_n[i], alpha);
  return out;
}

// Max distance from the chord joining the end points, both axes min-max scaled.
inline std::size_t knee_index(std::span<const double> xs, std::span<const double> ys, double min_distance = 0.01) {
  const std::size_t n = xs.size();
  if (n != ys.size() || n < 5) throw InputError("knee: need at least 5 aligned points");
  for (std::size_t i = 1; i < n; ++i)
    if (!(xs[i] > xs[i - 1])) throw InputError("knee: grid must be strictly increasing");
  const auto [ymin, ymax] = std::minmax_element(ys.begin(), ys.end());
  if (!(*ymax > *ymin)) throw InputError("knee: flat curve has no knee; choose the parameter manually");
  const double xr = xs[n - 1] - xs[0], yr = *ymax - *ymin;
  auto px = [&](std::size_t i) { return (xs[i] - xs[0]) / xr; };
  auto py = [&](std::size_t i) { return (ys[i] - *ymin) / yr; };
  const double dx = px(n - 1) - px(0), dy = py(n - 1) - py(0);
  const double len = std::hypot(dx, dy);
  std::size_t best = 0;
  double best_d = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = std::abs(dy * (px(i) - px(0)) - dx * (py(i) - py(0))) / len;
    if (d > best_d + 1e-12) {
      best_d = d;
      best = i;
    }
  }
  if (best_d < min_distance) throw InputError("knee: curve is too close to a straight line; choose the parameter manually");
  return best;
}

inline std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 20; ++i) g.push_back(0.05 * i);
  return g;
}

inline std::vector<std::size_t> alpha_sweep(const DetectorScores& s, std::span<const double> grid, double tau) {
  std::vector<std::size_t> counts;
  for (double a : grid) {
    const auto f = fused_scores(s, a);
    counts.push_back(static_cast<std::size_t>(std::count_if(f.begin(), f.end(), [&](double v) { return v >= tau; })));
  }
  return counts;
}

inline double elbow_alpha(std::span<const double> grid, std::span<const std::size_t> counts) {
  std::vector<double> y(counts.begin(), counts.end());
  return grid[knee_index(grid, y)];
}

// Detector-level threshold: knee of (threshold, count of scores >= threshold)
// over a 0.01 grid on normalized scores.
inline std::optional<double> detector_elbow(std::span<const double> normalized) {
  std::vector<double> t, c;
  for (int i = 0; i <= 100; ++i) {
    const double th = 0.01 * i;
    t.push_back(th);
    c.push_back(static_cast<double>(std::count_if(normalized.begin(), normalized.end(), [&](double v) { return v >= th; })));
  }
  try {
    return t[knee_index(t, c)];
  } catch (const InputError&) {
    return std::nullopt;
  }
}

struct VennCounts {
  std::size_t ldof_only = 0, iforest_only = 0, mahalanobis_only = 0;
  std::size_t ldof_iforest = 0, ldof_mahalanobis = 0, iforest_mahalanobis = 0, all_three = 0;
  std::size_t consensus_outside = 0;  // flagged by consensus, by no single detector
};

struct ConsensusResult {
  std::vector<double> s;
  std::vector<bool> flags;
  std::array<double, 3> detector_threshold{};  // ldof, iforest, mahalanobis
  std::array<bool, 3> elbow_found{};
  std::vector<std::array<bool, 3>> detector_flags;
  std::array<std::size_t, 3> detector_counts{};
  VennCounts venn;
  std::size_t flagged = 0;
};

// Per-detector thresholds default to each detector's elbow; tau when a detector
// curve has no knee.
inline ConsensusResult consensus(const DetectorScores& s, const ConsensusConfig& cfg,
                                 std::optional<std::array<double, 3>> thresholds = std::nullopt) {
  ConsensusResult r;
  r.s = fused_scores(s, cfg.alpha);
  const std::array<const std::vector<double>*, 3> det = {&s.ldof_n, &s.iforest_n, &s.mahalanobis_n};
  for (std::size_t d = 0; d < 3; ++d) {
    if (thresholds) {
      r.detector_threshold[d] = (*thresholds)[d];
      r.elbow_found[d] = false;
    } else {
      const auto e = detector_elbow(*det[d]);
      r.elbow_found[d] = e.has_value();
      r.detector_threshold[d] = e.value_or(cfg.tau);
    }
  }
  const std::size_t n = r.s.size();
  r.flags.resize(n);
  r.detector_flags.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.flags[i] = r.s[i] >= cfg.tau;
    r.flagged += r.flags[i];
    auto& f = r.detector_flags[i];
    for (std::size_t d = 0; d < 3; ++d) {
      f[d] = (*det[d])[i] >= r.detector_threshold[d];
      r.detector_counts[d] += f[d];
    }
    const int m = f[0] * 1 + f[1] * 2 + f[2] * 4;
    switch (m) {
      case 1: ++r.venn.ldof_only; break;
      case 2: ++r.venn.iforest_only; break;
      case 4: ++r.venn.mahalanobis_only; break;
      case 3: ++r.venn.ldof_iforest; break;
      case 5: ++r.venn.ldof_mahalanobis; break;
      case 6: ++r.venn.iforest_mahalanobis; break;
      case 7: ++r.venn.all_three; break;
      default:
        if (r.flags[i]) ++r.venn.consensus_outside;
    }
  }
  return r;
}

inline std::vector<std::size_t> inlier_rows(const ConsensusResult& r) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < r.flags.size(); ++i)
    if (!r.flags[i]) keep.push_back(i);
  return keep;
}

}  // namespace qcm
