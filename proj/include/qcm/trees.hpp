#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "qcm/common.hpp"

namespace qcm {

// Per-feature split thresholds from quantiles of the training column; a value
// goes to bin b when it is <= thresholds[b] and above thresholds[b-1].
struct BinMapper {
  std::vector<std::vector<double>> thresholds;

  static BinMapper fit(const Matrix& x, int max_bins = 64) {
    if (max_bins < 2 || max_bins > 256) throw InputError("BinMapper: max_bins must lie in [2, 256]");
    BinMapper m;
    const std::size_t n = x.rows();
    m.thresholds.resize(x.cols());
    for (std::size_t c = 0; c < x.cols(); ++c) {
      auto v = x.col(c);
      std::sort(v.begin(), v.end());
      std::vector<double> u;
      u.reserve(v.size());
      for (double a : v)
        if (u.empty() || a != u.back()) u.push_back(a);
      auto& t = m.thresholds[c];
      if (u.size() <= static_cast<std::size_t>(max_bins)) {
        for (std::size_t i = 0; i + 1 < u.size(); ++i) t.push_back(u[i] + 0.5 * (u[i + 1] - u[i]));
      } else {
        for (int k = 1; k < max_bins; ++k) {
          const double a = v[static_cast<std::size_t>(k) * n / static_cast<std::size_t>(max_bins)];
          const auto nx = std::upper_bound(u.begin(), u.end(), a);
          if (nx == u.end()) break;
          const double th = a + 0.5 * (*nx - a);
          if (t.empty() || th > t.back()) t.push_back(th);
        }
      }
    }
    return m;
  }

  std::size_t bins(std::size_t c) const { return thresholds[c].size() + 1; }

  std::uint8_t code(std::size_t c, double v) const {
    const auto& t = thresholds[c];
    return static_cast<std::uint8_t>(std::lower_bound(t.begin(), t.end(), v) - t.begin());
  }

  // Column-major codes: out[c * n + r].
  std::vector<std::uint8_t> codes(const Matrix& x) const {
    std::vector<std::uint8_t> out(x.rows() * x.cols());
    for (std::size_t c = 0; c < x.cols(); ++c)
      for (std::size_t r = 0; r < x.rows(); ++r) out[c * x.rows() + r] = code(c, x(r, c));
    return out;
  }
};

struct TreeNode {
  int feature = -1;  // -1: leaf
  double threshold = 0.0;
  int left = -1, right = -1;
  double value = 0.0;
};

struct Tree {
  std::vector<TreeNode> nodes;

  double predict_row(std::span<const double> row) const {
    int id = 0;
    while (nodes[id].feature >= 0) id = row[nodes[id].feature] <= nodes[id].threshold ? nodes[id].left : nodes[id].right;
    return nodes[id].value;
  }
};

struct TreeParams {
  int max_depth = 32;
  std::size_t min_leaf = 1;
  double min_hessian = 0.0;
  double lambda = 0.0;  // L2 on leaf values
  std::size_t max_features = 0;  // 0: all
};

namespace detail {

struct TreeBuilder {
  const std::vector<std::uint8_t>& codes;
  std::size_t n;
  const BinMapper& bins;
  std::span<const double> g, h;
  const TreeParams& p;
  std::mt19937_64& rng;
  std::vector<std::size_t> idx;
  Tree tree;
  std::vector<double> hg, hh;
  std::vector<std::size_t> hc, feats;

  int grow(std::size_t lo, std::size_t hi, int depth) {
    double gs = 0.0, hs = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      gs += g[idx[i]];
      hs += h[idx[i]];
    }
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({});
    tree.nodes[id].value = hs + p.lambda > 0.0 ? -gs / (hs + p.lambda) : 0.0;
    const std::size_t cnt = hi - lo;
    if (depth >= p.max_depth || cnt < 2 * std::max<std::size_t>(p.min_leaf, 1)) return id;

    const std::size_t d = bins.thresholds.size();
    const std::size_t m = p.max_features == 0 ? d : std::min(p.max_features, d);
    feats.resize(d);
    std::iota(feats.begin(), feats.end(), 0);
    if (m < d) {
      for (std::size_t i = 0; i < m; ++i) {
        const auto j = std::uniform_int_distribution<std::size_t>(i, d - 1)(rng);
        std::swap(feats[i], feats[j]);
      }
      feats.resize(m);
      std::sort(feats.begin(), feats.end());
    }
    const double parent = gs * gs / (hs + p.lambda);
    double best_gain = 0.0;
    int best_f = -1;
    std::size_t best_b = 0;
    for (std::size_t f : feats) {
      const std::size_t nb = bins.bins(f);
      if (nb < 2) continue;
      hg.assign(nb, 0.0);
      hh.assign(nb, 0.0);
      hc.assign(nb, 0);
      const std::uint8_t* col = codes.data() + f * n;
      for (std::size_t i = lo; i < hi; ++i) {
        const auto r = idx[i];
        const auto b = col[r];
        hg[b] += g[r];
        hh[b] += h[r];
        ++hc[b];
      }
      double gl = 0.0, hl = 0.0;
      std::size_t cl = 0;
      for (std::size_t b = 0; b + 1 < nb; ++b) {
        gl += hg[b];
        hl += hh[b];
        cl += hc[b];
        const std::size_t cr = cnt - cl;
        if (cl < p.min_leaf || cr < p.min_leaf || cl == 0 || cr == 0) continue;
        const double hr = hs - hl, gr = gs - gl;
        if (hl < p.min_hessian || hr < p.min_hessian) continue;
        const double gain = gl * gl / (hl + p.lambda) + gr * gr / (hr + p.lambda) - parent;
        if (gain > best_gain * (1.0 + 1e-12) + 1e-300) {
          best_gain = gain;
          best_f = static_cast<int>(f);
          best_b = b;
        }
      }
    }
    if (best_f < 0) return id;
    const std::uint8_t* col = codes.data() + static_cast<std::size_t>(best_f) * n;
    const auto mid_it = std::stable_partition(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                              idx.begin() + static_cast<std::ptrdiff_t>(hi),
                                              [&](std::size_t r) { return col[r] <= best_b; });
    const auto mid = static_cast<std::size_t>(mid_it - idx.begin());
    tree.nodes[id].feature = best_f;
    tree.nodes[id].threshold = bins.thresholds[static_cast<std::size_t>(best_f)][best_b];
    const int l = grow(lo, mid, depth + 1);
    const int r = grow(mid, hi, depth + 1);
    tree.nodes[id].left = l;
    tree.nodes[id].right = r;
    return id;
  }
};

}  // namespace detail

// Second-order tree: leaf value -G/(H + lambda), split gain on G^2/(H + lambda).
// With g = -y, h = 1, lambda = 0 this is an ordinary least-squares regression tree.
inline Tree grow_tree(const std::vector<std::uint8_t>& codes, std::size_t n, const BinMapper& bins,
                      std::span<const double> g, std::span<const double> h, std::vector<std::size_t> sample,
                      const TreeParams& p, std::mt19937_64& rng) {
  detail::TreeBuilder b{codes, n, bins, g, h, p, rng, std::move(sample), {}, {}, {}, {}, {}};
  if (b.idx.empty()) throw InputError("grow_tree: empty sample");
  b.grow(0, b.idx.size(), 0);
  return std::move(b.tree);
}

struct ForestOptions {
  std::size_t trees = 300;
  std::size_t min_leaf = 5;
  int max_depth = 32;
  double feature_fraction = 1.0 / 3.0;
  int max_bins = 64;
  std::uint64_t seed = 0;
};

struct ForestModel {
  std::vector<Tree> trees;

  double predict_row(std::span<const double> row) const {
    double s = 0.0;
    for (const auto& t : trees) s += t.predict_row(row);
    return s / static_cast<double>(trees.size());
  }
};

// Bootstrap rows and a random feature subset at every node, per tree RNG from (seed, tree).
inline ForestModel fit_forest(const Matrix& x, std::span<const double> y, const ForestOptions& opt = {}) {
  const std::size_t n = x.rows(), d = x.cols();
  if (y.size() != n) throw InputError("fit_forest: target length differs from row count");
  if (n < 2 || opt.trees == 0) throw InputError("fit_forest: need at least two rows and one tree");
  const auto bins = BinMapper::fit(x, opt.max_bins);
  const auto codes = bins.codes(x);
  std::vector<double> g(n), h(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) g[i] = -y[i];
  TreeParams p;
  p.max_depth = opt.max_depth;
  p.min_leaf = opt.min_leaf;
  p.max_features = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(opt.feature_fraction * static_cast<double>(d))));
  ForestModel m;
  m.trees.resize(opt.trees);
  parallel_for(opt.trees, [&](std::size_t t) {
    std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                      static_cast<std::uint32_t>(t), 0x7ee5u};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> sample(n);
    for (auto& s : sample) s = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    m.trees[t] = grow_tree(codes, n, bins, g, h, std::move(sample), p, rng);
  });
  return m;
}

struct BoostOptions {
  int rounds = 500;
  double learning_rate = 0.05;
  int max_depth = 4;
  double lambda = 1.0;
  std::size_t min_leaf = 5;
  double subsample = 1.0;
  int max_bins = 64;
  std::uint64_t seed = 0;
};

struct BoostModel {
  double base = 0.0;
  double learning_rate = 0.0;
  std::vector<Tree> trees;

  double predict_row(std::span<const double> row) const {
    double s = base;
    for (const auto& t : trees) s += learning_rate * t.predict_row(row);
    return s;
  }
};

// Squared-error boosting with Newton leaf weights and L2 leaf regularization.
inline BoostModel fit_boost(const Matrix& x, std::span<const double> y, const BoostOptions& opt = {}) {
  const std::size_t n = x.rows();
  if (y.size() != n) throw InputError("fit_boost: target length differs from row count");
  if (n < 2) throw InputError("fit_boost: need at least two rows");
  if (opt.rounds < 1 || !(opt.learning_rate > 0.0) || opt.max_depth < 1 || !(opt.lambda >= 0.0) ||
      !(opt.subsample > 0.0 && opt.subsample <= 1.0))
    throw InputError("fit_boost: invalid options");
  const auto bins = BinMapper::fit(x, opt.max_bins);
  const auto codes = bins.codes(x);
  BoostModel m;
  m.base = mean(y);
  m.learning_rate = opt.learning_rate;
  std::vector<double> pred(n, m.base), g(n), h(n, 1.0);
  TreeParams p;
  p.max_depth = opt.max_depth;
  p.min_leaf = opt.min_leaf;
  p.lambda = opt.lambda;
  std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32), 0xb005u};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(opt.subsample * static_cast<double>(n))));
  for (int r = 0; r < opt.rounds; ++r) {
    for (std::size_t i = 0; i < n; ++i) g[i] = pred[i] - y[i];
    std::vector<std::size_t> sample = all;
    if (take < n) {
      for (std::size_t i = 0; i < take; ++i) std::swap(sample[i], sample[std::uniform_int_distribution<std::size_t>(i, n - 1)(rng)]);
      sample.resize(take);
      std::sort(sample.begin(), sample.end());
    }
    auto tree = grow_tree(codes, n, bins, g, h, std::move(sample), p, rng);
    for (std::size_t i = 0; i < n; ++i) pred[i] += opt.learning_rate * tree.predict_row(x.row(i));
    m.trees.push_back(std::move(tree));
  }
  return m;
}

}  // namespace qcm
