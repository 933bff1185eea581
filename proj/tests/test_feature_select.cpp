#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "qcm/feature_select.hpp"

using namespace qcm;

namespace {

// Entropy route: I = H(X) + H(Y) - H(X,Y), bins from counting strictly smaller values.
std::vector<int> rank_bins(std::span<const double> v, int bins) {
  std::vector<int> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t below = 0;
    for (double w : v) below += w < v[i];
    out[i] = static_cast<int>(below * static_cast<std::size_t>(bins) / v.size());
  }
  return out;
}

template <class Key>
double entropy(const std::vector<Key>& keys) {
  std::map<Key, double> counts;
  for (const auto& k : keys) counts[k] += 1.0;
  double h = 0.0;
  const double n = static_cast<double>(keys.size());
  for (const auto& [k, c] : counts) h -= c / n * std::log2(c / n);
  return h;
}

double mi_oracle(std::span<const double> x, std::span<const double> y, int bins = 8) {
  const auto bx = rank_bins(x, bins), by = rank_bins(y, bins);
  std::vector<std::pair<int, int>> joint;
  for (std::size_t i = 0; i < bx.size(); ++i) joint.emplace_back(bx[i], by[i]);
  return entropy(bx) + entropy(by) - entropy(joint);
}

std::vector<double> normal_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

Matrix from_columns(const std::vector<std::vector<double>>& cols) {
  Matrix m(cols[0].size(), cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c)
    for (std::size_t r = 0; r < cols[c].size(); ++r) m(r, c) = cols[c][r];
  return m;
}

}  // namespace

TEST(MutualInformation, SelfInformationIsThreeBits) {
  std::mt19937_64 rng(1);
  const auto x = normal_vec(4000, rng);
  EXPECT_NEAR(mutual_information(x, x), 3.0, 1e-12);
  EXPECT_NEAR(mi_oracle(x, x), 3.0, 1e-12);
}

TEST(MutualInformation, IndependentPairIsNearZero) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const auto x = normal_vec(10000, rng), y = normal_vec(10000, rng);
    EXPECT_LE(mutual_information(x, y), 0.02) << seed;
  }
}

TEST(MutualInformation, SymmetricNonNegativeAndMatchesEntropyRoute) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    const auto x = normal_vec(500, rng);
    auto y = normal_vec(500, rng);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += 0.3 * t * x[i];
    const double a = mutual_information(x, y), b = mutual_information(y, x);
    EXPECT_NEAR(a, b, 1e-12);
    EXPECT_GE(a, 0.0);
    EXPECT_NEAR(a, mi_oracle(x, y), 1e-9);
  }
}

TEST(MutualInformation, ConstantInputIsZeroAndShortInputRejected) {
  std::mt19937_64 rng(2);
  const auto y = normal_vec(100, rng);
  EXPECT_EQ(mutual_information(std::vector<double>(100, 1.0), y), 0.0);
  EXPECT_THROW(mutual_information(std::span(y).first(31), std::span(y).first(31)), InputError);
}

TEST(MutualInformation, DeterministicFunctionOfTargetCarriesItsEntropy) {
  std::mt19937_64 rng(5);
  const auto y = normal_vec(800, rng);
  std::vector<double> f;
  for (double v : y) f.push_back(std::exp(v) + v * v * v);  // strictly increasing
  EXPECT_NEAR(mutual_information(f, y), entropy(rank_bins(y, 8)), 1e-12);
}

TEST(Redundancy, DuplicateColumnsSymmetricMatrix) {
  std::mt19937_64 rng(6);
  const auto a = normal_vec(400, rng), b = normal_vec(400, rng), y = normal_vec(400, rng);
  const auto x = from_columns({a, b, a});
  const auto r = relevance_and_redundancy(x, y);
  EXPECT_NEAR(r.redundancy(0, 2), 3.0, 1e-12);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(r.redundancy(i, i), 3.0, 1e-12);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(r.redundancy(i, j), r.redundancy(j, i), 1e-12);
  }
  EXPECT_LT(r.redundancy(0, 1), 0.15);
}

TEST(Mrmr, ToyGeneratorCopyAndWeakPredictor) {
  std::mt19937_64 rng(7);
  const auto x1 = normal_vec(2000, rng), x3 = normal_vec(2000, rng);
  std::vector<double> y(2000);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x1[i] + 0.5 * x3[i];
  const auto x = from_columns({x1, x1, x3});
  const auto r = mrmr_rank(x, y, 3);
  EXPECT_EQ(r.order, (std::vector<std::size_t>{0, 2, 1}));
  EXPECT_EQ(mrmr_rank(x, y, 1).order, (std::vector<std::size_t>{0}));
  EXPECT_DOUBLE_EQ(r.scores[0], r.relevance[0]);
  EXPECT_THROW(mrmr_rank(x, y, 0), InputError);
  EXPECT_THROW(mrmr_rank(x, y, 4), InputError);
}

TEST(Mrmr, GreedyOrderMatchesBruteForceCriterion) {
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(100 + trial);
    std::uniform_real_distribution<double> w(-1.0, 1.0);
    std::vector<std::vector<double>> cols;
    const auto y = normal_vec(200, rng);
    for (int c = 0; c < 6; ++c) {
      auto col = normal_vec(200, rng);
      const double a = w(rng), b = c > 0 ? w(rng) : 0.0;
      for (std::size_t i = 0; i < col.size(); ++i) col[i] += 2.0 * a * y[i] + (c > 0 ? b * cols[0][i] : 0.0);
      cols.push_back(col);
    }
    const auto x = from_columns(cols);
    const auto r = mrmr_rank(x, y, 6);

    std::vector<double> rel(6);
    for (int c = 0; c < 6; ++c) rel[c] = mi_oracle(cols[c], y);
    std::vector<std::size_t> chosen;
    for (std::size_t step = 0; step < 6; ++step) {
      double best = -INFINITY;
      std::vector<double> score(6, -INFINITY);
      for (std::size_t j = 0; j < 6; ++j) {
        if (std::find(chosen.begin(), chosen.end(), j) != chosen.end()) continue;
        double red = 0.0;
        for (auto s : chosen) red += mi_oracle(cols[j], cols[s]);
        score[j] = rel[j] - (chosen.empty() ? 0.0 : red / static_cast<double>(chosen.size()));
        best = std::max(best, score[j]);
      }
      ASSERT_GE(score[r.order[step]], best - 1e-9) << "trial " << trial << " step " << step;
      EXPECT_NEAR(r.scores[step], score[r.order[step]], 1e-9);
      chosen.push_back(r.order[step]);
    }
  }
}

// Increasing maps keep every quantile bin; a decreasing one mirrors the uneven bin
// edges when n is not a multiple of the bin count.
TEST(Mrmr, InvariantUnderIncreasingTransforms) {
  std::mt19937_64 rng(9);
  std::vector<std::vector<double>> cols;
  const auto y = normal_vec(300, rng);
  for (int c = 0; c < 5; ++c) {
    auto col = normal_vec(300, rng);
    for (std::size_t i = 0; i < col.size(); ++i) col[i] += 0.4 * c * y[i];
    cols.push_back(col);
  }
  const auto base = mrmr_rank(from_columns(cols), y, 5);
  for (auto& v : cols[1]) v = std::exp(v);
  for (auto& v : cols[3]) v = std::pow(v, 3);
  const auto moved = mrmr_rank(from_columns(cols), y, 5);
  EXPECT_EQ(moved.order, base.order);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(moved.scores[i], base.scores[i], 1e-12);
}

TEST(Pearson, SelfNegationIndependentAndConstant) {
  std::mt19937_64 rng(11);
  const auto a = normal_vec(10000, rng), b = normal_vec(10000, rng);
  std::vector<double> neg;
  for (double v : a) neg.push_back(-2.0 * v + 1.0);
  const auto c = pearson_matrix(from_columns({a, neg, b, std::vector<double>(10000, 3.0)}));
  EXPECT_NEAR(c.r(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(c.r(0, 1), -1.0, 1e-12);
  EXPECT_LE(std::abs(c.r(0, 2)), 0.05);
  EXPECT_EQ(c.r(0, 3), 0.0);
  EXPECT_TRUE(c.constant[3]);
  EXPECT_FALSE(c.constant[0]);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(c.r(i, j), c.r(j, i));
}
