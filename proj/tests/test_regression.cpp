#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "qcm/regression.hpp"

using namespace qcm;

namespace {

struct Data {
  Matrix x;
  std::vector<double> y;
};

// y depends on the first `informative` columns; the rest is noise.
Data make_data(std::size_t n, std::size_t d, std::size_t informative, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Data out{Matrix(n, d), std::vector<double>(n)};
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      out.x(r, c) = nd(rng);
      if (c < informative) s += out.x(r, c) + 0.3 * std::sin(2.0 * out.x(r, c));
    }
    out.y[r] = s + noise * nd(rng);
  }
  return out;
}

DescriptorMatrix as_descriptors(const Data& d) {
  DescriptorMatrix m;
  m.names.clear();
  for (std::size_t c = 0; c < d.x.cols(); ++c) m.names.push_back("c" + std::to_string(c));
  m.x = d.x;
  m.y = d.y;
  for (std::size_t r = 0; r < d.x.rows(); ++r) m.timestamps.push_back(static_cast<double>(r));
  return m;
}

// Subgradient optimality of (1/2n)||y - b - Xw||^2 + lambda (r|w|_1 + (1-r)/2 |w|^2).
double kkt_violation(const Matrix& x, std::span<const double> y, const LinearModel& m, double lambda, double ratio) {
  const std::size_t n = x.rows();
  std::vector<double> resid(n);
  for (std::size_t r = 0; r < n; ++r) resid[r] = y[r] - m.predict_row(x.row(r));
  double worst = std::abs(mean(resid));
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double g = 0.0;
    for (std::size_t r = 0; r < n; ++r) g += x(r, j) * resid[r];
    g = g / static_cast<double>(n) - lambda * (1.0 - ratio) * m.coef[j];
    const double l1 = lambda * ratio;
    const double v = m.coef[j] == 0.0 ? std::max(0.0, std::abs(g) - l1) : std::abs(g - l1 * (m.coef[j] > 0 ? 1.0 : -1.0));
    worst = std::max(worst, v);
  }
  return worst;
}

}  // namespace

TEST(Lasso, LambdaMaxZeroesEverything) {
  const auto d = make_data(120, 8, 3, 0.1, 1);
  const double lmax = lasso_lambda_max(d.x, d.y);
  ElasticNetOptions o;
  o.lambda = lmax;
  for (double c : fit_elastic_net(d.x, d.y, o).coef) EXPECT_EQ(c, 0.0);
  o.lambda = 2.0 * lmax;
  for (double c : fit_elastic_net(d.x, d.y, o).coef) EXPECT_EQ(c, 0.0);
  o.lambda = 0.95 * lmax;
  const auto m = fit_elastic_net(d.x, d.y, o);
  EXPECT_GT(std::count_if(m.coef.begin(), m.coef.end(), [](double c) { return c != 0.0; }), 0);
}

TEST(Lasso, KktConditionsHold) {
  const auto d = make_data(200, 12, 4, 0.2, 2);
  const auto xs = standardize_columns(d.x);
  for (double frac : {0.5, 0.1, 0.01, 1e-4}) {
    ElasticNetOptions o;
    o.lambda = frac * lasso_lambda_max(xs, d.y);
    const auto m = fit_elastic_net(xs, d.y, o);
    EXPECT_LE(kkt_violation(xs, d.y, m, o.lambda, 1.0), 1e-5) << frac;
  }
}

TEST(ElasticNet, UnitRatioReproducesLasso) {
  const auto d = make_data(150, 10, 4, 0.2, 3);
  ModelSpec lasso{Family::lasso, {{"lambda", 0.01}}};
  ModelSpec enet{Family::elastic_net, {{"lambda", 0.01}, {"l1_ratio", 1.0}}};
  const auto a = std::get<LinearModel>(fit_model(lasso, d.x, d.y));
  const auto b = std::get<LinearModel>(fit_model(enet, d.x, d.y));
  for (std::size_t j = 0; j < a.coef.size(); ++j) EXPECT_NEAR(a.coef[j], b.coef[j], 1e-8);
  EXPECT_NEAR(a.intercept, b.intercept, 1e-8);
}

TEST(ElasticNet, KktConditionsHoldForMixedPenalty) {
  const auto d = make_data(200, 12, 4, 0.2, 4);
  const auto xs = standardize_columns(d.x);
  ElasticNetOptions o;
  o.lambda = 0.05;
  o.l1_ratio = 0.3;
  EXPECT_LE(kkt_violation(xs, d.y, fit_elastic_net(xs, d.y, o), o.lambda, o.l1_ratio), 1e-5);
}

TEST(Svr, FitsSineWithinTube) {
  Matrix x(500, 1);
  std::vector<double> y(500);
  for (std::size_t i = 0; i < 500; ++i) {
    x(i, 0) = 2.0 * std::numbers::pi * static_cast<double>(i) / 499.0;
    y[i] = std::sin(x(i, 0));
  }
  SvrOptions o;
  o.c = 10.0;
  o.epsilon = 0.01;
  o.gamma = 1.0;
  const auto m = fit_svr(x, y, o);
  double sse = 0.0;
  for (std::size_t i = 0; i < 500; ++i) sse += std::pow(m.predict_row(x.row(i)) - y[i], 2);
  EXPECT_LE(std::sqrt(sse / 500.0), o.epsilon + 0.01);
}

TEST(Svr, DefaultGammaIsInverseDimensionTimesVariance) {
  const auto d = make_data(50, 4, 2, 0.0, 5);
  std::vector<double> all = d.x.data();
  EXPECT_NEAR(svr_default_gamma(d.x), 1.0 / (4.0 * std::pow(stddev(all), 2)), 1e-12);
}

TEST(GradBoost, StepFunctionWithStumps) {
  // 40 distinct inputs, so every gap is a candidate split for the 64-bin histogram.
  Matrix x(200, 1);
  std::vector<double> y(200);
  for (std::size_t i = 0; i < 200; ++i) {
    x(i, 0) = static_cast<double>(i % 40);
    y[i] = i % 40 < 16 ? 0.0 : 1.0;
  }
  ModelSpec spec{Family::grad_boost, {{"rounds", 100}, {"max_depth", 1}}};
  const auto m = fit_model(spec, x, y, 1);
  EXPECT_GE(metrics(y, predict(m, x)).r2, 0.99);
}

TEST(RandomForest, LearnsSmoothSignalAndIsSeeded) {
  const auto d = make_data(300, 5, 2, 0.05, 6);
  ModelSpec spec{Family::random_forest, {{"trees", 50}}};
  const auto a = predict(fit_model(spec, d.x, d.y, 9), d.x);
  EXPECT_GE(metrics(d.y, a).r2, 0.85);
  EXPECT_EQ(a, predict(fit_model(spec, d.x, d.y, 9), d.x));
}

TEST(ModelSpec, ValidationRejectsBadHyperparameters) {
  EXPECT_THROW((ModelSpec{Family::svr, {{"lambda", 1.0}}}.validate()), InputError);
  EXPECT_THROW((ModelSpec{Family::elastic_net, {{"l1_ratio", 1.5}}}.validate()), InputError);
  EXPECT_THROW((ModelSpec{Family::random_forest, {{"trees", 2.5}}}.validate()), InputError);
  EXPECT_THROW(parse_family("xgboost"), InputError);
  EXPECT_EQ(parse_family("grad_boost"), Family::grad_boost);
}

TEST(Metrics, Definitions) {
  const std::vector<double> y{0, 1, 2};
  auto m = metrics(y, y);
  EXPECT_EQ(m.r2, 1.0);
  EXPECT_EQ(m.rmse, 0.0);
  EXPECT_EQ(m.mae, 0.0);
  m = metrics(y, std::vector<double>{1, 1, 1});
  EXPECT_NEAR(m.r2, 0.0, 1e-15);
  m = metrics(y, std::vector<double>{0, 1, 3});
  EXPECT_NEAR(m.rmse, std::sqrt(1.0 / 3.0), 1e-15);
  EXPECT_NEAR(m.mae, 1.0 / 3.0, 1e-15);
  EXPECT_THROW(metrics(std::vector<double>{2, 2, 2}, y), InputError);
}

TEST(KFold, PartitionIsDisjointBalancedAndSeeded) {
  const auto f = kfold_split(10, 5, 3);
  std::vector<int> sizes(5, 0);
  for (int v : f) ++sizes.at(static_cast<std::size_t>(v));
  for (int s : sizes) EXPECT_EQ(s, 2);
  EXPECT_EQ(f, kfold_split(10, 5, 3));
  const auto g = kfold_split(103, 5, 7);
  std::vector<int> gs(5, 0);
  for (int v : g) ++gs.at(static_cast<std::size_t>(v));
  EXPECT_LE(*std::max_element(gs.begin(), gs.end()) - *std::min_element(gs.begin(), gs.end()), 1);
  EXPECT_THROW(kfold_split(4, 5, 0), InputError);
}

TEST(CrossValidate, OutOfFoldCoverageAndDeterminism) {
  const auto data = as_descriptors(make_data(120, 6, 3, 0.1, 8));
  CvConfig cv;
  cv.k_grid = {2, 6};
  cv.seed = 4;
  std::vector<ModelSpec> specs{{Family::lasso, {}}, {Family::random_forest, {{"trees", 30}}}};
  const auto a = cross_validate(data, specs, cv);
  const auto b = cross_validate(data, specs, cv);
  ASSERT_EQ(a.oof.size(), 120u);
  for (double v : a.oof) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(a.oof, b.oof);
  ASSERT_EQ(a.cells.size(), b.cells.size());
  for (std::size_t i = 0; i < a.cells.size(); ++i) EXPECT_EQ(a.cells[i].val.rmse, b.cells[i].val.rmse);
  EXPECT_EQ(a.cells.size(), 2u * 2u * 5u);
  std::multiset<int> folds(a.fold_of.begin(), a.fold_of.end());
  for (int f = 0; f < 5; ++f) EXPECT_EQ(folds.count(f), 24u);
}

TEST(CrossValidate, FullGridMatchesUnrankedTraining) {
  const auto raw = make_data(100, 7, 3, 0.1, 9);
  const auto data = as_descriptors(raw);
  CvConfig cv;
  cv.k_grid = {7};
  cv.seed = 2;
  const std::vector<ModelSpec> specs{{Family::lasso, {}}, {Family::svr, {}}};
  const auto rep = cross_validate(data, specs, cv);
  for (int fold = 0; fold < 5; ++fold) {
    std::vector<std::size_t> tr, va;
    for (std::size_t r = 0; r < 100; ++r) (rep.fold_of[r] == fold ? va : tr).push_back(r);
    const auto scaler = ColumnScaler::fit(raw.x.select_rows(tr));
    const auto xtr = scaler.transform(raw.x.select_rows(tr)), xva = scaler.transform(raw.x.select_rows(va));
    std::vector<double> ytr, yva;
    for (auto r : tr) ytr.push_back(raw.y[r]);
    for (auto r : va) yva.push_back(raw.y[r]);
    for (std::size_t s = 0; s < specs.size(); ++s) {
      const auto want = metrics(yva, predict(fit_model(specs[s], xtr, ytr), xva));
      const auto it = std::find_if(rep.cells.begin(), rep.cells.end(), [&](const CvCell& c) {
        return c.fold == fold && c.family == rep.families[s];
      });
      ASSERT_NE(it, rep.cells.end());
      // Column order changes the solver path; agreement is to solver tolerance.
      const double tol = specs[s].family == Family::lasso ? 1e-5 : 1e-3;
      EXPECT_NEAR(it->val.rmse, want.rmse, tol * want.rmse) << rep.families[s] << " fold " << fold;
    }
  }
}

TEST(CrossValidate, ValidationRowsNeverInfluenceTheirFold) {
  const auto raw = make_data(90, 6, 3, 0.2, 10);
  const auto fold_of = kfold_split(90, 5, 1);
  for (int fold = 0; fold < 5; ++fold) {
    const auto full = prepare_fold(raw.x, raw.y, fold_of, fold, 6, {});
    // Drop the validation rows entirely and recompute.
    std::vector<std::size_t> keep;
    for (std::size_t r = 0; r < 90; ++r)
      if (fold_of[r] != fold) keep.push_back(r);
    std::vector<double> ykeep;
    std::vector<int> fkeep;
    for (auto r : keep) {
      ykeep.push_back(raw.y[r]);
      fkeep.push_back(fold_of[r]);
    }
    const auto cut = prepare_fold(raw.x.select_rows(keep), ykeep, fkeep, fold, 6, {});
    EXPECT_TRUE(cut.val.empty());
    EXPECT_EQ(cut.ranking, full.ranking);
    EXPECT_EQ(cut.xtr.data(), full.xtr.data());
  }
}

TEST(TopK, InformativePrefixPlateausForTrees) {
  const auto data = as_descriptors(make_data(300, 52, 5, 0.2, 11));
  CvConfig cv;
  cv.k_grid = {5, 10, 52};
  const std::vector<ModelSpec> specs{{Family::random_forest, {{"trees", 100}}}, {Family::grad_boost, {{"rounds", 200}}}};
  const auto rep = cross_validate(data, specs, cv);
  const auto curve = topk_curve(rep);
  ASSERT_EQ(curve.size(), specs.size() * cv.k_grid.size());
  for (const auto& fam : rep.families) {
    double r10 = NAN, r52 = NAN;
    std::size_t len = 0;
    for (const auto& p : curve) {
      if (p.family != fam) continue;
      ++len;
      if (p.k == 10) r10 = p.mean_val_r2;
      if (p.k == 52) r52 = p.mean_val_r2;
    }
    EXPECT_EQ(len, cv.k_grid.size());
    EXPECT_GE(r10, 0.95 * r52) << fam;
  }
  // In-fold mRMR keeps the informative columns inside the top 10.
  for (const auto& order : rep.fold_ranking)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_LT(std::find(order.begin(), order.end(), c) - order.begin(), 10);
}

TEST(Cumulative, MaxThresholdEqualsGlobalRmse) {
  const std::vector<double> y{0.1, 0.4, 0.9, 1.3, 1.9, 2.0};
  const std::vector<double> p{0.2, 0.3, 1.0, 1.1, 2.0, 1.7};
  const auto grid = threshold_grid(y);
  EXPECT_EQ(grid, (std::vector<double>{0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0}));
  const auto c = cumulative_rmse(y, p, grid);
  EXPECT_EQ(c.back().count, 6u);
  EXPECT_NEAR(*c.back().rmse, metrics(y, p).rmse, 1e-15);
  EXPECT_EQ(c[0].count, 1u);
  EXPECT_NEAR(*c[0].rmse, 0.1, 1e-15);
  const auto empty = cumulative_rmse(y, p, std::vector<double>{0.05});
  EXPECT_FALSE(empty[0].rmse.has_value());
}
