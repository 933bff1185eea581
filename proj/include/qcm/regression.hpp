#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "qcm/common.hpp"
#include "qcm/descriptors.hpp"
#include "qcm/feature_select.hpp"
#include "qcm/linear_models.hpp"
#include "qcm/svr.hpp"
#include "qcm/trees.hpp"

namespace qcm {

enum class Family { lasso, elastic_net, svr, random_forest, grad_boost };

inline constexpr std::array<Family, 5> kAllFamilies = {Family::lasso, Family::elastic_net, Family::svr,
                                                       Family::random_forest, Family::grad_boost};

inline std::string to_string(Family f) {
  switch (f) {
    case Family::lasso: return "lasso";
    case Family::elastic_net: return "elastic_net";
    case Family::svr: return "svr";
    case Family::random_forest: return "random_forest";
    case Family::grad_boost: return "grad_boost";
  }
  return "?";
}

inline Family parse_family(std::string_view s) {
  for (Family f : kAllFamilies)
    if (to_string(f) == s) return f;
  throw InputError("unknown model family '" + std::string(s) + "'");
}

// Hyperparameter keys per family; anything else is rejected.
inline const std::vector<std::string>& hyperparameter_keys(Family f) {
  static const std::vector<std::string> lasso = {"lambda"};
  static const std::vector<std::string> enet = {"lambda", "l1_ratio"};
  static const std::vector<std::string> svr = {"C", "epsilon", "gamma"};
  static const std::vector<std::string> rf = {"trees", "min_leaf", "max_depth", "feature_fraction"};
  static const std::vector<std::string> gb = {"rounds", "learning_rate", "max_depth", "lambda", "min_leaf", "subsample"};
  switch (f) {
    case Family::lasso: return lasso;
    case Family::elastic_net: return enet;
    case Family::svr: return svr;
    case Family::random_forest: return rf;
    case Family::grad_boost: return gb;
  }
  return lasso;
}

struct ModelSpec {
  Family family = Family::lasso;
  std::map<std::string, double> hyper;

  double get(const std::string& key, double fallback) const {
    const auto it = hyper.find(key);
    return it == hyper.end() ? fallback : it->second;
  }

  void validate() const {
    const auto& keys = hyperparameter_keys(family);
    for (const auto& [k, v] : hyper) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end())
        throw InputError(to_string(family) + ": unknown hyperparameter '" + k + "'");
      if (!std::isfinite(v)) throw InputError(to_string(family) + ": hyperparameter '" + k + "' is not finite");
    }
    auto positive = [&](const char* k) {
      if (hyper.count(k) && !(hyper.at(k) > 0.0)) throw InputError(to_string(family) + ": " + k + " must be > 0");
    };
    auto nonneg = [&](const char* k) {
      if (hyper.count(k) && !(hyper.at(k) >= 0.0)) throw InputError(to_string(family) + ": " + k + " must be >= 0");
    };
    auto integral_ge1 = [&](const char* k) {
      if (hyper.count(k) && (hyper.at(k) < 1.0 || std::floor(hyper.at(k)) != hyper.at(k)))
        throw InputError(to_string(family) + ": " + k + " must be a positive integer");
    };
    switch (family) {
      case Family::lasso: nonneg("lambda"); break;
      case Family::elastic_net:
        nonneg("lambda");
        if (hyper.count("l1_ratio") && !(hyper.at("l1_ratio") >= 0.0 && hyper.at("l1_ratio") <= 1.0))
          throw InputError("elastic_net: l1_ratio must lie in [0, 1]");
        break;
      case Family::svr:
        positive("C");
        nonneg("epsilon");
        nonneg("gamma");
        break;
      case Family::random_forest:
        integral_ge1("trees");
        integral_ge1("min_leaf");
        integral_ge1("max_depth");
        if (hyper.count("feature_fraction") && !(hyper.at("feature_fraction") > 0.0 && hyper.at("feature_fraction") <= 1.0))
          throw InputError("random_forest: feature_fraction must lie in (0, 1]");
        break;
      case Family::grad_boost:
        integral_ge1("rounds");
        integral_ge1("max_depth");
        integral_ge1("min_leaf");
        positive("learning_rate");
        nonneg("lambda");
        if (hyper.count("subsample") && !(hyper.at("subsample") > 0.0 && hyper.at("subsample") <= 1.0))
          throw InputError("grad_boost: subsample must lie in (0, 1]");
        break;
    }
  }
};

inline std::vector<ModelSpec> default_specs() {
  std::vector<ModelSpec> out;
  for (Family f : kAllFamilies) out.push_back({f, {}});
  return out;
}

using Model = std::variant<LinearModel, SvrModel, ForestModel, BoostModel>;

inline Model fit_model(const ModelSpec& spec, const Matrix& x, std::span<const double> y, std::uint64_t seed = 0) {
  spec.validate();
  for (double v : x.data())
    if (!std::isfinite(v)) throw InputError("fit_model: non-finite feature value");
  for (double v : y)
    if (!std::isfinite(v)) throw InputError("fit_model: non-finite target value");
  switch (spec.family) {
    case Family::lasso:
    case Family::elastic_net: {
      ElasticNetOptions o;
      o.lambda = spec.get("lambda", 1e-3);
      o.l1_ratio = spec.family == Family::lasso ? 1.0 : spec.get("l1_ratio", 0.5);
      return fit_elastic_net(x, y, o);
    }
    case Family::svr: {
      SvrOptions o;
      o.c = spec.get("C", 10.0);
      o.epsilon = spec.get("epsilon", 0.01);
      o.gamma = spec.get("gamma", 0.0);
      return fit_svr(x, y, o);
    }
    case Family::random_forest: {
      ForestOptions o;
      o.trees = static_cast<std::size_t>(spec.get("trees", 300));
      o.min_leaf = static_cast<std::size_t>(spec.get("min_leaf", 5));
      o.max_depth = static_cast<int>(spec.get("max_depth", 32));
      o.feature_fraction = spec.get("feature_fraction", 1.0 / 3.0);
      o.seed = seed;
      return fit_forest(x, y, o);
    }
    case Family::grad_boost: {
      BoostOptions o;
      o.rounds = static_cast<int>(spec.get("rounds", 500));
      o.learning_rate = spec.get("learning_rate", 0.05);
      o.max_depth = static_cast<int>(spec.get("max_depth", 4));
      o.lambda = spec.get("lambda", 1.0);
      o.min_leaf = static_cast<std::size_t>(spec.get("min_leaf", 5));
      o.subsample = spec.get("subsample", 1.0);
      o.seed = seed;
      return fit_boost(x, y, o);
    }
  }
  throw InputError("fit_model: unknown family");
}

inline std::vector<double> predict(const Model& m, const Matrix& x) {
  std::vector<double> out(x.rows());
  std::visit(
      [&](const auto& model) {
        for (std::size_t r = 0; r < x.rows(); ++r) out[r] = model.predict_row(x.row(r));
      },
      m);
  return out;
}

struct Metrics {
  double r2 = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
};

inline Metrics metrics(std::span<const double> y, std::span<const double> yhat) {
  if (y.size() != yhat.size()) throw InputError("metrics: lengths differ");
  if (y.size() < 2) throw InputError("metrics: need at least two values");
  const double ym = mean(y);
  double sst = 0.0, sse = 0.0, sae = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sst += (y[i] - ym) * (y[i] - ym);
    const double e = y[i] - yhat[i];
    sse += e * e;
    sae += std::abs(e);
  }
  if (!(sst > 0.0)) throw InputError("metrics: constant target, R^2 undefined");
  const double n = static_cast<double>(y.size());
  return {1.0 - sse / sst, std::sqrt(sse / n), sae / n};
}

// Fold of each row: shuffle 0..n-1 with the seed, position p goes to fold p % folds.
inline std::vector<int> kfold_split(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 2) throw InputError("kfold_split: folds must be >= 2");
  if (n < static_cast<std::size_t>(folds)) throw InputError("kfold_split: fewer rows than folds");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i-- > 1;) {
    const auto j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(perm[i], perm[j]);
  }
  std::vector<int> fold(n);
  for (std::size_t p = 0; p < n; ++p) fold[perm[p]] = static_cast<int>(p % static_cast<std::size_t>(folds));
  return fold;
}

inline std::vector<std::size_t> default_k_grid() { return {1, 2, 3, 5, 10, 15, 20, 30, 40, 52}; }

struct CvConfig {
  int folds = 5;
  std::uint64_t seed = 0;
  std::vector<std::size_t> k_grid = default_k_grid();
  MiConfig mi;

  void validate(std::size_t d) const {
    if (folds < 2) throw InputError("CvConfig: folds must be >= 2");
    if (k_grid.empty()) throw InputError("CvConfig: empty k grid");
    for (auto k : k_grid)
      if (k < 1 || k > d) throw InputError("CvConfig: k = " + std::to_string(k) + " outside [1, " + std::to_string(d) + "]");
    mi.validate();
  }
};

struct CvCell {
  std::string family;
  std::size_t k = 0;
  int fold = 0;
  Metrics train, val;
};

struct CvAggregate {
  std::string family;
  std::size_t k = 0;
  double mean_val_r2 = 0.0, sd_val_r2 = 0.0;
  double mean_val_rmse = 0.0, sd_val_rmse = 0.0;
  double mean_val_mae = 0.0;
  double mean_train_r2 = 0.0;
};

struct CvReport {
  std::vector<std::string> families;  // label per spec
  std::vector<std::size_t> k_grid;
  std::vector<int> fold_of;
  std::vector<std::vector<std::size_t>> fold_ranking;  // in-fold mRMR order per fold
  std::vector<CvCell> cells;
  std::vector<CvAggregate> aggregates;
  std::size_t best = 0;  // index into aggregates
  std::vector<double> targets;
  std::vector<double> oof;  // best (family, k), aligned to rows
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> oof_all;  // (spec, k index)

  const CvAggregate& best_cell() const { return aggregates.at(best); }
};

inline std::uint64_t model_seed(std::uint64_t seed, int fold, std::size_t spec, std::size_t k) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(fold),
                    static_cast<std::uint32_t>(spec), static_cast<std::uint32_t>(k)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct FoldPrep {
  std::vector<std::size_t> train, val;
  Matrix xtr, xva;
  std::vector<double> ytr, yva;
  std::vector<std::size_t> ranking;
};

// Standardization and ranking from the training rows of one fold only.
inline FoldPrep prepare_fold(const Matrix& x, std::span<const double> y, std::span<const int> fold_of, int fold,
                             std::size_t kmax, const MiConfig& mi) {
  FoldPrep f;
  for (std::size_t r = 0; r < x.rows(); ++r) (fold_of[r] == fold ? f.val : f.train).push_back(r);
  const Matrix raw_tr = x.select_rows(f.train);
  const auto scaler = ColumnScaler::fit(raw_tr);
  f.xtr = scaler.transform(raw_tr);
  f.xva = scaler.transform(x.select_rows(f.val));
  for (auto r : f.train) f.ytr.push_back(y[r]);
  for (auto r : f.val) f.yva.push_back(y[r]);
  f.ranking = mrmr_rank(f.xtr, f.ytr, kmax, mi).order;
  return f;
}

inline CvReport cross_validate(const DescriptorMatrix& data, const std::vector<ModelSpec>& specs, const CvConfig& cv) {
  const std::size_t n = data.rows(), d = data.x.cols();
  if (data.y.size() != n) throw InputError("cross_validate: target length differs from row count");
  cv.validate(d);
  if (specs.empty()) throw InputError("cross_validate: no model specs");
  for (const auto& s : specs) s.validate();

  CvReport rep;
  for (const auto& s : specs) rep.families.push_back(to_string(s.family));
  rep.k_grid = cv.k_grid;
  rep.targets = data.y;
  rep.fold_of = kfold_split(n, cv.folds, cv.seed);
  const std::size_t kmax = *std::max_element(cv.k_grid.begin(), cv.k_grid.end());
  const std::size_t nk = cv.k_grid.size(), ns = specs.size();
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t ki = 0; ki < nk; ++ki) rep.oof_all[{s, ki}].assign(n, std::nan(""));

  std::vector<CvCell> cells(static_cast<std::size_t>(cv.folds) * nk * ns);
  for (int fold = 0; fold < cv.folds; ++fold) {
    const auto prep = prepare_fold(data.x, data.y, rep.fold_of, fold, kmax, cv.mi);
    if (prep.train.size() < 2 || prep.val.size() < 2) throw InputError("cross_validate: fold too small");
    rep.fold_ranking.push_back(prep.ranking);
    for (std::size_t ki = 0; ki < nk; ++ki) {
      const std::vector<std::size_t> cols(prep.ranking.begin(), prep.ranking.begin() + static_cast<std::ptrdiff_t>(cv.k_grid[ki]));
      const Matrix xtr = prep.xtr.select_cols(cols), xva = prep.xva.select_cols(cols);
      parallel_for(ns, [&](std::size_t s) {
        auto& cell = cells[(static_cast<std::size_t>(fold) * nk + ki) * ns + s];
        cell.family = rep.families[s];
        cell.k = cv.k_grid[ki];
        cell.fold = fold;
        try {
          const auto model = fit_model(specs[s], xtr, prep.ytr, model_seed(cv.seed, fold, s, cv.k_grid[ki]));
          const auto ptr = predict(model, xtr), pva = predict(model, xva);
          cell.train = metrics(prep.ytr, ptr);
          cell.val = metrics(prep.yva, pva);
          auto& oof = rep.oof_all.at({s, ki});
          for (std::size_t i = 0; i < prep.val.size(); ++i) oof[prep.val[i]] = pva[i];
        } catch (const ConvergenceError& e) {
          throw ConvergenceError(std::string(e.what()) + " [family " + cell.family + ", fold " + std::to_string(fold) +
                                     ", k " + std::to_string(cell.k) + "]",
                                 e.residual());
        } catch (const std::exception& e) {
          throw InputError(std::string(e.what()) + " [family " + cell.family + ", fold " + std::to_string(fold) + ", k " +
                           std::to_string(cell.k) + "]");
        }
      });
    }
  }
  rep.cells = cells;

  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t ki = 0; ki < nk; ++ki) {
      std::vector<double> r2, rmse, mae, tr2;
      for (int fold = 0; fold < cv.folds; ++fold) {
        const auto& c = cells[(static_cast<std::size_t>(fold) * nk + ki) * ns + s];
        r2.push_back(c.val.r2);
        rmse.push_back(c.val.rmse);
        mae.push_back(c.val.mae);
        tr2.push_back(c.train.r2);
      }
      rep.aggregates.push_back({rep.families[s], cv.k_grid[ki], mean(r2), stddev(r2), mean(rmse), stddev(rmse), mean(mae),
                                mean(tr2)});
    }
  for (std::size_t i = 1; i < rep.aggregates.size(); ++i)
    if (rep.aggregates[i].mean_val_rmse < rep.aggregates[rep.best].mean_val_rmse) rep.best = i;
  rep.oof = rep.oof_all.at({rep.best / nk, rep.best % nk});
  return rep;
}

struct CurvePoint {
  std::string family;
  std::size_t k = 0;
  double mean_val_r2 = 0.0, sd_val_r2 = 0.0, mean_val_rmse = 0.0;
};

inline std::vector<CurvePoint> topk_curve(const CvReport& rep) {
  std::vector<CurvePoint> out;
  for (const auto& a : rep.aggregates) out.push_back({a.family, a.k, a.mean_val_r2, a.sd_val_r2, a.mean_val_rmse});
  return out;
}

// 0.25, 0.50, ... up to the first step covering the largest target.
inline std::vector<double> threshold_grid(std::span<const double> targets, double step = 0.25) {
  if (targets.empty()) throw InputError("threshold_grid: no targets");
  const double mx = *std::max_element(targets.begin(), targets.end());
  std::vector<double> out;
  for (int i = 1;; ++i) {
    const double t = step * i;
    out.push_back(t);
    if (t >= mx - 1e-12) break;
  }
  return out;
}

struct CumulativePoint {
  double threshold = 0.0;
  std::optional<double> rmse;  // empty bucket: no value
  std::size_t count = 0;
};

inline std::vector<CumulativePoint> cumulative_rmse(std::span<const double> y, std::span<const double> yhat,
                                                    std::span<const double> thresholds) {
  if (y.size() != yhat.size()) throw InputError("cumulative_rmse: lengths differ");
  std::vector<CumulativePoint> out;
  for (double t : thresholds) {
    CumulativePoint p{t, std::nullopt, 0};
    double sse = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] <= t) {
        sse += (y[i] - yhat[i]) * (y[i] - yhat[i]);
        ++p.count;
      }
    if (p.count > 0) p.rmse = std::sqrt(sse / static_cast<double>(p.count));
    out.push_back(p);
  }
  return out;
}

}  // namespace qcm
