// SPDX-License-Identifier: Apache-2.0
//
// Forecast-error metrics and portfolio indicators. Standard deviations are
// sample (n - 1) estimates throughout.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rnnquant/errors.hpp"

namespace rnnquant::metrics {

inline constexpr double kWeeksPerYear = 52.0;

namespace detail {

inline void require_paired(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(what) + ": length mismatch " + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()));
  }
  if (a.empty()) throw DimensionError(std::string(what) + ": empty input");
}

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_std(std::span<const double> v, double m) {
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline bool negligible_spread(double sd, double m) { return sd == 0.0 || sd <= 1e-12 * std::abs(m); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Forecast errors

/// Mean absolute percentage error, in percent.
inline double mape(std::span<const double> actual, std::span<const double> pred) {
  detail::require_paired(actual, pred, "mape");
  double s = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (actual[i] == 0.0) {
      throw MetricError("mape: actual value at index " + std::to_string(i) + " is zero");
    }
    s += std::abs(actual[i] - pred[i]) / std::abs(actual[i]);
  }
  return 100.0 * s / static_cast<double>(actual.size());
}

inline double mae(std::span<const double> actual, std::span<const double> pred) {
  detail::require_paired(actual, pred, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) s += std::abs(actual[i] - pred[i]);
  return s / static_cast<double>(actual.size());
}

inline double rmse(std::span<const double> actual, std::span<const double> pred) {
  detail::require_paired(actual, pred, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) s += (actual[i] - pred[i]) * (actual[i] - pred[i]);
  return std::sqrt(s / static_cast<double>(actual.size()));
}

/// Fraction of positions where the signs agree; zero only matches zero.
inline double directional_accuracy(std::span<const double> pred, std::span<const double> actual) {
  detail::require_paired(pred, actual, "directional_accuracy");
  auto sign = [](double v) { return (v > 0.0) - (v < 0.0); };
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += sign(pred[i]) == sign(actual[i]);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Portfolio indicators

inline double max_drawdown(std::span<const double> equity) {
  if (equity.empty()) throw DataError("max_drawdown: empty equity series");
  double peak = equity.front();
  double worst = 0.0;
  for (double e : equity) {
    if (!(e > 0.0)) throw DataError("max_drawdown: equity must be positive");
    peak = std::max(peak, e);
    worst = std::max(worst, (peak - e) / peak);
  }
  return worst;
}

inline double sharpe(std::span<const double> returns, double rf_per_period = 0.0,
                     double periods_per_year = kWeeksPerYear) {
  if (returns.size() < 2) throw DataError("sharpe: at least two returns required");
  std::vector<double> excess(returns.begin(), returns.end());
  for (double& r : excess) r -= rf_per_period;
  const double m = detail::mean(excess);
  const double sd = detail::sample_std(excess, m);
  if (detail::negligible_spread(sd, m)) {
    throw UndefinedMetricError("sharpe: excess returns have zero variance");
  }
  return m / sd * std::sqrt(periods_per_year);
}

struct AlphaBeta {
  double alpha;  // annualised intercept
  double beta;
};

/// OLS of strategy excess returns on benchmark excess returns.
inline AlphaBeta alpha_beta(std::span<const double> strategy, std::span<const double> benchmark,
                            double rf_per_period = 0.0, double periods_per_year = kWeeksPerYear) {
  detail::require_paired(strategy, benchmark, "alpha_beta");
  if (strategy.size() < 2) throw DataError("alpha_beta: at least two periods required");
  const std::size_t n = strategy.size();
  double ms = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ms += strategy[i] - rf_per_period;
    mb += benchmark[i] - rf_per_period;
  }
  ms /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double cov = 0.0, var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double db = benchmark[i] - rf_per_period - mb;
    cov += (strategy[i] - rf_per_period - ms) * db;
    var += db * db;
  }
  if (detail::negligible_spread(std::sqrt(var / static_cast<double>(n - 1)), mb)) {
    throw UndefinedMetricError("alpha_beta: benchmark returns have zero variance");
  }
  const double beta = cov / var;
  return {(ms - beta * mb) * periods_per_year, beta};
}

inline double annualized_return(std::span<const double> equity,
                                double periods_per_year = kWeeksPerYear) {
  if (equity.size() < 2) throw DataError("annualized_return: need at least one period");
  if (!(equity.front() > 0.0) || !(equity.back() > 0.0)) {
    throw DataError("annualized_return: equity must be positive");
  }
  const double periods = static_cast<double>(equity.size() - 1);
  return std::pow(equity.back() / equity.front(), periods_per_year / periods) - 1.0;
}

/// Annualised sample standard deviation of per-period returns.
inline double volatility(std::span<const double> returns, double periods_per_year = kWeeksPerYear) {
  if (returns.size() < 2) throw DataError("volatility: at least two returns required");
  return detail::sample_std(returns, detail::mean(returns)) * std::sqrt(periods_per_year);
}

// ---------------------------------------------------------------------------
// Indicator report

/// Indicators that are undefined for the run (zero variance) are empty and
/// serialise as null.
struct IndicatorReport {
  double strategy_return = 0.0;
  double annualized_return = 0.0;
  double benchmark_return = 0.0;
  double excess_return = 0.0;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<double> sharpe;
  double max_drawdown = 0.0;
  std::optional<double> strategy_volatility;
  std::optional<double> benchmark_volatility;
};

/// Builds the report from equity curves that start at 1 and the per-period
/// returns that produced them.
inline IndicatorReport compute_report(std::span<const double> strategy_equity,
                                      std::span<const double> benchmark_equity,
                                      std::span<const double> strategy_returns,
                                      std::span<const double> benchmark_returns,
                                      double rf_per_period = 0.0,
                                      double periods_per_year = kWeeksPerYear) {
  detail::require_paired(strategy_returns, benchmark_returns, "compute_report");
  IndicatorReport r;
  r.strategy_return = strategy_equity.back() / strategy_equity.front() - 1.0;
  r.benchmark_return = benchmark_equity.back() / benchmark_equity.front() - 1.0;
  r.excess_return = r.strategy_return - r.benchmark_return;
  r.annualized_return = annualized_return(strategy_equity, periods_per_year);
  r.max_drawdown = max_drawdown(strategy_equity);
  auto maybe = [](auto&& f) -> std::optional<double> {
    try {
      return f();
    } catch (const UndefinedMetricError&) {
      return std::nullopt;
    } catch (const DataError&) {
      return std::nullopt;
    }
  };
  r.sharpe = maybe([&] { return sharpe(strategy_returns, rf_per_period, periods_per_year); });
  r.strategy_volatility = maybe([&] { return volatility(strategy_returns, periods_per_year); });
  r.benchmark_volatility = maybe([&] { return volatility(benchmark_returns, periods_per_year); });
  try {
    const auto ab = alpha_beta(strategy_returns, benchmark_returns, rf_per_period, periods_per_year);
    r.alpha = ab.alpha;
    r.beta = ab.beta;
  } catch (const UndefinedMetricError&) {
  } catch (const DataError&) {
  }
  return r;
}

inline nlohmann::ordered_json to_json(const IndicatorReport& r) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json j;
  j["strategy_return"] = r.strategy_return;
  j["annualized_return"] = r.annualized_return;
  j["benchmark_return"] = r.benchmark_return;
  j["excess_return"] = r.excess_return;
  j["alpha"] = opt(r.alpha);
  j["beta"] = opt(r.beta);
  j["sharpe"] = opt(r.sharpe);
  j["max_drawdown"] = r.max_drawdown;
  j["strategy_volatility"] = opt(r.strategy_volatility);
  j["benchmark_volatility"] = opt(r.benchmark_volatility);
  return j;
}

inline IndicatorReport report_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
  };
  IndicatorReport r;
  r.strategy_return = j.at("strategy_return").get<double>();
  r.annualized_return = j.at("annualized_return").get<double>();
  r.benchmark_return = j.at("benchmark_return").get<double>();
  r.excess_return = j.at("excess_return").get<double>();
  r.alpha = opt("alpha");
  r.beta = opt("beta");
  r.sharpe = opt("sharpe");
  r.max_drawdown = j.at("max_drawdown").get<double>();
  r.strategy_volatility = opt("strategy_volatility");
  r.benchmark_volatility = opt("benchmark_volatility");
  return r;
}

}  // namespace rnnquant::metrics
