// SPDX-License-Identifier: Apache-2.0
//
// Walk-forward backtest: per split, fit the normaliser and a fresh pooled
// model on the training range, then form an equal-weight top-k portfolio
// every test week and hold it for one week.
#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "rnnquant/marketdata.hpp"
#include "rnnquant/metrics.hpp"
#include "rnnquant/model.hpp"

namespace rnnquant {

// ---------------------------------------------------------------------------
// Portfolio construction

using Weights = std::map<std::string, double>;

namespace detail {

/// Indices of the k best predictions; ties go to the smaller index.
inline std::vector<std::size_t> top_k(const std::vector<std::pair<std::size_t, double>>& preds,
                                      std::size_t k) {
  std::vector<std::pair<std::size_t, double>> sorted = preds;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  sorted.resize(std::min(k, sorted.size()));
  std::vector<std::size_t> out;
  for (const auto& p : sorted) out.push_back(p.first);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Equal weight 1/k on the k highest predictions (all of them when fewer
/// than k); ties broken by ascending symbol. Empty input gives a flat book.
inline Weights select_portfolio(const std::map<std::string, double>& predictions, std::size_t k) {
  if (k == 0) throw ConfigError("top_k must be at least 1");
  if (predictions.empty()) {
    log::warn("no predictions available; holding a flat portfolio");
    return {};
  }
  std::vector<std::string> names;
  std::vector<std::pair<std::size_t, double>> preds;
  for (const auto& [sym, p] : predictions) {
    preds.emplace_back(names.size(), p);
    names.push_back(sym);
  }
  const auto chosen = detail::top_k(preds, k);
  Weights w;
  for (std::size_t i : chosen) w[names[i]] = 1.0 / static_cast<double>(chosen.size());
  return w;
}

/// e_0 = 1, e_t = e_{t-1} (1 + r_t).
inline std::vector<double> equity_curve(std::span<const double> returns) {
  std::vector<double> e{1.0};
  e.reserve(returns.size() + 1);
  for (std::size_t t = 0; t < returns.size(); ++t) {
    if (!(returns[t] > -1.0)) {
      throw DataError("period " + std::to_string(t) + " return " + std::to_string(returns[t]) +
                      " wipes out the portfolio");
    }
    e.push_back(e.back() * (1.0 + returns[t]));
  }
  return e;
}

// ---------------------------------------------------------------------------
// Configuration

/// Optional external benchmark: closing level per date.
using BenchmarkSeries = std::map<Date, double>;

inline BenchmarkSeries read_benchmark(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("benchmark file is empty");
  detail::strip_cr(line);
  if (line != "date,close") throw ParseError(1, "expected header 'date,close'");
  BenchmarkSeries out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 2) throw ParseError(lineno, "expected 2 fields");
    Date d;
    try {
      d = Date::parse(f[0]);
    } catch (const DataError& e) {
      throw ParseError(lineno, e.what());
    }
    const double c = detail::parse_real(f[1], lineno, "close");
    if (!(c > 0.0)) throw DataError("benchmark close on " + d.str() + " must be positive");
    if (!out.emplace(d, c).second) throw DataError("duplicate benchmark date " + d.str());
  }
  if (out.empty()) throw DataError("benchmark file contains no rows");
  return out;
}

inline BenchmarkSeries load_benchmark(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open benchmark file '" + path + "'");
  return read_benchmark(is);
}

struct BacktestConfig {
  std::size_t top_k = 30;
  double cost_bps = 0.0;
  Period initial_train = Period::parse("3y");
  Period step = Period::parse("13w");
  TrainMode train_mode = TrainMode::expanding;
  std::string model = "lstm-gru";
  PresetWidths widths;
  std::size_t window = 12;
  TrainConfig train;
  std::size_t max_train_samples = 0;  // 0 keeps every training window
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  double risk_free = 0.0;  // per period
  double periods_per_year = metrics::kWeeksPerYear;
  std::optional<BenchmarkSeries> benchmark;
  bool perfect_foresight = false;  // test hook: predictions := realised returns

  void validate() const {
    if (top_k < 1) throw ConfigError("top_k must be at least 1");
    if (!(cost_bps >= 0.0)) throw ConfigError("cost_bps must be nonnegative");
    if (window < 1) throw ConfigError("window must be at least 1");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (!(periods_per_year > 0.0)) throw ConfigError("periods_per_year must be positive");
    train.validate();
  }
};

// ---------------------------------------------------------------------------
// Results

struct BacktestResult {
  std::vector<std::string> symbols;
  std::vector<Date> formed;    // portfolio formation date of each test week
  std::vector<Date> realised;  // date the week's return is known
  std::vector<double> strategy_returns;
  std::vector<double> benchmark_returns;
  std::vector<double> turnover;
  std::vector<double> strategy_equity;  // starts at 1, one entry per week after that
  std::vector<double> benchmark_equity;
  std::vector<std::vector<std::pair<std::size_t, double>>> weights;  // (symbol index, weight)
  std::vector<RollingSplit> splits;
  metrics::IndicatorReport report;
};

inline void write_equity_csv(std::ostream& os, const BacktestResult& r) {
  os << "date,strategy,benchmark\n";
  for (std::size_t t = 0; t < r.realised.size(); ++t) {
    os << r.realised[t].str() << ',' << detail::format_real(r.strategy_equity[t + 1]) << ','
       << detail::format_real(r.benchmark_equity[t + 1]) << '\n';
  }
}

inline void write_weights_csv(std::ostream& os, const BacktestResult& r) {
  os << "date,symbol,weight\n";
  for (std::size_t t = 0; t < r.formed.size(); ++t) {
    for (const auto& [s, w] : r.weights[t]) {
      os << r.formed[t].str() << ',' << r.symbols[s] << ',' << detail::format_real(w) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Engine

/// Predictions for one split: [test week][symbol], empty when the symbol is
/// outside that week's universe.
struct SplitForecast {
  std::vector<std::vector<std::optional<double>>> predictions;
  std::optional<TrainHistory> history;
};

inline std::uint64_t split_seed(std::uint64_t seed, std::size_t split) { return seed ^ split; }

namespace detail {

inline SplitForecast forecast_split(const FeaturePanel& fp, const RollingSplit& sp, std::size_t index,
                                    const BacktestConfig& cfg) {
  const std::size_t S = fp.symbols.size(), weeks = sp.test_end - sp.test_begin;
  SplitForecast out;
  out.predictions.assign(weeks, std::vector<std::optional<double>>(S));

  const Date train_from = fp.dates[sp.train_begin], train_to = fp.dates[sp.train_end - 1];
  const Date test_from = fp.dates[sp.test_begin], test_to = fp.dates[sp.test_end - 1];
  const FeaturePanel z = apply_normalizer(fit_normalizer(fp, train_from, train_to), fp);

  SampleFilter test_filter{test_from, test_to, std::nullopt};
  std::vector<SequenceDataset> tests(S);
  for (std::size_t s = 0; s < S; ++s) tests[s] = make_supervised(z, s, cfg.window, test_filter);

  auto week_of = [&](Date anchor) {
    return static_cast<std::size_t>(
        std::lower_bound(fp.dates.begin() + sp.test_begin, fp.dates.begin() + sp.test_end, anchor) -
        (fp.dates.begin() + sp.test_begin));
  };

  if (cfg.perfect_foresight) {
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t i = 0; i < tests[s].size(); ++i)
        out.predictions[week_of(tests[s].anchor_dates[i])][s] = tests[s].targets[i];
    return out;
  }

  SequenceDataset train_set;
  train_set.window = cfg.window;
  train_set.features = z.features();
  const SampleFilter train_filter{train_from, std::nullopt, test_from};
  for (std::size_t s = 0; s < S; ++s) train_set.append(make_supervised(z, s, cfg.window, train_filter));
  if (train_set.empty()) {
    throw DataError("split " + std::to_string(index) + " has no training windows before " + test_from.str());
  }

  const std::uint64_t seed = split_seed(cfg.seed, index);
  Rng rng(seed);
  if (cfg.max_train_samples && train_set.size() > cfg.max_train_samples) {
    std::vector<std::size_t> pick(train_set.size());
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    rng.shuffle(pick);
    pick.resize(cfg.max_train_samples);
    std::sort(pick.begin(), pick.end());
    SequenceDataset sub;
    sub.window = train_set.window;
    sub.features = train_set.features;
    for (std::size_t i : pick) {
      sub.inputs.push_back(std::move(train_set.inputs[i]));
      sub.targets.push_back(train_set.targets[i]);
      sub.symbols.push_back(train_set.symbols[i]);
      sub.anchor_dates.push_back(train_set.anchor_dates[i]);
      sub.label_dates.push_back(train_set.label_dates[i]);
      sub.first_dates.push_back(train_set.first_dates[i]);
    }
    train_set = std::move(sub);
  }

  const ModelSpec spec = resolve_model(cfg.model, z.features(), cfg.window, cfg.widths);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  TrainResult trained = train(build_model(spec, rng), train_set, tc);
  out.history = std::move(trained.history);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t i = 0; i < tests[s].size(); ++i)
      out.predictions[week_of(tests[s].anchor_dates[i])][s] = predict(trained.model, tests[s].inputs[i]);
  return out;
}

}  // namespace detail

/// Runs every split's forecast (concurrently when cfg.threads > 1), then does
/// the portfolio accounting in calendar order. Results do not depend on the
/// thread count.
inline BacktestResult run_backtest(const BarPanel& panel, const BacktestConfig& cfg) {
  cfg.validate();
  const FeaturePanel fp = build_features(panel);
  BacktestResult res;
  res.symbols = fp.symbols;
  res.splits = rolling_splits(fp.dates, cfg.initial_train, cfg.step, cfg.train_mode);
  if (res.splits.empty()) {
    throw ConfigError("backtest needs data beyond the initial training period " + cfg.initial_train.str() +
                      " plus at least one " + cfg.step.str() + " test step");
  }

  // Phase 1: independent per-split training and prediction.
  const std::size_t n_splits = res.splits.size();
  std::vector<SplitForecast> forecasts(n_splits);
  std::vector<std::exception_ptr> errors(n_splits);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < n_splits; k = next++) {
      try {
        forecasts[k] = detail::forecast_split(fp, res.splits[k], k, cfg);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(cfg.threads, n_splits);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  // Phase 2: weekly accounting.
  const std::size_t S = fp.symbols.size();
  const double cost = cfg.cost_bps / 1e4;
  std::vector<double> held(S, 0.0);  // drifted weights carried into the next rebalance
  for (std::size_t k = 0; k < n_splits; ++k) {
    const RollingSplit& sp = res.splits[k];
    // The final axis date has no following week to realise a return in.
    for (std::size_t t = sp.test_begin; t < std::min(sp.test_end, fp.dates.size() - 1); ++t) {
      const auto& preds = forecasts[k].predictions[t - sp.test_begin];
      std::vector<std::pair<std::size_t, double>> universe;
      for (std::size_t s = 0; s < S; ++s)
        if (preds[s]) universe.emplace_back(s, *preds[s]);

      std::vector<double> w(S, 0.0);
      std::vector<std::pair<std::size_t, double>> book;
      if (universe.empty()) {
        log::warn("no tradable symbols on " + fp.dates[t].str() + "; holding flat");
      } else {
        const auto chosen = detail::top_k(universe, cfg.top_k);
        for (std::size_t s : chosen) {
          w[s] = 1.0 / static_cast<double>(chosen.size());
          book.emplace_back(s, w[s]);
        }
      }

      double traded = 0.0, gross = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        traded += std::abs(w[s] - held[s]);
        if (w[s] > 0.0) gross += w[s] * fp.label(s, t);
      }
      const double turnover = 0.5 * traded;
      const double net = gross - cost * turnover;

      double bench = 0.0;
      if (cfg.benchmark) {
        const auto a = cfg.benchmark->find(fp.dates[t]);
        const auto b = cfg.benchmark->find(fp.dates[t + 1]);
        if (a == cfg.benchmark->end() || b == cfg.benchmark->end()) {
          throw DataError("benchmark series has no close for " + fp.dates[t].str() + " or the following week");
        }
        bench = b->second / a->second - 1.0;
      } else {
        std::size_t n = 0;
        for (std::size_t s = 0; s < S; ++s) {
          if (!fp.has_label(s, t)) continue;
          bench += fp.label(s, t);
          ++n;
        }
        if (n) bench /= static_cast<double>(n);
      }

      // Let the book drift with realised returns until the next rebalance.
      for (std::size_t s = 0; s < S; ++s)
        held[s] = w[s] > 0.0 ? w[s] * (1.0 + fp.label(s, t)) / (1.0 + gross) : 0.0;

      res.formed.push_back(fp.dates[t]);
      res.realised.push_back(fp.dates[t + 1]);
      res.strategy_returns.push_back(net);
      res.benchmark_returns.push_back(bench);
      res.turnover.push_back(turnover);
      res.weights.push_back(std::move(book));
    }
  }
  if (res.strategy_returns.empty()) {
    throw ConfigError("backtest has no test week with a realised return; extend the data by one week");
  }
  res.strategy_equity = equity_curve(res.strategy_returns);
  res.benchmark_equity = equity_curve(res.benchmark_returns);
  res.report = metrics::compute_report(res.strategy_equity, res.benchmark_equity, res.strategy_returns,
                                       res.benchmark_returns, cfg.risk_free, cfg.periods_per_year);
  return res;
}

}  // namespace rnnquant
