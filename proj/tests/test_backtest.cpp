// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <sstream>

#include "rnnquant/backtest.hpp"

using namespace rnnquant;

namespace {

struct Quiet {
  log::ScopedSink sink{[](const std::string&) {}};
};

BarPanel synthetic(std::uint64_t seed, std::size_t symbols, std::size_t weeks, double signal) {
  SynthConfig cfg;
  cfg.seed = seed;
  cfg.symbols = symbols;
  cfg.weeks = weeks;
  cfg.signal = signal;
  return gen_synthetic_panel(cfg);
}

// Four symbols; in week t symbol t % 4 gains 10% and the rest lose 1%.
BarPanel rotating_panel(std::size_t weeks) {
  std::vector<Bar> rows;
  std::vector<double> close(4, 10.0);
  for (std::size_t t = 0; t < weeks; ++t) {
    const Date d = Date(2010, 1, 1) + std::chrono::days{7 * t};
    if (t > 0)
      for (std::size_t s = 0; s < 4; ++s) close[s] *= (s == (t - 1) % 4) ? 1.10 : 0.99;
    for (std::size_t s = 0; s < 4; ++s) {
      const double c = close[s];
      rows.push_back({d, std::string(1, char('A' + s)), {c, c, c, c, 1000.0 + double((t * 7 + s) % 5)}});
    }
  }
  return BarPanel::from_bars(rows);
}

BacktestConfig small_config() {
  BacktestConfig cfg;
  cfg.top_k = 3;
  cfg.initial_train = Period::parse("1y");
  cfg.step = Period::parse("13w");
  cfg.model = "gru(4) > dense(1,linear)";
  cfg.window = 4;
  cfg.train.epochs = 2;
  cfg.train.learning_rate = 1e-3;
  cfg.seed = 11;
  return cfg;
}

std::string equity_text(const BacktestResult& r) {
  std::ostringstream os;
  write_equity_csv(os, r);
  write_weights_csv(os, r);
  return os.str();
}

}  // namespace

TEST(SelectPortfolio, Examples) {
  EXPECT_EQ(select_portfolio({{"A", 0.02}, {"B", -0.01}, {"C", 0.05}}, 2), (Weights{{"A", 0.5}, {"C", 0.5}}));
  const Weights all = select_portfolio({{"A", 1}, {"B", 2}, {"C", 3}}, 5);
  ASSERT_EQ(all.size(), 3u);
  for (const auto& [s, w] : all) EXPECT_DOUBLE_EQ(w, 1.0 / 3.0);
  EXPECT_EQ(select_portfolio({{"A", 0.3}, {"D", 0.1}, {"B", 0.1}, {"C", 0.0}}, 2), (Weights{{"A", 0.5}, {"B", 0.5}}));
  Quiet q;
  EXPECT_TRUE(select_portfolio({}, 3).empty());
  EXPECT_THROW(select_portfolio({{"A", 1}}, 0), ConfigError);
}

TEST(EquityCurve, Examples) {
  EXPECT_EQ(equity_curve(std::vector{0.0, 0.0, 0.0}), (std::vector{1.0, 1.0, 1.0, 1.0}));
  const auto e = equity_curve(std::vector{0.1, -0.1});
  EXPECT_DOUBLE_EQ(e[1], 1.1);
  EXPECT_DOUBLE_EQ(e[2], 0.99);
  EXPECT_EQ(equity_curve(std::vector{0.25}), (std::vector{1.0, 1.25}));
  EXPECT_THROW(equity_curve(std::vector{0.1, -1.0}), DataError);
}

TEST(RunBacktest, PerfectForesightMatchesAnalyticTopK) {
  Quiet q;
  const BarPanel panel = synthetic(5, 20, 150, 0.3);
  BacktestConfig cfg = small_config();
  cfg.top_k = 5;
  cfg.perfect_foresight = true;
  const BacktestResult r = run_backtest(panel, cfg);
  const FeaturePanel fp = build_features(panel);

  double analytic = 1.0;
  for (std::size_t i = 0; i < r.formed.size(); ++i) {
    const std::size_t t = std::lower_bound(fp.dates.begin(), fp.dates.end(), r.formed[i]) - fp.dates.begin();
    std::vector<double> realised;
    for (std::size_t s = 0; s < fp.symbols.size(); ++s)
      if (fp.has_label(s, t)) realised.push_back(fp.label(s, t));
    std::sort(realised.rbegin(), realised.rend());
    double top = 0.0;
    for (std::size_t j = 0; j < 5; ++j) top += realised[j];
    analytic *= 1.0 + top / 5.0;
    EXPECT_NEAR(r.strategy_equity[i + 1] / analytic, 1.0, 1e-9);
  }
  EXPECT_GT(r.report.excess_return, 0.0);
  EXPECT_EQ(r.strategy_equity.size(), r.benchmark_equity.size());
}

TEST(RunBacktest, FirstTestWeekAndTiling) {
  Quiet q;
  const BarPanel panel = synthetic(6, 6, 120, 0.0);
  BacktestConfig cfg = small_config();
  cfg.perfect_foresight = true;
  const BacktestResult r = run_backtest(panel, cfg);
  EXPECT_EQ(r.formed.front(), r.splits.front().test_from + std::chrono::days{
      (7 - (r.splits.front().test_from - panel.dates.front()).count() % 7) % 7});
  EXPECT_EQ(r.formed.size(), panel.n_dates() - 1 - r.splits.front().test_begin);
  for (std::size_t i = 1; i < r.formed.size(); ++i) EXPECT_EQ(r.formed[i] - r.formed[i - 1], std::chrono::days{7});
}

TEST(RunBacktest, TrainedWeightsAreValidAndThreadIndependent) {
  Quiet q;
  const BarPanel panel = synthetic(7, 8, 110, 0.8);
  BacktestConfig cfg = small_config();
  const BacktestResult seq = run_backtest(panel, cfg);
  for (const auto& book : seq.weights) {
    double sum = 0.0;
    for (const auto& [s, w] : book) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_TRUE(std::abs(sum - 1.0) <= 1e-12 || sum == 0.0) << sum;
  }
  cfg.threads = 3;
  const BacktestResult par = run_backtest(panel, cfg);
  EXPECT_EQ(equity_text(seq), equity_text(par));
  EXPECT_EQ(metrics::to_json(seq.report).dump(), metrics::to_json(par.report).dump());
}

TEST(RunBacktest, CostsNeverHelp) {
  Quiet q;
  const BarPanel panel = synthetic(8, 12, 120, 0.5);
  BacktestConfig cfg = small_config();
  cfg.perfect_foresight = true;
  double previous = INFINITY;
  for (double bps : {0.0, 5.0, 25.0, 100.0, 1000.0}) {
    cfg.cost_bps = bps;
    const double final_equity = run_backtest(panel, cfg).strategy_equity.back();
    EXPECT_LE(final_equity, previous) << bps;
    previous = final_equity;
  }
}

TEST(RunBacktest, ExtremeCostCollapsesRotatingBook) {
  Quiet q;
  const BarPanel panel = rotating_panel(60);
  BacktestConfig cfg = small_config();
  cfg.perfect_foresight = true;
  cfg.top_k = 1;
  cfg.window = 2;
  cfg.initial_train = Period::parse("20w");
  cfg.step = Period::parse("4w");
  const BacktestResult free = run_backtest(panel, cfg);
  cfg.cost_bps = 10000;
  const BacktestResult costly = run_backtest(panel, cfg);
  for (std::size_t i = 1; i < free.turnover.size(); ++i) EXPECT_DOUBLE_EQ(free.turnover[i], 1.0);
  EXPECT_NEAR(free.strategy_returns[3], 0.10, 1e-12);
  EXPECT_GT(free.strategy_equity.back(), 10.0);
  EXPECT_LT(costly.strategy_equity.back(), 1e-20);
  EXPECT_GT(costly.strategy_equity.back(), 0.0);
}

TEST(RunBacktest, ExternalBenchmarkSeries) {
  Quiet q;
  const BarPanel panel = synthetic(9, 5, 100, 0.0);
  std::ostringstream csv;
  csv.precision(17);
  csv << "date,close\n";
  double level = 100.0;
  for (const Date& d : panel.dates) {
    csv << d.str() << ',' << level << '\n';
    level *= 1.01;
  }
  std::istringstream in(csv.str());
  BacktestConfig cfg = small_config();
  cfg.perfect_foresight = true;
  cfg.benchmark = read_benchmark(in);
  const BacktestResult r = run_backtest(panel, cfg);
  for (double b : r.benchmark_returns) EXPECT_NEAR(b, 0.01, 1e-12);
  EXPECT_FALSE(r.report.beta.has_value());

  std::istringstream bad("date,level\n");
  EXPECT_THROW(read_benchmark(bad), ParseError);
  cfg.benchmark = BenchmarkSeries{{panel.dates.front(), 1.0}};
  EXPECT_THROW(run_backtest(panel, cfg), DataError);
}

TEST(RunBacktest, InsufficientHistory) {
  Quiet q;
  const BarPanel panel = synthetic(10, 4, 40, 0.0);
  BacktestConfig cfg = small_config();
  EXPECT_THROW(run_backtest(panel, cfg), ConfigError);
  cfg.top_k = 0;
  EXPECT_THROW(run_backtest(panel, cfg), ConfigError);
}
