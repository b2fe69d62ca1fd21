// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and the command implementations behind the CLI. Each
// command writes its resolved configuration next to its outputs so a run
// can be repeated from that file alone.
#pragma once

#include <array>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "rnnquant/backtest.hpp"
#include "rnnquant/checkpoint.hpp"
#include "rnnquant/marketdata.hpp"
#include "rnnquant/metrics.hpp"
#include "rnnquant/model.hpp"

namespace rnnquant::app {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct KeyInfo {
  std::string_view key;
  std::string_view fallback;
  std::string_view help;
};

// clang-format off
inline constexpr std::array kKeys = {
    KeyInfo{"seed", "0", "master seed; --seed overrides"},
    KeyInfo{"out", "out", "output directory; --out overrides"},
    KeyInfo{"data", "", "bars CSV (date,symbol,open,high,low,close,volume); empty means synthetic"},
    KeyInfo{"benchmark", "", "optional benchmark CSV (date,close); empty means equal-weight universe"},
    KeyInfo{"synth_symbols", "50", "synthetic panel: number of symbols"},
    KeyInfo{"synth_weeks", "300", "synthetic panel: number of weekly bars"},
    KeyInfo{"synth_signal", "0.5", "synthetic panel: momentum signal strength in [0, 1]"},
    KeyInfo{"synth_start", "2008-01-04", "synthetic panel: first bar date"},
    KeyInfo{"model", "paper", "preset (paper, lstm-gru) or a layer string"},
    KeyInfo{"lstm_width", "256", "preset LSTM units"},
    KeyInfo{"gru_width", "128", "preset GRU units"},
    KeyInfo{"dense_width", "32", "preset hidden dense units"},
    KeyInfo{"dropout", "0.2", "preset dropout rate"},
    KeyInfo{"window", "12", "sequence length in weeks"},
    KeyInfo{"learning_rate", "0.0001", "Adam step size"},
    KeyInfo{"epochs", "20", "training epochs"},
    KeyInfo{"batch_size", "32", "mini-batch size"},
    KeyInfo{"clip_norm", "5", "global gradient-norm clip, or none"},
    KeyInfo{"adam_beta1", "0.9", "Adam first-moment decay"},
    KeyInfo{"adam_beta2", "0.999", "Adam second-moment decay"},
    KeyInfo{"adam_epsilon", "1e-08", "Adam denominator offset"},
    KeyInfo{"val_fraction", "0.2", "train: trailing share of dates held out for validation"},
    KeyInfo{"max_train_samples", "0", "backtest: per-split cap on training windows (0 = all)"},
    KeyInfo{"top_k", "30", "backtest: portfolio size"},
    KeyInfo{"cost_bps", "0", "backtest: cost per unit turnover in basis points"},
    KeyInfo{"initial_train", "3y", "backtest: closed learning period"},
    KeyInfo{"step", "13w", "backtest: test window per split"},
    KeyInfo{"train_mode", "expanding", "backtest: expanding or sliding training window"},
    KeyInfo{"threads", "1", "backtest: concurrent splits"},
    KeyInfo{"risk_free", "0", "risk-free return per period"},
    KeyInfo{"periods_per_year", "52", "annualisation factor"},
    KeyInfo{"eps", "1e-05", "gradcheck: finite-difference step in [1e-7, 1e-3]"},
    KeyInfo{"gradcheck_width", "8", "gradcheck: preset LSTM width (other layers use half)"},
    KeyInfo{"gradcheck_trials", "5", "gradcheck: random models and windows per preset"},
    KeyInfo{"perfect_foresight", "false", "test hook: rank by realised returns"},
    KeyInfo{"inject_fault", "false", "test hook: corrupt the analytic gradient"},
};
// clang-format on

/// Flat key = value configuration with documented defaults.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : kKeys) values_[std::string(k.key)] = std::string(k.fallback);
  }

  static RunConfig parse(std::istream& is) {
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto text = trim(line);
      if (text.empty()) continue;
      const auto eq = text.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
      }
      const std::string key(trim(text.substr(0, eq)));
      try {
        cfg.set(key, std::string(trim(text.substr(eq + 1))));
      } catch (const ConfigError& e) {
        throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
      }
    }
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file '" + path + "'");
    return parse(is);
  }

  void set(const std::string& key, std::string value) {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = std::move(value);
  }

  const std::string& str(const std::string& key) const { return values_.at(key); }

  template <typename T>
  T num(const std::string& key) const {
    const std::string& s = str(key);
    T v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) {
      throw ConfigError("config key '" + key + "': invalid number '" + s + "'");
    }
    return v;
  }

  bool flag(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + s + "'");
  }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& k : kKeys) {
      os << "# " << k.help << '\n' << k.key << " = " << values_.at(std::string(k.key)) << '\n';
    }
    return os.str();
  }

  // --- typed views --------------------------------------------------------

  SynthConfig synth() const {
    SynthConfig s;
    s.seed = num<std::uint64_t>("seed");
    s.symbols = num<std::size_t>("synth_symbols");
    s.weeks = num<std::size_t>("synth_weeks");
    s.signal = num<double>("synth_signal");
    try {
      s.start = Date::parse(str("synth_start"));
    } catch (const DataError& e) {
      throw ConfigError(std::string("synth_start: ") + e.what());
    }
    s.validate();
    return s;
  }

  PresetWidths widths() const {
    return {num<std::size_t>("lstm_width"), num<std::size_t>("gru_width"), num<std::size_t>("dense_width"),
            num<double>("dropout")};
  }

  TrainConfig train() const {
    TrainConfig t;
    t.learning_rate = num<double>("learning_rate");
    t.epochs = num<std::size_t>("epochs");
    t.batch_size = num<std::size_t>("batch_size");
    if (str("clip_norm") == "none") {
      t.clip_norm.reset();
    } else {
      t.clip_norm = num<double>("clip_norm");
    }
    t.beta1 = num<double>("adam_beta1");
    t.beta2 = num<double>("adam_beta2");
    t.epsilon = num<double>("adam_epsilon");
    t.seed = num<std::uint64_t>("seed");
    t.validate();
    return t;
  }

  BacktestConfig backtest() const {
    BacktestConfig b;
    b.top_k = num<std::size_t>("top_k");
    b.cost_bps = num<double>("cost_bps");
    b.initial_train = Period::parse(str("initial_train"));
    b.step = Period::parse(str("step"));
    b.train_mode = parse_train_mode(str("train_mode"));
    b.model = str("model");
    b.widths = widths();
    b.window = num<std::size_t>("window");
    b.train = train();
    b.max_train_samples = num<std::size_t>("max_train_samples");
    b.seed = num<std::uint64_t>("seed");
    b.threads = num<std::size_t>("threads");
    b.risk_free = num<double>("risk_free");
    b.periods_per_year = num<double>("periods_per_year");
    b.perfect_foresight = flag("perfect_foresight");
    if (!str("benchmark").empty()) b.benchmark = load_benchmark(str("benchmark"));
    b.validate();
    return b;
  }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
  }

  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Shared helpers

namespace detail {

inline std::filesystem::path prepare_out(const RunConfig& cfg) {
  const std::filesystem::path out = cfg.str("out");
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw DataError("cannot create output directory '" + out.string() + "': " + ec.message());
  std::ofstream os(out / "config.txt", std::ios::binary);
  if (!os) throw DataError("cannot write '" + (out / "config.txt").string() + "'");
  os << cfg.to_text();
  return out;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  return os;
}

/// Bars from the configured file (resampled to weekly when daily) or the
/// synthetic generator.
inline BarPanel load_panel(const RunConfig& cfg) {
  if (cfg.str("data").empty()) return gen_synthetic_panel(cfg.synth());
  BarPanel p = load_bars(cfg.str("data"));
  return is_weekly(p) ? p : resample_weekly(p);
}

inline std::string fmt(const std::optional<double>& v) {
  if (!v) return "undefined";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << *v;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

inline int cmd_synth(const RunConfig& cfg, std::ostream& console = std::cout) {
  const SynthConfig sc = cfg.synth();
  const auto out = detail::prepare_out(cfg);
  const BarPanel panel = gen_synthetic_panel(sc);
  auto os = detail::open_out(out / "bars.csv");
  write_bars(os, panel);
  console << "wrote " << (out / "bars.csv").string() << ": " << sc.symbols << " symbols, " << sc.weeks
          << " weeks, seed " << sc.seed << ", signal " << sc.signal << '\n';
  return kOk;
}

/// Pooled training run over every symbol: the last val_fraction of labelled
/// weeks is held out, the normaliser is fit on the rest.
struct PooledRun {
  ModelSpec spec;
  SequenceDataset train_set;
  SequenceDataset val_set;
  Model initial;
  TrainResult result;
};

/// Mean absolute percentage error of next-week closes implied by predicted
/// returns: close_t (1 + y_hat) against close_t (1 + y). close_t cancels.
inline double price_mape(std::span<const double> predicted_returns, std::span<const double> realised_returns) {
  std::vector<double> pred(predicted_returns.size()), actual(realised_returns.size());
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = 1.0 + predicted_returns[i];
  for (std::size_t i = 0; i < actual.size(); ++i) actual[i] = 1.0 + realised_returns[i];
  return metrics::mape(actual, pred);
}

inline PooledRun train_pooled(const BarPanel& panel, const RunConfig& cfg, const EpochCallback& on_epoch = {}) {
  const TrainConfig tc = cfg.train();
  const std::size_t window = cfg.num<std::size_t>("window");
  const double val_fraction = cfg.num<double>("val_fraction");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  if (window < 1) throw ConfigError("window must be at least 1");

  const FeaturePanel raw = build_features(panel);
  std::vector<std::size_t> labelled;  // weeks with at least one usable row
  for (std::size_t t = 0; t < raw.dates.size(); ++t)
    for (std::size_t s = 0; s < raw.symbols.size(); ++s)
      if (raw.valid(s, t) && raw.has_label(s, t)) {
        labelled.push_back(t);
        break;
      }
  if (labelled.size() < 2) throw DataError("not enough labelled weeks to train on");
  const auto n_val = static_cast<std::size_t>(val_fraction * static_cast<double>(labelled.size()));
  if (n_val >= labelled.size()) throw ConfigError("val_fraction leaves no training weeks");

  SampleFilter tf, vf;
  Date fit_to = raw.dates[labelled.back()];
  if (n_val) {
    const std::size_t first_val = labelled[labelled.size() - n_val];
    tf.label_before = raw.dates[first_val];
    vf.anchor_from = raw.dates[first_val];
    fit_to = raw.dates[first_val - 1];
  }
  const FeaturePanel z = apply_normalizer(fit_normalizer(raw, raw.dates.front(), fit_to), raw);

  PooledRun run;
  run.spec = resolve_model(cfg.str("model"), z.features(), window, cfg.widths());
  run.train_set.window = run.val_set.window = window;
  run.train_set.features = run.val_set.features = z.features();
  for (std::size_t s = 0; s < z.symbols.size(); ++s) {
    run.train_set.append(make_supervised(z, s, window, tf));
    if (n_val) run.val_set.append(make_supervised(z, s, window, vf));
  }
  if (run.train_set.empty()) throw DataError("no training windows of length " + std::to_string(window));

  Rng rng(tc.seed);
  run.initial = build_model(run.spec, rng);
  run.result = train(run.initial, run.train_set, tc, n_val ? &run.val_set : nullptr, on_epoch);
  return run;
}

/// Writes history.csv (one row per finished epoch, flushed as it goes) and
/// checkpoint.txt.
inline int cmd_train(const RunConfig& cfg, std::ostream& console = std::cout) {
  cfg.train();
  resolve_model(cfg.str("model"), 1, std::max<std::size_t>(cfg.num<std::size_t>("window"), 1), cfg.widths());
  const BarPanel panel = detail::load_panel(cfg);
  const auto out = detail::prepare_out(cfg);

  auto history = detail::open_out(out / "history.csv");
  const bool with_val = cfg.num<double>("val_fraction") > 0.0;
  history << (with_val ? "epoch,train_loss,val_loss,dir_acc\n" : "epoch,train_loss\n") << std::flush;
  const PooledRun run = train_pooled(panel, cfg, [&](const EpochRecord& r) {
    history << TrainHistory::csv_row(r) << std::flush;
    console << "epoch " << r.epoch << " train_loss " << r.train_loss;
    if (r.val_loss) console << " val_loss " << *r.val_loss;
    if (r.dir_acc) console << " dir_acc " << *r.dir_acc;
    console << '\n';
  });
  console << "model " << run.spec.layers_str() << " (" << run.initial.parameter_count() << " parameters), "
          << run.train_set.size() << " training / " << run.val_set.size() << " validation windows\n";
  if (!run.val_set.empty()) {
    std::vector<double> pred;
    for (const Matrix& x : run.val_set.inputs) pred.push_back(predict(run.result.model, x));
    const std::vector<double> naive(pred.size(), 0.0);
    console << "validation price MAPE " << price_mape(pred, run.val_set.targets) << " (no-change baseline "
            << price_mape(naive, run.val_set.targets) << ")\n";
  }
  save_checkpoint((out / "checkpoint.txt").string(), run.result.model, cfg.num<std::uint64_t>("seed"));
  console << "wrote " << (out / "checkpoint.txt").string() << " and " << (out / "history.csv").string() << '\n';
  return kOk;
}

inline void print_report(std::ostream& os, const metrics::IndicatorReport& r) {
  const std::pair<const char*, std::optional<double>> rows[] = {
      {"strategy_return", r.strategy_return},
      {"annualized_return", r.annualized_return},
      {"benchmark_return", r.benchmark_return},
      {"excess_return", r.excess_return},
      {"alpha", r.alpha},
      {"beta", r.beta},
      {"sharpe", r.sharpe},
      {"max_drawdown", r.max_drawdown},
      {"strategy_volatility", r.strategy_volatility},
      {"benchmark_volatility", r.benchmark_volatility},
  };
  for (const auto& [name, v] : rows) os << std::left << std::setw(22) << name << detail::fmt(v) << '\n';
}

inline int cmd_backtest(const RunConfig& cfg, std::ostream& console = std::cout) {
  const BacktestConfig bc = cfg.backtest();
  const BarPanel panel = detail::load_panel(cfg);
  const auto out = detail::prepare_out(cfg);
  const BacktestResult r = run_backtest(panel, bc);
  {
    auto os = detail::open_out(out / "equity.csv");
    write_equity_csv(os, r);
  }
  {
    auto os = detail::open_out(out / "weights.csv");
    write_weights_csv(os, r);
  }
  {
    auto os = detail::open_out(out / "report.json");
    os << metrics::to_json(r.report).dump(2) << '\n';
  }
  console << r.splits.size() << " splits, " << r.formed.size() << " test weeks from " << r.formed.front().str()
          << " to " << r.realised.back().str() << '\n';
  print_report(console, r.report);
  return kOk;
}

/// Checks both presets at reduced width over several random windows and
/// reports the worst error per layer. Several draws keep a layer from
/// passing only because its relu units happened to be inactive. Exit status
/// is kNumeric when any layer exceeds the tolerance.
inline int cmd_gradcheck(const RunConfig& cfg, std::ostream& console = std::cout) {
  const double eps = cfg.num<double>("eps");
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ConfigError("eps must lie in [1e-7, 1e-3]");
  const std::size_t width = cfg.num<std::size_t>("gradcheck_width");
  const std::size_t trials = cfg.num<std::size_t>("gradcheck_trials");
  const std::size_t window = std::min<std::size_t>(cfg.num<std::size_t>("window"), 6);
  if (width < 1 || window < 1 || trials < 1) {
    throw ConfigError("gradcheck_width, gradcheck_trials and window must be positive");
  }
  GradCheckOptions opts;
  opts.corrupt_backward = cfg.flag("inject_fault");
  detail::prepare_out(cfg);

  Rng rng(cfg.num<std::uint64_t>("seed"));
  const std::size_t features = kFeatureNames.size();
  const PresetWidths w{width, std::max<std::size_t>(width / 2, 1), std::max<std::size_t>(width / 2, 1),
                       cfg.num<double>("dropout")};
  bool ok = true;
  for (const char* name : {"paper", "lstm-gru"}) {
    const ModelSpec spec = preset(name, features, window, w);
    GradCheckReport worst;
    worst.tolerance = opts.tolerance;
    for (std::size_t k = 0; k < trials; ++k) {
      const Model m = build_model(spec, rng);
      Matrix x(window, features);
      for (double& v : x.data()) v = rng.uniform(-1.0, 1.0);
      const GradCheckReport rep = grad_check(m, x, rng.uniform(-1.0, 1.0), eps, opts);
      if (worst.layers.empty()) {
        worst.layers = rep.layers;
        continue;
      }
      for (std::size_t i = 0; i < rep.layers.size(); ++i)
        if (rep.layers[i].max_rel_error > worst.layers[i].max_rel_error) worst.layers[i] = rep.layers[i];
    }
    console << name << ": " << spec.layers_str() << " (" << trials << " draws)\n";
    for (const auto& l : worst.layers) {
      console << "  layer " << l.layer << ' ' << std::left << std::setw(20) << l.description
              << " max_rel_error " << std::scientific << std::setprecision(3) << l.max_rel_error
              << std::defaultfloat << (l.max_rel_error < worst.tolerance ? "" : "  FAIL") << '\n';
    }
    ok = ok && worst.passed();
  }
  console << (ok ? "gradient check passed" : "gradient check FAILED") << '\n';
  return ok ? kOk : kNumeric;
}

/// Maps the exception hierarchy onto exit codes.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfig;
  if (dynamic_cast<const DataError*>(&e)) return kData;
  if (dynamic_cast<const TrainingDivergedError*>(&e)) return kNumeric;
  return kFailure;
}

}  // namespace rnnquant::app
