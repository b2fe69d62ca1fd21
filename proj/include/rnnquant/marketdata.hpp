// SPDX-License-Identifier: Apache-2.0
//
// Weekly bar panels, price/volume features, leakage-safe normalisation and
// windowing, walk-forward splits, and a synthetic panel generator.
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rnnquant/dataset.hpp"
#include "rnnquant/date.hpp"
#include "rnnquant/errors.hpp"
#include "rnnquant/log.hpp"
#include "rnnquant/numerics.hpp"

namespace rnnquant {

struct Ohlcv {
  double open = 0, high = 0, low = 0, close = 0, volume = 0;
  bool operator==(const Ohlcv&) const = default;
};

struct Bar {
  Date date;
  std::string symbol;
  Ohlcv px;
};

inline void validate_bar(const Bar& b) {
  const auto& p = b.px;
  auto fail = [&](const std::string& why) {
    return DataError("bar (" + b.date.str() + ", " + b.symbol + "): " + why);
  };
  for (double v : {p.open, p.high, p.low, p.close, p.volume})
    if (!std::isfinite(v)) throw fail("non-finite value");
  if (!(p.open > 0 && p.high > 0 && p.low > 0 && p.close > 0)) throw fail("prices must be positive");
  if (p.volume < 0) throw fail("volume must be nonnegative");
  if (p.high < p.low) throw fail("high < low");
  if (p.low > std::min(p.open, p.close)) throw fail("low above open/close");
  if (p.high < std::max(p.open, p.close)) throw fail("high below open/close");
}

/// Symbols x dates grid of bars; absent cells are missing bars.
struct BarPanel {
  std::vector<Date> dates;
  std::vector<std::string> symbols;
  std::vector<std::vector<std::optional<Ohlcv>>> bars;  // [symbol][date]

  std::size_t n_dates() const noexcept { return dates.size(); }
  std::size_t n_symbols() const noexcept { return symbols.size(); }
  bool has(std::size_t s, std::size_t t) const { return bars[s][t].has_value(); }
  const Ohlcv& at(std::size_t s, std::size_t t) const { return *bars[s][t]; }
  bool operator==(const BarPanel&) const = default;

  /// Sorts, de-duplicates the axes and validates every bar.
  static BarPanel from_bars(std::vector<Bar> rows) {
    BarPanel p;
    for (const auto& b : rows) {
      validate_bar(b);
      p.dates.push_back(b.date);
      p.symbols.push_back(b.symbol);
    }
    auto uniq = [](auto& v) {
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    uniq(p.dates);
    uniq(p.symbols);
    p.bars.assign(p.symbols.size(), std::vector<std::optional<Ohlcv>>(p.dates.size()));
    for (const auto& b : rows) {
      const auto s = std::lower_bound(p.symbols.begin(), p.symbols.end(), b.symbol) - p.symbols.begin();
      const auto t = std::lower_bound(p.dates.begin(), p.dates.end(), b.date) - p.dates.begin();
      auto& cell = p.bars[s][t];
      if (cell) throw DataError("duplicate bar (" + b.date.str() + ", " + b.symbol + ")");
      cell = b.px;
    }
    return p;
  }
};

// ---------------------------------------------------------------------------
// CSV

inline constexpr std::string_view kBarsHeader = "date,symbol,open,high,low,close,volume";

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline double parse_real(std::string_view s, std::size_t line, std::string_view field) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ParseError(line, "invalid " + std::string(field) + " '" + std::string(s) + "'");
  }
  return v;
}

inline std::string format_real(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace detail

inline BarPanel read_bars(std::istream& is) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(is, line)) throw DataError("bars file is empty (missing header)");
  detail::strip_cr(line);
  if (line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
  if (line != kBarsHeader) throw ParseError(1, "expected header '" + std::string(kBarsHeader) + "'");
  std::vector<Bar> rows;
  while (std::getline(is, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 7) throw ParseError(lineno, "expected 7 fields, got " + std::to_string(f.size()));
    Bar b;
    try {
      b.date = Date::parse(f[0]);
    } catch (const DataError& e) {
      throw ParseError(lineno, e.what());
    }
    if (f[1].empty()) throw ParseError(lineno, "empty symbol");
    b.symbol = std::string(f[1]);
    b.px = {detail::parse_real(f[2], lineno, "open"), detail::parse_real(f[3], lineno, "high"),
            detail::parse_real(f[4], lineno, "low"), detail::parse_real(f[5], lineno, "close"),
            detail::parse_real(f[6], lineno, "volume")};
    try {
      validate_bar(b);
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
    rows.push_back(std::move(b));
  }
  if (rows.empty()) throw DataError("bars file contains no rows (empty panel)");
  return BarPanel::from_bars(std::move(rows));
}

inline BarPanel load_bars(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open bars file '" + path + "'");
  return read_bars(is);
}

/// Date-major, symbol-minor rows; shortest round-trip number formatting.
inline void write_bars(std::ostream& os, const BarPanel& p) {
  os << kBarsHeader << '\n';
  for (std::size_t t = 0; t < p.n_dates(); ++t) {
    for (std::size_t s = 0; s < p.n_symbols(); ++s) {
      if (!p.has(s, t)) continue;
      const auto& b = p.at(s, t);
      os << p.dates[t].str() << ',' << p.symbols[s] << ',' << detail::format_real(b.open) << ','
         << detail::format_real(b.high) << ',' << detail::format_real(b.low) << ','
         << detail::format_real(b.close) << ',' << detail::format_real(b.volume) << '\n';
    }
  }
}

inline void save_bars(const std::string& path, const BarPanel& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write bars file '" + path + "'");
  write_bars(os, p);
}

/// True when consecutive axis dates are at least five days apart.
inline bool is_weekly(const BarPanel& p) {
  for (std::size_t t = 1; t < p.n_dates(); ++t)
    if ((p.dates[t] - p.dates[t - 1]).count() < 5) return false;
  return true;
}

/// Aggregates bars into Monday-to-Sunday weeks: first open, max high, min
/// low, last close, summed volume. The week is stamped with its last trading
/// date anywhere in the panel.
inline BarPanel resample_weekly(const BarPanel& p) {
  using std::chrono::days;
  auto week_of = [](Date d) {
    const std::chrono::weekday wd{d.days()};
    return d - days{(wd.c_encoding() + 6) % 7};  // Monday
  };
  std::vector<Date> week_keys, stamp;
  std::vector<std::size_t> week_index(p.n_dates());
  for (std::size_t t = 0; t < p.n_dates(); ++t) {
    const Date k = week_of(p.dates[t]);
    if (week_keys.empty() || week_keys.back() != k) {
      week_keys.push_back(k);
      stamp.push_back(p.dates[t]);
    }
    stamp.back() = p.dates[t];
    week_index[t] = week_keys.size() - 1;
  }
  BarPanel out;
  out.dates = stamp;
  out.symbols = p.symbols;
  out.bars.assign(p.n_symbols(), std::vector<std::optional<Ohlcv>>(stamp.size()));
  for (std::size_t s = 0; s < p.n_symbols(); ++s) {
    for (std::size_t t = 0; t < p.n_dates(); ++t) {
      if (!p.has(s, t)) continue;
      const Ohlcv& b = p.at(s, t);
      auto& w = out.bars[s][week_index[t]];
      if (!w) {
        w = b;
        continue;
      }
      w->high = std::max(w->high, b.high);
      w->low = std::min(w->low, b.low);
      w->close = b.close;
      w->volume += b.volume;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Features

inline constexpr std::size_t kMaxLookback = 12;
inline constexpr std::array<std::string_view, 8> kFeatureNames = {
    "ret_1w", "ret_4w", "ret_12w", "vol_4w", "vol_12w", "close_to_mean_12w", "volume_z_4w", "range"};

/// Per (symbol, date) feature vectors and next-week labels.
struct FeaturePanel {
  std::vector<Date> dates;
  std::vector<std::string> symbols;
  std::vector<std::string> names;
  std::vector<double> values;  // [symbol][date][feature]
  std::vector<double> labels;  // [symbol][date]
  std::vector<std::uint8_t> feature_valid;
  std::vector<std::uint8_t> label_valid;

  std::size_t features() const noexcept { return names.size(); }
  std::size_t cell(std::size_t s, std::size_t t) const noexcept { return s * dates.size() + t; }
  std::span<const double> row(std::size_t s, std::size_t t) const {
    return {values.data() + cell(s, t) * features(), features()};
  }
  std::span<double> row(std::size_t s, std::size_t t) {
    return {values.data() + cell(s, t) * features(), features()};
  }
  bool valid(std::size_t s, std::size_t t) const { return feature_valid[cell(s, t)] != 0; }
  bool has_label(std::size_t s, std::size_t t) const { return label_valid[cell(s, t)] != 0; }
  double label(std::size_t s, std::size_t t) const { return labels[cell(s, t)]; }

  void resize(std::size_t n_symbols, std::size_t n_dates, std::size_t n_features) {
    values.assign(n_symbols * n_dates * n_features, 0.0);
    labels.assign(n_symbols * n_dates, 0.0);
    feature_valid.assign(n_symbols * n_dates, 0);
    label_valid.assign(n_symbols * n_dates, 0);
  }
};

namespace detail {

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_sd(std::span<const double> v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace detail

/// Features at t use bars t-12..t; the label at t is close[t+1]/close[t] - 1.
/// Rows without the full lookback (or without t+1 for labels) are masked.
inline FeaturePanel build_features(const BarPanel& panel) {
  FeaturePanel fp;
  fp.dates = panel.dates;
  fp.symbols = panel.symbols;
  fp.names.assign(kFeatureNames.begin(), kFeatureNames.end());
  const std::size_t T = panel.n_dates(), F = fp.features();
  fp.resize(panel.n_symbols(), T, F);
  if (T < kMaxLookback + 2) {
    log::warn("panel has " + std::to_string(T) + " dates; features need at least " +
              std::to_string(kMaxLookback + 2) + " (all rows masked)");
    return fp;
  }
  std::vector<double> rets(kMaxLookback), closes(kMaxLookback), vols(4);
  for (std::size_t s = 0; s < panel.n_symbols(); ++s) {
    for (std::size_t t = 0; t < T; ++t) {
      if (t + 1 < T && panel.has(s, t) && panel.has(s, t + 1)) {
        fp.labels[fp.cell(s, t)] = panel.at(s, t + 1).close / panel.at(s, t).close - 1.0;
        fp.label_valid[fp.cell(s, t)] = 1;
      }
      if (t < kMaxLookback) continue;
      bool full = true;
      for (std::size_t k = t - kMaxLookback; k <= t && full; ++k) full = panel.has(s, k);
      if (!full) continue;

      auto close = [&](std::size_t lag) { return panel.at(s, t - lag).close; };
      for (std::size_t k = 0; k < kMaxLookback; ++k) {
        rets[k] = close(k) / close(k + 1) - 1.0;  // rets[0] is the latest week
        closes[k] = close(k);
      }
      for (std::size_t k = 0; k < 4; ++k) vols[k] = panel.at(s, t - 1 - k).volume;
      const Ohlcv& now = panel.at(s, t);
      const double vol_sd = detail::sample_sd(vols);

      auto out = fp.row(s, t);
      out[0] = rets[0];
      out[1] = close(0) / close(4) - 1.0;
      out[2] = close(0) / close(12) - 1.0;
      out[3] = detail::sample_sd(std::span<const double>(rets).first(4));
      out[4] = detail::sample_sd(rets);
      out[5] = close(0) / detail::mean_of(closes);
      out[6] = vol_sd > 0.0 ? (now.volume - detail::mean_of(vols)) / vol_sd : 0.0;
      out[7] = (now.high - now.low) / now.close;
      fp.feature_valid[fp.cell(s, t)] = 1;
    }
  }
  return fp;
}

// ---------------------------------------------------------------------------
// Normalisation

/// Z-score parameters for the retained features; population standard deviation.
struct Normalizer {
  std::vector<std::size_t> kept;
  std::vector<double> mean;
  std::vector<double> sd;
  std::vector<std::string> dropped;
};

/// Fits on feature-valid rows whose date lies in [from, to].
inline Normalizer fit_normalizer(const FeaturePanel& fp, Date from, Date to) {
  const std::size_t F = fp.features();
  std::vector<double> sum(F, 0.0), sq(F, 0.0);
  std::size_t n = 0;
  for (std::size_t s = 0; s < fp.symbols.size(); ++s) {
    for (std::size_t t = 0; t < fp.dates.size(); ++t) {
      if (fp.dates[t] < from || to < fp.dates[t] || !fp.valid(s, t)) continue;
      const auto r = fp.row(s, t);
      for (std::size_t f = 0; f < F; ++f) sum[f] += r[f];
      ++n;
    }
  }
  if (n == 0) throw DataError("no valid feature rows between " + from.str() + " and " + to.str());
  for (double& x : sum) x /= static_cast<double>(n);
  for (std::size_t s = 0; s < fp.symbols.size(); ++s) {
    for (std::size_t t = 0; t < fp.dates.size(); ++t) {
      if (fp.dates[t] < from || to < fp.dates[t] || !fp.valid(s, t)) continue;
      const auto r = fp.row(s, t);
      for (std::size_t f = 0; f < F; ++f) sq[f] += (r[f] - sum[f]) * (r[f] - sum[f]);
    }
  }
  Normalizer nz;
  for (std::size_t f = 0; f < F; ++f) {
    const double sd = std::sqrt(sq[f] / static_cast<double>(n));
    if (!(sd > 1e-12 * std::max(1.0, std::abs(sum[f])))) {
      nz.dropped.push_back(fp.names[f]);
      log::warn("feature '" + fp.names[f] + "' has zero variance on the fitting range; dropped");
      continue;
    }
    nz.kept.push_back(f);
    nz.mean.push_back(sum[f]);
    nz.sd.push_back(sd);
  }
  if (nz.kept.empty()) throw DataError("every feature has zero variance on the fitting range");
  return nz;
}

inline FeaturePanel apply_normalizer(const Normalizer& nz, const FeaturePanel& fp) {
  FeaturePanel out;
  out.dates = fp.dates;
  out.symbols = fp.symbols;
  for (std::size_t f : nz.kept) out.names.push_back(fp.names[f]);
  out.resize(fp.symbols.size(), fp.dates.size(), nz.kept.size());
  out.labels = fp.labels;
  out.feature_valid = fp.feature_valid;
  out.label_valid = fp.label_valid;
  for (std::size_t s = 0; s < fp.symbols.size(); ++s) {
    for (std::size_t t = 0; t < fp.dates.size(); ++t) {
      if (!fp.valid(s, t)) continue;
      const auto in = fp.row(s, t);
      auto o = out.row(s, t);
      for (std::size_t k = 0; k < nz.kept.size(); ++k) o[k] = (in[nz.kept[k]] - nz.mean[k]) / nz.sd[k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windowing

/// Optional limits on which anchors become samples.
struct SampleFilter {
  std::optional<Date> anchor_from;
  std::optional<Date> anchor_to;
  std::optional<Date> label_before;  // label realisation date must be strictly earlier
};

/// One sample per anchor t with a valid label whose L rows t-L+1..t are all
/// feature-valid.
inline SequenceDataset make_supervised(const FeaturePanel& fp, std::size_t symbol, std::size_t window,
                                       const SampleFilter& filter = {}) {
  if (window == 0) throw ConfigError("window length must be at least 1");
  if (symbol >= fp.symbols.size()) throw DimensionError("symbol index out of range");
  SequenceDataset d;
  d.window = window;
  d.features = fp.features();
  std::size_t run = 0;  // consecutive feature-valid rows ending at t
  for (std::size_t t = 0; t < fp.dates.size(); ++t) {
    run = fp.valid(symbol, t) ? run + 1 : 0;
    if (run < window || !fp.has_label(symbol, t) || t + 1 >= fp.dates.size()) continue;
    const Date anchor = fp.dates[t], realised = fp.dates[t + 1];
    if (filter.anchor_from && anchor < *filter.anchor_from) continue;
    if (filter.anchor_to && *filter.anchor_to < anchor) continue;
    if (filter.label_before && !(realised < *filter.label_before)) continue;
    Matrix x(window, d.features);
    for (std::size_t l = 0; l < window; ++l) {
      const auto r = fp.row(symbol, t + 1 - window + l);
      std::copy(r.begin(), r.end(), x.row(l).begin());
    }
    d.inputs.push_back(std::move(x));
    d.targets.push_back(fp.label(symbol, t));
    d.symbols.push_back(symbol);
    d.anchor_dates.push_back(anchor);
    d.label_dates.push_back(realised);
    d.first_dates.push_back(fp.dates[t + 1 - window]);
  }
  if (d.empty() && !filter.anchor_from && !filter.anchor_to && !filter.label_before) {
    log::warn("window " + std::to_string(window) + " exceeds the valid history of " + fp.symbols[symbol]);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Walk-forward splits

enum class TrainMode { expanding, sliding };

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "expanding") return TrainMode::expanding;
  if (s == "sliding") return TrainMode::sliding;
  throw ConfigError("unknown train mode '" + std::string(s) + "' (expanding|sliding)");
}

inline std::string to_string(TrainMode m) { return m == TrainMode::expanding ? "expanding" : "sliding"; }

/// Half-open index ranges into the date axis plus the calendar bounds that
/// produced them.
struct RollingSplit {
  std::size_t train_begin = 0, train_end = 0;
  std::size_t test_begin = 0, test_end = 0;
  Date train_from, test_from, test_until;  // test_until is exclusive
};

/// The first test window starts at axis.front() + initial; each later one
/// `step` after the previous. Training uses every earlier date (expanding) or
/// the trailing `initial` span (sliding).
inline std::vector<RollingSplit> rolling_splits(std::span<const Date> axis, const Period& initial,
                                                const Period& step,
                                                TrainMode mode = TrainMode::expanding) {
  if (axis.empty()) throw ConfigError("rolling_splits: empty date axis");
  if (initial.is_zero() || step.is_zero()) throw ConfigError("rolling_splits: periods must be positive");
  const Date first = axis.front(), last = axis.back();
  const auto spacing = axis.size() > 1 ? axis[axis.size() - 1] - axis[axis.size() - 2] : std::chrono::days{7};
  Date boundary = initial.after(first);
  if (last + spacing < boundary) {
    throw ConfigError("data spans " + first.str() + " to " + last.str() + " but the initial training period " +
                      initial.str() + " needs data until " + boundary.str() + " plus at least one test step");
  }
  auto index_of = [&](Date d) {
    return static_cast<std::size_t>(std::lower_bound(axis.begin(), axis.end(), d) - axis.begin());
  };
  std::vector<RollingSplit> out;
  while (!(last < boundary)) {
    const Date until = step.after(boundary);
    RollingSplit sp;
    sp.test_from = boundary;
    sp.test_until = until;
    sp.test_begin = index_of(boundary);
    sp.test_end = index_of(until);
    sp.train_from = mode == TrainMode::expanding ? first : initial.before(boundary);
    sp.train_begin = index_of(sp.train_from);
    sp.train_end = sp.test_begin;
    if (sp.test_begin < sp.test_end && sp.train_begin < sp.train_end) out.push_back(sp);
    boundary = until;
  }
  if (out.empty()) log::warn("date axis ends at the initial training boundary; no test windows");
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic panels

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t symbols = 50;
  std::size_t weeks = 300;
  double signal = 0.0;
  Date start{2008, 1, 4};

  void validate() const {
    if (symbols < 2) throw ConfigError("synthetic panel needs at least 2 symbols");
    if (weeks < 30) throw ConfigError("synthetic panel needs at least 30 weeks");
    if (!(signal >= 0.0 && signal <= 1.0)) throw ConfigError("signal strength must lie in [0, 1]");
  }
};

/// Log-price random walk: common market factor plus an AR(1) idiosyncratic
/// return whose persistence is the signal strength, so this week's return
/// predicts next week's cross-sectionally.
inline BarPanel gen_synthetic_panel(const SynthConfig& cfg) {
  cfg.validate();
  constexpr double kMarketMean = 0.001, kMarketSd = 0.015, kIdioSd = 0.03;
  Rng rng(cfg.seed);
  BarPanel p;
  const std::size_t width = std::to_string(cfg.symbols).size() < 3 ? 3 : std::to_string(cfg.symbols).size();
  for (std::size_t s = 0; s < cfg.symbols; ++s) {
    std::string id = std::to_string(s + 1);
    p.symbols.push_back("S" + std::string(width - id.size(), '0') + id);
  }
  for (std::size_t w = 0; w < cfg.weeks; ++w) p.dates.push_back(cfg.start + std::chrono::days{7 * w});
  p.bars.assign(cfg.symbols, std::vector<std::optional<Ohlcv>>(cfg.weeks));

  const double rho = cfg.signal, innov = std::sqrt(1.0 - rho * rho) * kIdioSd;
  std::vector<double> close(cfg.symbols), idio(cfg.symbols);
  for (std::size_t s = 0; s < cfg.symbols; ++s) {
    close[s] = 20.0 * std::exp(0.3 * rng.normal());
    idio[s] = kIdioSd * rng.normal();
  }
  for (std::size_t w = 0; w < cfg.weeks; ++w) {
    const double market = kMarketMean + kMarketSd * rng.normal();
    for (std::size_t s = 0; s < cfg.symbols; ++s) {
      const double prev = close[s];
      if (w > 0) {
        idio[s] = rho * idio[s] + innov * rng.normal();
        close[s] = prev * std::exp(market + idio[s]);
      }
      Ohlcv b;
      b.close = close[s];
      b.open = prev * std::exp(0.005 * rng.normal());
      b.high = std::max(b.open, b.close) * (1.0 + 0.01 * std::abs(rng.normal()));
      b.low = std::min(b.open, b.close) / (1.0 + 0.01 * std::abs(rng.normal()));
      b.volume = 1e6 * std::exp(0.3 * rng.normal());
      p.bars[s][w] = b;
    }
  }
  return p;
}

}  // namespace rnnquant
