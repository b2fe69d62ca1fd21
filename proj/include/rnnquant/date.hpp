// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <chrono>
#include <compare>
#include <cstdio>
#include <string>
#include <string_view>

#include "rnnquant/errors.hpp"

namespace rnnquant {

/// Calendar date with day resolution, serialised as YYYY-MM-DD.
class Date {
 public:
  constexpr Date() = default;
  constexpr explicit Date(std::chrono::sys_days d) : days_(d) {}
  constexpr Date(int y, unsigned m, unsigned d)
      : days_(std::chrono::year{y} / std::chrono::month{m} / std::chrono::day{d}) {}

  static Date parse(std::string_view s) {
    auto bad = [&] { return DataError("invalid date '" + std::string(s) + "' (expected YYYY-MM-DD)"); };
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') throw bad();
    int y = 0;
    unsigned m = 0, d = 0;
    auto num = [&](std::size_t pos, std::size_t len, auto& out) {
      for (std::size_t i = pos; i < pos + len; ++i)
        if (s[i] < '0' || s[i] > '9') throw bad();
      std::from_chars(s.data() + pos, s.data() + pos + len, out);
    };
    num(0, 4, y);
    num(5, 2, m);
    num(8, 2, d);
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m},
                                          std::chrono::day{d}};
    if (!ymd.ok()) throw bad();
    return Date(std::chrono::sys_days{ymd});
  }

  std::string str() const {
    const std::chrono::year_month_day ymd{days_};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
  }

  constexpr std::chrono::sys_days days() const noexcept { return days_; }
  constexpr std::chrono::year_month_day ymd() const noexcept { return {days_}; }

  constexpr Date operator+(std::chrono::days d) const noexcept { return Date(days_ + d); }
  constexpr Date operator-(std::chrono::days d) const noexcept { return Date(days_ - d); }
  constexpr std::chrono::days operator-(Date o) const noexcept { return days_ - o.days_; }

  constexpr auto operator<=>(const Date&) const = default;

 private:
  std::chrono::sys_days days_{};
};

/// Calendar period such as "3y", "13w" or "1y6m". Years and months are added
/// on the calendar (clamping to month end), weeks and days as fixed lengths.
struct Period {
  int years = 0;
  int months = 0;
  int weeks = 0;
  int days = 0;

  static Period parse(std::string_view s) {
    Period p;
    auto bad = [&] { return ConfigError("invalid period '" + std::string(s) + "' (e.g. 3y, 13w, 1y6m)"); };
    if (s.empty()) throw bad();
    std::size_t i = 0;
    while (i < s.size()) {
      int n = 0;
      const auto [ptr, ec] = std::from_chars(s.data() + i, s.data() + s.size(), n);
      if (ec != std::errc{} || ptr == s.data() + s.size() || n < 0) throw bad();
      i = static_cast<std::size_t>(ptr - s.data());
      switch (s[i++]) {
        case 'y': p.years += n; break;
        case 'm': p.months += n; break;
        case 'w': p.weeks += n; break;
        case 'd': p.days += n; break;
        default: throw bad();
      }
    }
    if (p.is_zero()) throw bad();
    return p;
  }

  bool is_zero() const noexcept { return years == 0 && months == 0 && weeks == 0 && days == 0; }

  std::string str() const {
    std::string out;
    if (years) out += std::to_string(years) + "y";
    if (months) out += std::to_string(months) + "m";
    if (weeks) out += std::to_string(weeks) + "w";
    if (days) out += std::to_string(days) + "d";
    return out.empty() ? "0d" : out;
  }

  Date after(Date d) const {
    using namespace std::chrono;
    year_month_day ymd = d.ymd();
    year_month_day moved = ymd + std::chrono::years{years} + std::chrono::months{months};
    if (!moved.ok()) moved = moved.year() / moved.month() / last;
    return Date(sys_days{moved}) + std::chrono::days{7 * weeks + days};
  }

  Date before(Date d) const {
    using namespace std::chrono;
    year_month_day ymd = (d - std::chrono::days{7 * weeks + days}).ymd();
    year_month_day moved = ymd - std::chrono::years{years} - std::chrono::months{months};
    if (!moved.ok()) moved = moved.year() / moved.month() / last;
    return Date(sys_days{moved});
  }
};

}  // namespace rnnquant
