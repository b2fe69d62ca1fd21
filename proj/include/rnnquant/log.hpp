// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <utility>

namespace rnnquant::log {

using Sink = std::function<void(const std::string&)>;

namespace detail {

inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

inline Sink& warning_sink() {
  static Sink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

}  // namespace detail

/// Replaces the warning sink and returns the previous one.
inline Sink set_warning_sink(Sink sink) {
  std::lock_guard lock(detail::sink_mutex());
  return std::exchange(detail::warning_sink(), std::move(sink));
}

inline void warn(const std::string& msg) {
  std::lock_guard lock(detail::sink_mutex());
  if (detail::warning_sink()) detail::warning_sink()(msg);
}

/// Installs a sink for the lifetime of the guard, restoring the old one after.
class ScopedSink {
 public:
  explicit ScopedSink(Sink sink) : previous_(set_warning_sink(std::move(sink))) {}
  ~ScopedSink() { set_warning_sink(std::move(previous_)); }
  ScopedSink(const ScopedSink&) = delete;
  ScopedSink& operator=(const ScopedSink&) = delete;

 private:
  Sink previous_;
};

}  // namespace rnnquant::log
