#pragma once

#include <chrono>
#include <cstdio>
#include <string>

namespace xdr::log {

inline bool& quiet() {
  static bool q = false;
  return q;
}

/// Progress line on stderr, prefixed with elapsed process time.
inline void info(const std::string& msg) {
  static const auto start = std::chrono::steady_clock::now();
  if (quiet()) return;
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::fprintf(stderr, "[%8.1fs] %s\n", s, msg.c_str());
}

inline void warn(const std::string& msg) { std::fprintf(stderr, "warning: %s\n", msg.c_str()); }

}  // namespace xdr::log
