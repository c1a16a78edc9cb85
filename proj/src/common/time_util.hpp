#pragma once

#include <chrono>
#include <cstdint>

namespace livekv {

using SteadyClock = std::chrono::steady_clock;
using TimePoint = SteadyClock::time_point;

inline TimePoint now() { return SteadyClock::now(); }

inline std::uint64_t to_us(SteadyClock::duration d) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::microseconds>(d).count());
}

inline std::uint64_t to_ns(SteadyClock::duration d) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(d).count());
}

/// Microseconds elapsed since `epoch`.
inline std::uint64_t us_since(TimePoint epoch) { return to_us(now() - epoch); }

}  // namespace livekv
