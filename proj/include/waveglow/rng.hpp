#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "waveglow/errors.hpp"

namespace waveglow {

// Seeded random source with explicitly pinned sampling algorithms.
// std::*_distribution is implementation-defined, so Gaussian draws use a
// hand-written Box-Muller and bounded integers use rejection sampling;
// identical seeds then give identical streams on any platform.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64/box-muller";

  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (cosine branch). Consumes exactly two
  // engine draws per call, so the stream state is just the engine state.
  double normal() {
    double u1 = static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below: bound must be positive");
    std::uint64_t limit = n * (~std::uint64_t{0} / n);
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw FormatError("Rng::set_state: malformed engine state");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace waveglow
