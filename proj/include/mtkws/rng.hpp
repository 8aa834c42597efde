// mtkws/rng.hpp

// Copyright 2026  MT-KWS Authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef MTKWS_RNG_HPP
#define MTKWS_RNG_HPP

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

#include "mtkws/common.hpp"

namespace mtkws {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Child seed for a named substream. Fixed arithmetic, so adding more
// substreams never perturbs existing ones.
inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> parts) {
  uint64_t h = splitmix64(base);
  for (uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

// mt19937_64 with hand-rolled distributions. The engine's output sequence is
// fully specified by the standard; std:: distributions are not, so we avoid
// them to keep byte-identical artifacts across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(splitmix64(seed)) {}

  uint64_t raw() { return eng_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform on {0, ..., n-1} without modulo bias.
  uint64_t uniform_int(uint64_t n) {
    MTKWS_REQUIRE(n > 0, ErrorKind::kPrecondition, "uniform_int needs n > 0");
    uint64_t bound = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= bound);
    return x % n;
  }

  // Box-Muller; consumes two uniforms per call.
  double normal() {
    double u1 = static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Marsaglia-Tsang; alpha < 1 via the boost Gamma(a) = Gamma(a+1) U^(1/a).
  double gamma(double alpha) {
    MTKWS_REQUIRE(alpha > 0.0, ErrorKind::kPrecondition, "gamma needs alpha > 0");
    if (alpha < 1.0) {
      double u = static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;
      return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    double d = alpha - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    while (true) {
      double x = normal();
      double t = 1.0 + c * x;
      if (t <= 0.0) continue;
      double v = t * t * t;
      double u = static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  double beta(double a, double b) {
    double x = gamma(a);
    double y = gamma(b);
    return x / (x + y);
  }

  // Partial Fisher-Yates: first k entries are a uniform draw without
  // replacement.
  template <typename T>
  void shuffle_prefix(std::vector<T>& v, size_t k) {
    size_t n = v.size();
    for (size_t i = 0; i < k && i + 1 < n; ++i) {
      size_t j = i + static_cast<size_t>(uniform_int(n - i));
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace mtkws

#endif  // MTKWS_RNG_HPP
