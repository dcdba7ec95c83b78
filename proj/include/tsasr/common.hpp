// Copyright 2025 The tsasr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsasr {

using Real = double;

// Error categories map to CLI exit codes: ConfigError -> 2, DataError -> 3,
// NumericError -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

// Seeded RNG with self-contained distributions. std::mt19937_64 output is
// standard-defined, but the std distributions are not, so uniform/gaussian
// draws are implemented here to keep corpora and experiments reproducible
// across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed), seed_view_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1) with 53 bits of randomness.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive range [lo, hi].
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(next_u64());  // full 64-bit range
    // Multiply-shift mapping; bias is negligible for span << 2^64.
    __uint128_t prod = static_cast<__uint128_t>(next_u64()) * span;
    return lo + static_cast<int64_t>(prod >> 64);
  }

  // Box-Muller, caching the second variate so the draw sequence is fixed.
  double gaussian() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
  }

  double gaussian(double mean, double stddev) {
    return mean + stddev * gaussian();
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream; children with distinct tags never collide.
  // Derived from the construction seed, not the current generator state, so
  // stream i depends only on (seed, i).
  Rng fork(uint64_t tag) const { return Rng(hash_mix(seed_view_, tag)); }

 private:
  std::mt19937_64 gen_;
  uint64_t seed_view_ = 0;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

}  // namespace tsasr
