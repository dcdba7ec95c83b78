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

// Test-only reference implementations. These deliberately avoid the library
// code paths they are used to check.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace oracle {

// erf via its Maclaurin series, summed in long double until convergence.
inline long double erf_series(long double x) {
  const long double two_over_sqrt_pi = 1.1283791670955125738961589031215L;
  long double term = x;
  long double sum = x;
  for (int n = 1; n < 200; ++n) {
    term *= -x * x / n;
    long double contrib = term / (2 * n + 1);
    sum += contrib;
    if (std::fabs((double)contrib) < 1e-25) break;
  }
  return two_over_sqrt_pi * sum;
}

// -log softmax picked out by direct summation, no max-stabilization.
inline double cross_entropy_row(const std::vector<double>& logits, int target) {
  long double denom = 0.0L;
  for (double v : logits) denom += std::exp((long double)v);
  long double p = std::exp((long double)logits[(size_t)target]) / denom;
  return (double)(-std::log(p));
}

// Frame start indices by direct enumeration.
inline std::vector<size_t> frame_starts(size_t n, size_t frame_len, size_t shift) {
  std::vector<size_t> starts;
  for (size_t s = 0; s + frame_len <= n; s += shift) starts.push_back(s);
  return starts;
}

// Minimum-edit-distance alignment with explicit operation counts.
// Tie preference when costs are equal: diagonal (match/substitution), then
// deletion, then insertion — the same convention the scorer documents.
struct EditCounts {
  int sub = 0, del = 0, ins = 0;
  int total() const { return sub + del + ins; }
};

inline EditCounts align_counts(const std::vector<int>& ref,
                               const std::vector<int>& hyp) {
  size_t R = ref.size(), H = hyp.size();
  // cost[i][j]: distance between ref[0..i) and hyp[0..j)
  std::vector<std::vector<int>> cost(R + 1, std::vector<int>(H + 1, 0));
  for (size_t i = 0; i <= R; ++i) cost[i][0] = (int)i;
  for (size_t j = 0; j <= H; ++j) cost[0][j] = (int)j;
  for (size_t i = 1; i <= R; ++i)
    for (size_t j = 1; j <= H; ++j) {
      int diag = cost[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      int del = cost[i - 1][j] + 1;
      int ins = cost[i][j - 1] + 1;
      cost[i][j] = std::min(diag, std::min(del, ins));
    }
  // Backtrace with the documented tie order.
  EditCounts c;
  size_t i = R, j = H;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      int diag = cost[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      if (diag == cost[i][j]) {
        if (ref[i - 1] != hyp[j - 1]) ++c.sub;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && cost[i - 1][j] + 1 == cost[i][j]) {
      ++c.del;
      --i;
      continue;
    }
    ++c.ins;
    --j;
  }
  return c;
}

}  // namespace oracle
