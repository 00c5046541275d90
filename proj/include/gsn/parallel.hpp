// Copyright 2026 The gsn Authors
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

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace gsn {

/// Worker count: explicit request, else GS_THREADS, else hardware concurrency.
inline int resolve_threads(int requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("GS_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on contiguous chunks. Callers write results into
/// preallocated slots and reduce afterwards, so output never depends on the
/// number of workers.
template <class F>
void parallel_for(long n, int threads, F&& fn) {
  threads = std::max(1, std::min<int>(threads, static_cast<int>(std::max(1L, n))));
  if (threads == 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  const long chunk = (n + threads - 1) / threads;
  for (int w = 0; w < threads; ++w) {
    const long lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] {
      try {
        for (long i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> g(mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

/// Pairwise summation in fixed order.
template <class T>
T pairwise_sum(const std::vector<T>& v, std::size_t lo, std::size_t hi, const T& zero) {
  if (hi <= lo) return zero;
  if (hi - lo <= 8) {
    T s = v[lo];
    for (std::size_t i = lo + 1; i < hi; ++i) s = s + v[i];
    return s;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  return pairwise_sum(v, lo, mid, zero) + pairwise_sum(v, mid, hi, zero);
}

}  // namespace gsn
