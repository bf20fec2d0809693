// Copyright 2026 The segtransvae Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef STV_RNG_HPP_
#define STV_RNG_HPP_

#include <array>
#include <cstdint>

namespace stv {

/// Seedable pseudo-random generator: xoshiro256** (version 1), seeded through
/// splitmix64. The algorithm is fixed so that identical seeds reproduce
/// identical streams everywhere; normal() uses the polar method with a cached
/// spare, so the full generator state is (s[0..3], has_spare, spare).
class Rng {
 public:
  struct State {
    std::array<uint64_t, 4> s;
    bool has_spare = false;
    double spare = 0.0;
  };

  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  /// Standard normal via the polar method; draws are produced in pairs and
  /// the second one is cached.
  double normal();
  double normal(double mean, double stddev);

  /// Uniform integer in [0, n), n > 0.
  uint64_t below(uint64_t n);

  const State& state() const { return state_; }
  void set_state(const State& s) { state_ = s; }

 private:
  State state_;
};

}  // namespace stv

#endif  // STV_RNG_HPP_
