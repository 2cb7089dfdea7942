// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "pixelpost/tensor.hpp"

namespace pixelpost {

// xoshiro256** with splitmix64 seeding. std::mt19937 + std::normal_distribution
// would leave draw sequences implementation-defined; everything downstream
// (corpus bytes, training trajectories, resume checks) depends on the stream
// being identical across standard libraries, so the generator is spelled out
// here. State is four words, which keeps checkpointed RNG state trivial.
class Rng {
 public:
  Rng() : Rng(0) {}

  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : state_) w = splitmix64(x);
  }

  // Stable sub-stream derivation: one generator per (seed, purpose, index)
  // triple makes per-sample work order-independent.
  static Rng derive(uint64_t seed, uint64_t purpose, uint64_t index) {
    uint64_t x = seed;
    x = splitmix64(x) ^ (purpose * 0x9e3779b97f4a7c15ULL);
    x = splitmix64(x) ^ (index * 0xbf58476d1ce4e5b9ULL);
    return Rng(splitmix64(x));
  }

  uint64_t next_u64() {
    uint64_t* s = state_.data();
    const uint64_t result = rotl(s[1] * 5, 7) * 9;
    const uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  // Uniform in [0, 1): 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Modulo bias is < n / 2^64, far below anything
  // observable here, and the draw count per call stays fixed.
  uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller, cosine branch only. The sine mate is
  // discarded deliberately: a cached second draw would smuggle hidden state
  // past checkpoint save/restore.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  void fill_normal(Tensor& t) {
    for (auto& v : t.data) v = static_cast<float>(normal());
  }

  Tensor normal_tensor(std::vector<int> shape) {
    Tensor t(std::move(shape));
    fill_normal(t);
    return t;
  }

  std::array<uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

  std::string state_hex() const;
  static Rng from_state_hex(const std::string& hex);

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::array<uint64_t, 4> state_{};
};

}  // namespace pixelpost
