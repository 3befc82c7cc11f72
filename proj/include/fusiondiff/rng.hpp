#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fusiondiff {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream key from a seed and a list of counters
// (e.g. {purpose, step, sample}). Same keys -> same stream regardless of
// how work is scheduled across threads.
inline uint64_t stream_key(uint64_t seed, std::initializer_list<uint64_t> counters) {
  uint64_t h = splitmix64(seed);
  for (uint64_t c : counters) h = splitmix64(h ^ splitmix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

// Counter-seeded generator with the few draws the project needs.
class Rng {
 public:
  explicit Rng(uint64_t key) : engine_(key) {}
  Rng(uint64_t seed, std::initializer_list<uint64_t> counters) : engine_(stream_key(seed, counters)) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  bool bernoulli(double p) { return uniform() < p; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace fusiondiff
