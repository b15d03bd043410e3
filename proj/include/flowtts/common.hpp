#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace flowtts {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

// Counters for degenerate-but-tolerated numeric events (zero-norm cosine,
// clamped durations). Tests read these; they are never fatal.
struct EventCounters {
  static std::atomic<uint64_t>& degenerate_cosine() {
    static std::atomic<uint64_t> c{0};
    return c;
  }
  static std::atomic<uint64_t>& clamped_duration() {
    static std::atomic<uint64_t> c{0};
    return c;
  }
  static std::atomic<uint64_t>& singleton_speaker_fallback() {
    static std::atomic<uint64_t> c{0};
    return c;
  }
};

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
  uint64_t s = seed ^ (tag * 0x9e3779b97f4a7c15ULL + 0x165667b19e3779f9ULL);
  return splitmix64(s);
}

// xoshiro256++ with splitmix64 seeding. All randomness in the project flows
// through this so runs are reproducible independent of the standard library.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  int64_t uniform_int(int64_t n) {
    return int64_t(uniform() * double(n)) % n;
  }

  // integer in [lo, hi] inclusive
  int64_t uniform_range(int64_t lo, int64_t hi) {
    return lo + uniform_int(hi - lo + 1);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    // Box-Muller, one value per two uniforms; deterministic and simple.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Independent derived stream; deterministic in (current seed, tag).
  Rng fork(uint64_t tag) const {
    uint64_t h = 0x243f6a8885a308d3ULL;
    for (auto w : s_) h = mix_seed(h, w);
    return Rng(mix_seed(h, tag));
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4];
};

// Index-parallel loop with deterministic output placement: the caller writes
// results by index, so thread scheduling never changes observable state.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& body,
                         int max_threads = 0) {
  int hw = int(std::thread::hardware_concurrency());
  int nt = max_threads > 0 ? max_threads : (hw > 0 ? hw : 1);
  if (nt <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (int t = 0; t < nt; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        int64_t i = next.fetch_add(1);
        if (i >= n) return;
        body(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace flowtts
