#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace prat {

// PCG32. Self-contained so that streams are reproducible independent of the
// standard library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0) { reseed(seed, stream); }

  void reseed(uint64_t seed, uint64_t stream = 0) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  uint64_t next_u64() {
    return (static_cast<uint64_t>(next_u32()) << 32) | next_u32();
  }

  // [0, 1)
  double next_double() { return next_u32() * 0x1p-32; }

  float uniform(float lo, float hi) {
    return lo + static_cast<float>(next_double()) * (hi - lo);
  }

  // inclusive bounds, unbiased via rejection
  int uniform_int(int lo, int hi) {
    uint32_t span = static_cast<uint32_t>(hi - lo) + 1u;
    uint32_t limit = UINT32_MAX - UINT32_MAX % span;
    uint32_t v;
    do {
      v = next_u32();
    } while (v >= limit);
    return lo + static_cast<int>(v % span);
  }

  // standard normal, Box-Muller
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = next_double();
    } while (u1 <= 1e-12);
    u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = static_cast<float>(r * std::sin(theta));
    have_spare_ = true;
    return static_cast<float>(r * std::cos(theta));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive a child seed from an ordered list of components (splitmix64 chain).
  // Used to give every (attack, model, record) its own independent stream.
  static uint64_t derive(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (uint64_t p : parts) {
      uint64_t z = h + 0x9e3779b97f4a7c15ULL + p;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      h = z ^ (z >> 31);
    }
    return h;
  }

 private:
  uint64_t state_ = 0;
  uint64_t inc_ = 1;
  float spare_ = 0.f;
  bool have_spare_ = false;
};

}  // namespace prat
