#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace vdvae {

// xoshiro256** with splitmix64 seeding. Hand-rolled so that streams are
// reproducible across platforms and the full state is serializable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t x = seed;
    for (auto& word : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      word = z ^ (z >> 31);
    }
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1]; safe to take log of.
  double uniform_pos() { return double((next_u64() >> 11) + 1) * 0x1.0p-53; }

  // Uniform in (0, 1); safe for logit transforms on both ends.
  double uniform_open() { return (double(next_u64() >> 12) + 0.5) * 0x1.0p-52; }

  // Standard normal via Box-Muller. No caching: every call consumes exactly
  // two words of the stream, which keeps replay trivial.
  double normal() {
    double u1 = uniform_pos();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double gumbel() { return -std::log(-std::log(uniform_open())); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  std::array<std::uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

 private:
  static std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }
  std::array<std::uint64_t, 4> state_{};
};

}  // namespace vdvae
