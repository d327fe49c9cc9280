#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>

namespace hvae {

// One splitmix64 step; also used to derive per-sample seeds.
std::uint64_t splitmix64(std::uint64_t& state);

// Hash an index into a decorrelated 64-bit value.
inline std::uint64_t splitmix64_at(std::uint64_t index) {
  std::uint64_t s = index;
  return splitmix64(s);
}

// xoshiro256++ with a hand-rolled Box-Muller normal sampler.
// Self-contained so streams are identical across platforms and the
// full state serializes into checkpoints.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed);

  std::uint64_t next_u64();

  // Uniform in [0, 1).
  double uniform01();

  // Uniform in [lo, hi).
  double uniform(double lo, double hi);

  // Integer uniform in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  // Standard normal.
  double normal();

  void save(std::ostream& out) const;
  void load(std::istream& in);

  bool operator==(const Rng& other) const {
    return state_ == other.state_ && have_cached_ == other.have_cached_ &&
           cached_ == other.cached_;
  }

 private:
  std::array<std::uint64_t, 4> state_{};
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace hvae
