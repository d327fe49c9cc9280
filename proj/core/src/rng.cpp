#include "hvae/rng.hpp"

#include <cmath>
#include <istream>
#include <ostream>

namespace hvae {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {
inline std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}
}  // namespace

void Rng::reseed(std::uint64_t seed) {
  std::uint64_t s = seed;
  for (auto& w : state_) w = splitmix64(s);
  have_cached_ = false;
  cached_ = 0.0;
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform01();
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  // Modulo bias is negligible for the tiny spans used here.
  return lo + static_cast<std::int64_t>(next_u64() % span);
}

double Rng::normal() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  // Box-Muller; 1-u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform01();
  const double u2 = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  cached_ = r * std::sin(theta);
  have_cached_ = true;
  return r * std::cos(theta);
}

void Rng::save(std::ostream& out) const {
  out.write(reinterpret_cast<const char*>(state_.data()), sizeof(state_));
  const std::uint8_t flag = have_cached_ ? 1 : 0;
  out.write(reinterpret_cast<const char*>(&flag), 1);
  out.write(reinterpret_cast<const char*>(&cached_), sizeof(cached_));
}

void Rng::load(std::istream& in) {
  in.read(reinterpret_cast<char*>(state_.data()), sizeof(state_));
  std::uint8_t flag = 0;
  in.read(reinterpret_cast<char*>(&flag), 1);
  have_cached_ = flag != 0;
  in.read(reinterpret_cast<char*>(&cached_), sizeof(cached_));
}

}  // namespace hvae
