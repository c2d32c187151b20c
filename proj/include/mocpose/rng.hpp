#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>

namespace mocpose {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// xoshiro256++ with splitmix64 seeding. All sampling in the project goes
// through this type so results are identical across platforms; the stdlib
// distributions are implementation-defined and never used.
//
// Streams are split hierarchically: child(tag) derives an independent
// generator from the parent's seed without advancing the parent, so any
// sub-computation (scene, trajectory, chain) is reproducible in isolation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& w : s_) {
      x = splitmix64(x);
      w = x;
    }
    // avoid the all-zero state
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 0x1ull;
  }

  Rng child(std::uint64_t tag) const {
    return Rng(splitmix64(seed_ ^ splitmix64(tag ^ 0xD1B54A32D192ED03ull)));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_index(std::uint64_t n) {
    // rejection-free multiply-shift; bias is < 2^-64 and irrelevant here
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double cauchy(double loc, double scale) {
    double u = uniform();
    if (u == 0.0) u = std::numeric_limits<double>::min();
    return loc + scale * std::tan(std::numbers::pi * (u - 0.5));
  }

  // categorical draw over (possibly unnormalized) nonnegative weights
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("categorical: weights sum to zero");
    double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.size() - 1;
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Fixed tags for the hierarchical seed split.
namespace seed_tag {
inline constexpr std::uint64_t kScene = 0x5343454eull;        // dataset scenes
inline constexpr std::uint64_t kPose = 0x504f5345ull;         // scene poses
inline constexpr std::uint64_t kCorrupt = 0x434f5252ull;      // heatmap corruption
inline constexpr std::uint64_t kObserve = 0x4f425356ull;      // observation render
inline constexpr std::uint64_t kMocFit = 0x4d4f4346ull;       // EM fit sampling
inline constexpr std::uint64_t kTrajectory = 0x5452414aull;   // forward trajectories
inline constexpr std::uint64_t kChain = 0x434e4841ull;        // reverse chains
inline constexpr std::uint64_t kEpoch = 0x45504f43ull;        // training epochs
inline constexpr std::uint64_t kInit = 0x494e4954ull;         // parameter init
inline constexpr std::uint64_t kObject = 0x4f424a43ull;       // synthetic objects
inline constexpr std::uint64_t kRansac = 0x524e5343ull;       // ransac subsets
}  // namespace seed_tag

}  // namespace mocpose
