#ifndef MPCMFRL_RNG_HPP_
#define MPCMFRL_RNG_HPP_

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mpcmfrl {

// SplitMix64 finalizer; used to derive independent sub-stream seeds.
inline std::uint64_t MixSeed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded random stream owned by exactly one caller. Sub-streams are derived
// from (seed, tags) so that a computation can be replayed from any point
// without persisting generator state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(MixSeed(seed)) {}

  static Rng Derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t s = MixSeed(seed);
    for (std::uint64_t t : tags) s = MixSeed(s ^ MixSeed(t + 0x632be59bd9b4e019ULL));
    return Rng(s);
  }

  // Child stream; consumes one draw from this stream.
  Rng Split() { return Rng(engine_()); }

  double Uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  double Normal() { return normal_(engine_); }

  // Uniform integer in [0, n).
  std::size_t Index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace mpcmfrl

#endif  // MPCMFRL_RNG_HPP_
