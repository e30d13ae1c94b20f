#ifndef RPG_RNG_HPP_
#define RPG_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace rpg {

// SplitMix64 finalizer. Used to derive independent stream seeds from
// (seed, stream index) pairs so that trials and env workers never share state.
constexpr uint64_t MixSeed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr uint64_t DeriveSeed(uint64_t seed, uint64_t stream) {
  return MixSeed(MixSeed(seed) ^ MixSeed(stream + 0x632be59bd9b4e019ULL));
}

// Thin wrapper over mt19937_64. The distributions are written out by hand
// because the std:: ones are implementation-defined and we want identical
// streams across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(MixSeed(seed)) {}
  Rng(uint64_t seed, uint64_t stream) : engine_(DeriveSeed(seed, stream)) {}

  uint64_t NextU64() { return engine_(); }

  // Uniform on [0, 1).
  double Uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  int UniformInt(int n) {
    const uint64_t bound = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<int>(x % bound);
  }

  bool Bernoulli(double p) { return Uniform() < p; }

  // Box-Muller; one value per call keeps the stream position simple.
  double Normal() {
    double u1 = Uniform();
    while (u1 <= 0.0) u1 = Uniform();
    const double u2 = Uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Samples an index from unnormalized probabilities.
  int Categorical(std::span<const double> probs) {
    double total = 0.0;
    for (double p : probs) total += p;
    double u = Uniform() * total;
    for (size_t i = 0; i < probs.size(); ++i) {
      u -= probs[i];
      if (u < 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  std::string SerializeState() const;
  void RestoreState(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace rpg

#endif  // RPG_RNG_HPP_
