#pragma once

#include <cstdint>
#include <random>

namespace selat {

/// Owned, seed-derived random stream. `split` derives an independent
/// substream from the parent seed and a stream id without consuming draws
/// from the parent, so workers can be handed reproducible streams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), engine_(make_seed_seq(seed, stream)) {}

  Rng split(std::uint64_t stream_id) const {
    return Rng(seed_, stream_ * 0x9E3779B97F4A7C15ULL + stream_id + 1);
  }

  /// Uniform in [0, 1).
  double uniform() { return std::generate_canonical<double, 53>(engine_); }

  /// Uniform in [-1, 1).
  double symmetric() { return 2.0 * uniform() - 1.0; }

  double normal() { return normal_(engine_); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }
  std::uint64_t seed() const { return seed_; }

 private:
  static std::mt19937_64 make_seed_seq(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace selat
