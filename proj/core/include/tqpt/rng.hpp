#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>

namespace tqpt {

/// Seeded generator. Pipeline randomness is split into named substreams
/// ("train", "calib-sample", "quantizer-init", ...) derived from one seed, so
/// reseeding one stage leaves the others untouched.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static Rng substream(std::uint64_t seed, std::string_view name);

  std::uint64_t next() { return engine_(); }
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  double uniform();
  float normal(float mean, float stddev);

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tqpt
