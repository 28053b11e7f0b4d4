#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pni/tensor.hpp"

namespace pni {

/// Counter-based random stream: the n-th draw is a pure function of
/// (seed, n), so the whole state is the pair (seed, counter) and streams are
/// reproducible on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer on [0, n).
  std::size_t index(std::size_t n);
  /// Standard normal via Box-Muller; each call consumes one pair of uniforms.
  double normal();
  /// n standard normals using both Box-Muller outputs per pair of uniforms.
  std::vector<double> normals(std::size_t n);

  /// Independent child stream keyed by `stream`; does not advance this one.
  Rng derive(std::uint64_t stream) const;

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[index(i)]);
  }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

/// Tensor of i.i.d. standard normal samples drawn from `rng`.
Tensor gaussian(Rng& rng, const Shape& shape);

}  // namespace pni
