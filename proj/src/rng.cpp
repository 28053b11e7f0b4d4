#include "pni/rng.hpp"

#include <cmath>
#include <numbers>

namespace pni {
namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// (0, 1]; never zero so the Box-Muller logarithm stays finite.
double open_unit(std::uint64_t bits) { return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53; }

}  // namespace

std::uint64_t Rng::next_u64() {
  const std::uint64_t key = mix64(seed_ ^ 0xD1B54A32D192ED03ULL);
  return mix64(key + (counter_++ + 1) * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::size_t Rng::index(std::size_t n) { return n <= 1 ? 0 : static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

double Rng::normal() {
  const double u1 = open_unit(next_u64());
  const double u2 = open_unit(next_u64());
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<double> Rng::normals(std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; i += 2) {
    const double r = std::sqrt(-2.0 * std::log(open_unit(next_u64())));
    const double theta = 2.0 * std::numbers::pi * open_unit(next_u64());
    out[i] = r * std::cos(theta);
    if (i + 1 < n) out[i + 1] = r * std::sin(theta);
  }
  return out;
}

Rng Rng::derive(std::uint64_t stream) const {
  return Rng(mix64(seed_ ^ mix64((stream + 1) * kGolden + 0x632BE59BD9B4E019ULL)), 0);
}

Tensor gaussian(Rng& rng, const Shape& shape) { return Tensor(shape, rng.normals(numel(shape))); }

}  // namespace pni
