#include "pni/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "pni/error.hpp"

namespace pni {

std::vector<double> finite_diff_coords(const ScalarFn& f, const Tensor& x, std::span<const std::size_t> coords,
                                       double h) {
  if (!(h > 0.0)) throw ContractError("finite differences need a positive step");
  std::vector<double> probe(x.data().begin(), x.data().end());
  std::vector<double> out;
  out.reserve(coords.size());
  for (std::size_t i : coords) {
    if (i >= probe.size()) throw IndexError("coordinate " + std::to_string(i) + " outside tensor");
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(Tensor(x.shape(), probe));
    probe[i] = orig - h;
    const double down = f(Tensor(x.shape(), probe));
    probe[i] = orig;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h) {
  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  return Tensor(x.shape(), finite_diff_coords(f, x, coords, h));
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace pni
