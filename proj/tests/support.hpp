#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "pni/gradcheck.hpp"
#include "pni/ops.hpp"
#include "pni/rng.hpp"
#include "pni/tensor.hpp"

namespace pni::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0, bool requires_grad = false) {
  auto v = rng.normals(numel(shape));
  for (auto& x : v) x *= scale;
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> uniform_values(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return v;
}

/// sum(out * weights): a scalar probe that exercises every output element.
inline Tensor weighted_sum(const Tensor& out, const std::vector<double>& weights) {
  return sum(mul(out, Tensor(out.shape(), weights)));
}

/// Analytic gradient of f at x through backward().
inline std::vector<double> analytic_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  Tensor leaf = x.detach(true);
  backward(f(leaf));
  return {leaf.grad().begin(), leaf.grad().end()};
}

inline std::vector<double> numeric_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        double h = 1e-5) {
  Tensor g = finite_diff_grad([&](const Tensor& probe) { return f(probe).item(); }, x, h);
  return {g.data().begin(), g.data().end()};
}

}  // namespace pni::testing
