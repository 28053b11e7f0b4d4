#pragma once

#include <functional>
#include <span>

#include "pni/tensor.hpp"

namespace pni {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every
/// coordinate of x. `f` receives fresh leaf tensors and must not keep them.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h = 1e-5);

/// Central differences restricted to the listed coordinates.
std::vector<double> finite_diff_coords(const ScalarFn& f, const Tensor& x, std::span<const std::size_t> coords,
                                       double h);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8);

}  // namespace pni
