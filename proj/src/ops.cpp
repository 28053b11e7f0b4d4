#include "pni/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pni/error.hpp"

namespace pni {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void accumulate(const Tensor& target, std::span<const double> g, double factor = 1.0) {
  if (!target.requires_grad()) return;
  auto buf = target.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += factor * g[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::from_op("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    accumulate(self.parents[0], self.grad);
    accumulate(self.parents[1], self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::from_op("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    accumulate(self.parents[0], self.grad);
    accumulate(self.parents[1], self.grad, -1.0);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::from_op("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const Tensor& lhs = self.parents[0];
    const Tensor& rhs = self.parents[1];
    if (lhs.requires_grad()) {
      auto buf = lhs.grad_buffer();
      auto y = rhs.data();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += self.grad[i] * y[i];
    }
    if (rhs.requires_grad()) {
      auto buf = rhs.grad_buffer();
      auto x = lhs.data();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return Tensor::from_op("scale", a.shape(), std::move(out), {a},
                         [factor](detail::Node& self) { accumulate(self.parents[0], self.grad, factor); });
}

Tensor add_constant(const Tensor& a, std::span<const double> offset) {
  if (offset.size() != a.numel()) {
    throw DimensionError("add_constant: " + std::to_string(offset.size()) + " offsets for shape " +
                         to_string(a.shape()));
  }
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + offset[i];
  return Tensor::from_op("add_constant", a.shape(), std::move(out), {a},
                         [](detail::Node& self) { accumulate(self.parents[0], self.grad); });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.dim() < 2 || bias.dim() != 1 || bias.shape()[0] != x.shape()[1]) {
    throw DimensionError("add_bias: cannot broadcast bias " + to_string(bias.shape()) + " over " +
                         to_string(x.shape()));
  }
  const std::size_t n = x.shape()[0], f = x.shape()[1], inner = x.numel() / (n * f);
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < f; ++c)
      for (std::size_t k = 0; k < inner; ++k) out[(i * f + c) * inner + k] += b[c];
  return Tensor::from_op("add_bias", x.shape(), std::move(out), {x, bias}, [n, f, inner](detail::Node& self) {
    accumulate(self.parents[0], self.grad);
    if (self.parents[1].requires_grad()) {
      auto gb = self.parents[1].grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < f; ++c)
          for (std::size_t k = 0; k < inner; ++k) gb[c] += self.grad[(i * f + c) * inner + k];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.shape()[0]);
  const auto k = static_cast<Eigen::Index>(a.shape()[1]);
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return Tensor::from_op("matmul", {a.shape()[0], b.shape()[1]}, std::move(out), {a, b},
                         [m, k, n](detail::Node& self) {
                           const Tensor& lhs = self.parents[0];
                           const Tensor& rhs = self.parents[1];
                           ConstMap g(self.grad.data(), m, n);
                           if (lhs.requires_grad()) {
                             MutMap(lhs.grad_buffer().data(), m, k).noalias() +=
                                 g * ConstMap(rhs.data().data(), k, n).transpose();
                           }
                           if (rhs.requires_grad()) {
                             MutMap(rhs.grad_buffer().data(), k, n).noalias() +=
                                 ConstMap(lhs.data().data(), m, k).transpose() * g;
                           }
                         });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dParams params) {
  if (input.dim() != 4 || kernel.dim() != 4) {
    throw DimensionError("conv2d: expected 4-d input and kernel, got " + to_string(input.shape()) + " and " +
                         to_string(kernel.shape()));
  }
  if (params.stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t n = input.shape()[0], c = input.shape()[1], h = input.shape()[2], w = input.shape()[3];
  const std::size_t f = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
  const std::size_t pad = params.padding, stride = params.stride;
  if (kernel.shape()[1] != c) {
    throw DimensionError("conv2d: kernel " + to_string(kernel.shape()) + " does not match input channels of " +
                         to_string(input.shape()));
  }
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                         to_string(input.shape()) + " with padding " + std::to_string(pad));
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  const std::size_t patch = c * kh * kw, positions = oh * ow, cols_n = n * positions;

  // cols is [patch x (n * positions)], column index = sample * positions + position.
  std::vector<double> cols(patch * cols_n, 0.0);
  auto x = input.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j) {
          const std::size_t row = (ch * kh + i) * kw + j;
          double* dst = cols.data() + row * cols_n + s * positions;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[oy * ow + ox] = x[((s * c + ch) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
            }
          }
        }

  const auto ef = static_cast<Eigen::Index>(f), ep = static_cast<Eigen::Index>(patch),
             ecols = static_cast<Eigen::Index>(cols_n);
  RowMat prod = ConstMap(kernel.data().data(), ef, ep) * ConstMap(cols.data(), ep, ecols);
  std::vector<double> out(n * f * positions);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < f; ++ch)
      std::copy_n(prod.data() + ch * cols_n + s * positions, positions, out.data() + (s * f + ch) * positions);

  auto backward = [=, cols = std::move(cols)](detail::Node& self) {
    const Tensor& in = self.parents[0];
    const Tensor& ker = self.parents[1];
    RowMat g(ef, ecols);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < f; ++ch)
        std::copy_n(self.grad.data() + (s * f + ch) * positions, positions, g.data() + ch * cols_n + s * positions);
    if (ker.requires_grad()) {
      MutMap(ker.grad_buffer().data(), ef, ep).noalias() += g * ConstMap(cols.data(), ep, ecols).transpose();
    }
    if (in.requires_grad()) {
      RowMat dcols = ConstMap(ker.data().data(), ef, ep).transpose() * g;
      auto gi = in.grad_buffer();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const std::size_t row = (ch * kh + i) * kw + j;
              const double* src = dcols.data() + row * cols_n + s * positions;
              for (std::size_t oy = 0; oy < oh; ++oy) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t ox = 0; ox < ow; ++ox) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                  gi[((s * c + ch) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                      src[oy * ow + ox];
                }
              }
            }
    }
  };
  return Tensor::from_op("conv2d", {n, f, oh, ow}, std::move(out), {input, kernel}, std::move(backward));
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 || std::isnan(in[i]) ? in[i] : 0.0;
  return Tensor::from_op("relu", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    const Tensor& p = self.parents[0];
    auto buf = p.grad_buffer();
    auto in = p.data();
    for (std::size_t i = 0; i < buf.size(); ++i)
      if (in[i] > 0.0) buf[i] += self.grad[i];
  });
}

Tensor tanh(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(in[i]);
  return Tensor::from_op("tanh", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto buf = self.parents[0].grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += self.grad[i] * (1.0 - self.data[i] * self.data[i]);
  });
}

Tensor square(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * in[i];
  return Tensor::from_op("square", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    const Tensor& p = self.parents[0];
    auto buf = p.grad_buffer();
    auto in = p.data();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += 2.0 * in[i] * self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return Tensor::from_op("reshape", std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                         [](detail::Node& self) { accumulate(self.parents[0], self.grad); });
}

Tensor flatten(const Tensor& x) {
  const std::size_t n = x.shape()[0];
  return reshape(x, {n, x.numel() / n});
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::from_op("sum", {1}, {total}, {x}, [](detail::Node& self) {
    auto buf = self.parents[0].grad_buffer();
    for (auto& v : buf) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor row_sum(const Tensor& x) {
  const std::size_t n = x.shape()[0], inner = x.numel() / n;
  std::vector<double> out(n, 0.0);
  auto in = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < inner; ++k) out[i] += in[i * inner + k];
  return Tensor::from_op("row_sum", {n}, std::move(out), {x}, [inner](detail::Node& self) {
    auto buf = self.parents[0].grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += self.grad[i / inner];
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2) throw DimensionError("softmax_cross_entropy: logits must be [N x K], got " + to_string(logits.shape()));
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  auto z = logits.data();
  std::vector<double> probs(n * k);
  std::vector<int> targets(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw IndexError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) + " outside [0, " +
                       std::to_string(k) + ")");
    }
    const double* row = z.data() + i * k;
    const double top = *std::max_element(row, row + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - top);
    const double log_denom = std::log(denom);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - top - log_denom);
    total += log_denom - (row[labels[i]] - top);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return Tensor::from_op("softmax_cross_entropy", {1}, {total * inv_n}, {logits},
                         [probs = std::move(probs), targets = std::move(targets), k, inv_n](detail::Node& self) {
                           auto buf = self.parents[0].grad_buffer();
                           const double g = self.grad[0] * inv_n;
                           for (std::size_t i = 0; i < targets.size(); ++i) {
                             for (std::size_t j = 0; j < k; ++j) buf[i * k + j] += g * probs[i * k + j];
                             buf[i * k + static_cast<std::size_t>(targets[i])] -= g;
                           }
                         });
}

Tensor stop_gradient(const Tensor& x) {
  return Tensor::from_op("stop_gradient", x.shape(), std::vector<double>(x.data().begin(), x.data().end()), {},
                         nullptr);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.dim() != 2) throw DimensionError("argmax_rows: expected [N x K], got " + to_string(logits.shape()));
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  std::vector<int> out(n);
  auto z = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (z[i * k + j] > z[i * k + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace pni
