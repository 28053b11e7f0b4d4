#include <doctest.h>

#include <cmath>

#include "pni/error.hpp"
#include "pni/gradcheck.hpp"
#include "pni/model.hpp"
#include "pni/noise.hpp"
#include "pni/ops.hpp"
#include "support.hpp"

using namespace pni;
using pni::testing::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

LinearView dense_view(const Tensor& w, const Tensor& b) {
  return {"fc0", w, b, [](const Tensor& x, const Tensor& weight) { return matmul(x, weight); }};
}

}  // namespace

TEST_CASE("tensor_std is the population standard deviation") {
  CHECK(tensor_std(std::vector<double>{1, -1}) == 1.0);
  CHECK(tensor_std(std::vector<double>{4.5, 4.5, 4.5}) == 0.0);
  CHECK(tensor_std(std::vector<double>{1, 2, 3}) == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-15));
  CHECK(tensor_std(std::vector<double>{1, 2, 3}) == doctest::Approx(0.81650).epsilon(1e-5));
  CHECK(tensor_std(std::vector<double>{-3.0}) == 0.0);
}

TEST_CASE("pni_forward") {
  Rng rng(4);
  Tensor v = random_tensor(rng, {3, 4});

  SUBCASE("zero coefficient leaves the tensor unchanged") {
    PniCoefficient c = PniCoefficient::make("l", 0.0);
    Rng r(1);
    CHECK(values(pni_forward(v, c, r, true).value) == values(v));
  }
  SUBCASE("disabled path") {
    PniCoefficient c = PniCoefficient::make("l");
    Rng r(1);
    NoisyTensor out = pni_forward(v, c, r, false);
    CHECK(values(out.value) == values(v));
    for (double e : out.eta.data()) CHECK(e == 0.0);
    CHECK(r.counter() == 0);
  }
  SUBCASE("eta is sigma times the unit draws") {
    Tensor alpha = Tensor::scalar(0.25, true);
    NoisyTensor out = pni_forward_from_draws(Tensor({2}, {2, -2}), alpha, std::vector<double>{0.5, -1.0});
    CHECK(values(out.eta) == std::vector<double>{1.0, -2.0});
    CHECK(values(out.value) == std::vector<double>{2.25, -2.5});
  }
  SUBCASE("fresh eta on every call") {
    PniCoefficient c = PniCoefficient::make("l");
    Rng r(9);
    CHECK(values(pni_forward(v, c, r, true).eta) != values(pni_forward(v, c, r, true).eta));
  }
  SUBCASE("sampled noise has the tensor's spread") {
    Rng r(10);
    Tensor big = random_tensor(r, {200, 100}, 3.0);
    NoisyTensor out = pni_forward(big, PniCoefficient::make("l"), r, true);
    CHECK(tensor_std(out.eta) == doctest::Approx(tensor_std(big)).epsilon(0.02));
  }
}

TEST_CASE("pni_backward") {
  CHECK(pni_backward(std::vector<double>{1, 1}, std::vector<double>{0.5, -0.5}).grad_alpha == 0.0);
  const PniGradient g = pni_backward(std::vector<double>{2, 0}, std::vector<double>{0.5, -0.5});
  CHECK(g.grad_alpha == 1.0);
  CHECK(g.grad_v == std::vector<double>{2, 0});
  CHECK_THROWS_AS(pni_backward(std::vector<double>{1}, std::vector<double>{1, 2}), DimensionError);
}

TEST_CASE("grad_alpha matches finite differences with frozen noise") {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor(rng, {5, 6});
    Tensor w = random_tensor(rng, {6, 3});
    Tensor b = random_tensor(rng, {3});
    const std::vector<int> labels{0, 1, 2, 1, 0};
    const auto draws = rng.normals(w.numel());
    auto loss_at = [&](const Tensor& alpha) {
      NoisyTensor noisy = pni_forward_from_draws(w, alpha, draws);
      return softmax_cross_entropy(relu(add_bias(matmul(x, noisy.value), b)), labels);
    };
    Tensor alpha = Tensor::scalar(0.1 + rng.uniform(), true);
    backward(loss_at(alpha));
    const double numeric =
        finite_diff_grad([&](const Tensor& a) { return loss_at(a).item(); }, alpha.detach()).item();
    CHECK(max_relative_error(alpha.grad(), std::vector<double>{numeric}, 1e-8) < 1e-4);
  }
}

TEST_CASE("grad_alpha is additive over slices of the tensor") {
  Rng rng(5);
  const auto up = rng.normals(12), eta = rng.normals(12);
  const double whole = pni_backward(up, eta).grad_alpha;
  double parts = 0.0;
  for (std::size_t s = 0; s < 12; s += 4) {
    parts += pni_backward(std::span(up).subspan(s, 4), std::span(eta).subspan(s, 4)).grad_alpha;
  }
  CHECK(whole == doctest::Approx(parts).epsilon(1e-14));
}

TEST_CASE("negating alpha and eta together leaves the forward output unchanged") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor v = random_tensor(rng, {4, 4});
    auto draws = rng.normals(16);
    std::vector<double> neg(draws);
    for (auto& d : neg) d = -d;
    const double a = rng.uniform();
    NoisyTensor pos = pni_forward_from_draws(v, Tensor::scalar(a), draws);
    NoisyTensor flipped = pni_forward_from_draws(v, Tensor::scalar(-a), neg);
    CHECK(values(pos.value) == values(flipped.value));
  }
}

TEST_CASE("alpha_update follows the momentum recursion without weight decay") {
  SUBCASE("single step") {
    PniCoefficient c = PniCoefficient::make("l");
    alpha_update(c, 1.0, 0.0, 0.1);
    CHECK(c.value() == doctest::Approx(0.15).epsilon(1e-15));
    CHECK(c.velocity == 1.0);
  }
  SUBCASE("fixed point") {
    PniCoefficient c = PniCoefficient::make("l");
    alpha_update(c, 0.0, 0.9, 0.1);
    CHECK(c.value() == 0.25);
  }
  SUBCASE("two steps with momentum") {
    PniCoefficient c = PniCoefficient::make("l");
    alpha_update(c, 1.0, 0.9, 0.1);
    CHECK(c.velocity == 1.0);
    CHECK(c.value() == doctest::Approx(0.15).epsilon(1e-15));
    alpha_update(c, 0.0, 0.9, 0.1);
    CHECK(c.velocity == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(c.value() == doctest::Approx(0.06).epsilon(1e-14));
  }
  SUBCASE("optional gradient clip") {
    PniCoefficient c = PniCoefficient::make("l");
    alpha_update(c, 50.0, 0.0, 0.1, 1.0);
    CHECK(c.velocity == 1.0);
  }
  CHECK(PniCoefficient::kDefaultAlpha == 0.25);
}

TEST_CASE("placement parsing") {
  for (Placement p : {Placement::None, Placement::W, Placement::I, Placement::A_a, Placement::A_b,
                      Placement::W_plus_A_a, Placement::W_plus_A_b}) {
    CHECK(parse_placement(to_string(p)) == p);
  }
  CHECK(parse_placement("pni-w+a-a") == Placement::W_plus_A_a);
  CHECK(parse_placement("A_b") == Placement::A_b);
  CHECK_THROWS_AS(parse_placement("X"), ConfigError);
}

TEST_CASE("apply_placement") {
  Rng rng(12);
  Tensor x = random_tensor(rng, {3, 4});
  Tensor w = random_tensor(rng, {4, 2});
  Tensor b = random_tensor(rng, {2});
  const LinearView layer = dense_view(w, b);
  const Tensor plain = add_bias(matmul(x, w), b);

  SUBCASE("none is the plain layer") {
    NoiseContext ctx = NoiseContext::sampling(Rng(1));
    CHECK(values(apply_placement(layer, x, Placement::None, true, {}, ctx)) == values(plain));
  }
  SUBCASE("zero-coefficient PNI-W equals the plain layer") {
    PniCoefficient zero = PniCoefficient::make("fc0.w", 0.0);
    for (int i = 0; i < 5; ++i) {
      Tensor xi = random_tensor(rng, {3, 4});
      NoiseContext ctx = NoiseContext::sampling(Rng(i));
      CHECK(values(apply_placement(layer, xi, Placement::W, true, {&zero, nullptr}, ctx)) ==
            values(add_bias(matmul(xi, w), b)));
    }
  }
  SUBCASE("disabled noise equals the plain layer for every placement") {
    PniCoefficient cw = PniCoefficient::make("fc0.w"), ca = PniCoefficient::make("fc0.a");
    for (Placement p : {Placement::W, Placement::I, Placement::A_a, Placement::A_b, Placement::W_plus_A_a,
                        Placement::W_plus_A_b}) {
      NoiseContext off = NoiseContext::off();
      CHECK(values(apply_placement(layer, x, p, true, {&cw, &ca}, off)) == values(plain));
    }
  }
  SUBCASE("A-b on the first layer reproduces I") {
    PniCoefficient ca = PniCoefficient::make("fc0.a");
    NoiseContext c1 = NoiseContext::sampling(Rng(5)), c2 = NoiseContext::sampling(Rng(5));
    CHECK(values(apply_placement(layer, x, Placement::A_b, true, {nullptr, &ca}, c1)) ==
          values(apply_placement(layer, x, Placement::I, true, {nullptr, &ca}, c2)));
  }
  SUBCASE("I away from the input is rejected") {
    PniCoefficient ca = PniCoefficient::make("fc0.a");
    NoiseContext ctx = NoiseContext::sampling(Rng(1));
    CHECK_THROWS_AS(apply_placement(layer, x, Placement::I, false, {nullptr, &ca}, ctx), ConfigError);
  }
  SUBCASE("A-a perturbs the output, W the weights") {
    PniCoefficient cw = PniCoefficient::make("fc0.w"), ca = PniCoefficient::make("fc0.a");
    NoiseContext rec = NoiseContext::recording(Rng(3));
    Tensor out = apply_placement(layer, x, Placement::W_plus_A_a, true, {&cw, &ca}, rec);
    const auto& eta_w = rec.recorded().at("fc0.w").at(0);
    const auto& eta_a = rec.recorded().at("fc0.a").at(0);
    std::vector<double> wn(w.data().begin(), w.data().end());
    for (std::size_t i = 0; i < wn.size(); ++i) wn[i] += 0.25 * eta_w[i];
    Tensor expected = add_bias(matmul(x, Tensor(w.shape(), wn)), b);
    for (std::size_t i = 0; i < out.numel(); ++i) {
      CHECK(out.at(i) == doctest::Approx(expected.at(i) + 0.25 * eta_a[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("noise contexts") {
  const ModelSpec spec = ModelSpec::mlp(4, {6}, 3, Placement::W_plus_A_a);
  Model model = Model::create(spec, 1);
  CHECK(model.coefficients().size() == 4);
  Rng rng(2);
  Tensor x = random_tensor(rng, {5, 4});

  SUBCASE("sampling draws fresh noise per forward") {
    NoiseContext ctx = NoiseContext::sampling(Rng(8));
    CHECK(values(model.forward(x, ctx)) != values(model.forward(x, ctx)));
  }
  SUBCASE("replay reproduces a recorded forward") {
    NoiseContext rec = NoiseContext::recording(Rng(8));
    Tensor first = model.forward(x, rec);
    NoiseContext replay = rec.replaying();
    CHECK(values(model.forward(x, replay)) == values(first));
    CHECK_THROWS_AS(model.forward(x, replay), ContractError);
    replay.rewind();
    CHECK_NOTHROW(model.forward(x, replay));
  }
  SUBCASE("noise off matches zero coefficients bit for bit") {
    Model zeroed = model.clone();
    for (auto& c : zeroed.coefficients()) c.set_value(0.0);
    NoiseContext off = NoiseContext::off();
    NoiseContext sampled = NoiseContext::sampling(Rng(4));
    CHECK(values(model.forward(x, off)) == values(zeroed.forward(x, sampled)));
  }
  SUBCASE("one coefficient per noise site") {
    const Model w_only = Model::create(ModelSpec::mlp(4, {6, 5}, 3, Placement::W), 1);
    CHECK(w_only.coefficients().size() == 3);
    for (const auto& c : w_only.coefficients()) CHECK(c.value() == 0.25);
    const Model input_only = Model::create(ModelSpec::mlp(4, {6}, 3, Placement::I), 1);
    CHECK(input_only.coefficients().size() == 1);
    CHECK(input_only.coefficients()[0].layer_id == "fc0.a");
  }
}
