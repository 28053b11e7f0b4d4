#include <doctest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <string>

#include "pni/error.hpp"
#include "pni/gradcheck.hpp"
#include "pni/model.hpp"
#include "pni/ops.hpp"
#include "pni/rng.hpp"
#include "support.hpp"

using namespace pni;
using pni::testing::analytic_grad;
using pni::testing::numeric_grad;
using pni::testing::random_tensor;
using pni::testing::uniform_values;
using pni::testing::weighted_sum;

TEST_CASE("tensor rejects inconsistent shape and data") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor({0}, {}), DimensionError);
}

TEST_CASE("matmul") {
  SUBCASE("identity") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {1, 2, 3, 4});
    Tensor out = matmul(eye, m);
    CHECK(std::vector<double>(out.data().begin(), out.data().end()) == std::vector<double>{1, 2, 3, 4});
  }
  SUBCASE("basis vector selection") {
    Tensor out = matmul(Tensor({1, 2}, {1, 0}), Tensor({2, 1}, {2, 3}));
    CHECK(out.shape() == Shape{1, 1});
    CHECK(out.item() == 2.0);
  }
  SUBCASE("shape mismatch names both shapes") {
    try {
      matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
    }
  }
  SUBCASE("gradient of sum(a*b) w.r.t. a") {
    Rng rng(11);
    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {4, 5});
    auto f = [&](const Tensor& x) { return sum(matmul(x, b)); };
    const auto analytic = analytic_grad(f, a);
    const auto numeric = numeric_grad(f, a);
    CHECK(max_relative_error(analytic, numeric) < 1e-6);
    // d/da_ik = sum_j b_kj, the same for every row i.
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 4; ++k) {
        double row = 0;
        for (std::size_t j = 0; j < 5; ++j) row += b.at(k * 5 + j);
        CHECK(analytic[i * 4 + k] == doctest::Approx(row).epsilon(1e-12));
      }
  }
}

TEST_CASE("conv2d") {
  SUBCASE("all ones sums the window") {
    Tensor out = conv2d(Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0));
    CHECK(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out.item() == 9.0);
  }
  SUBCASE("zero kernel") {
    Rng rng(3);
    Tensor out = conv2d(random_tensor(rng, {2, 3, 5, 5}), Tensor::zeros({4, 3, 3, 3}), {1, 1});
    CHECK(out.shape() == Shape{2, 4, 5, 5});
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("output extent follows floor((H + 2p - k) / s) + 1") {
    Tensor out = conv2d(Tensor::zeros({1, 1, 7, 6}), Tensor::zeros({2, 1, 3, 3}), {2, 1});
    CHECK(out.shape() == Shape{1, 2, 4, 3});
  }
  SUBCASE("kernel larger than padded input") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), {1, 1}), DimensionError);
    CHECK_NOTHROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 4, 4}), {1, 1}));
  }
  SUBCASE("kernel gradient on a random 1x1x4x4 instance") {
    Rng rng(5);
    Tensor input = random_tensor(rng, {1, 1, 4, 4});
    Tensor kernel = random_tensor(rng, {1, 1, 3, 3});
    auto f = [&](const Tensor& k) { return sum(conv2d(input, k)); };
    CHECK(max_relative_error(analytic_grad(f, kernel), numeric_grad(f, kernel)) < 1e-6);
  }
  SUBCASE("input and kernel gradients with stride and padding") {
    Rng rng(6);
    Tensor input = random_tensor(rng, {2, 2, 5, 5});
    Tensor kernel = random_tensor(rng, {3, 2, 3, 3});
    const auto probe = rng.normals(2 * 3 * 3 * 3);
    auto fk = [&](const Tensor& k) { return weighted_sum(conv2d(input, k, {2, 1}), probe); };
    auto fx = [&](const Tensor& x) { return weighted_sum(conv2d(x, kernel, {2, 1}), probe); };
    CHECK(max_relative_error(analytic_grad(fk, kernel), numeric_grad(fk, kernel)) < 1e-6);
    CHECK(max_relative_error(analytic_grad(fx, input), numeric_grad(fx, input)) < 1e-6);
  }
}

TEST_CASE("relu and softmax cross entropy") {
  Tensor r = relu(Tensor({3}, {-1, 0, 2}));
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{0, 0, 2});

  const std::vector<int> zero{0}, one{1};
  CHECK(softmax_cross_entropy(Tensor({1, 2}, {0, 0}), zero).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(softmax_cross_entropy(Tensor({1, 2}, {0, 0}), one).item() == doctest::Approx(0.6931471805599453));
  // -log(e^2 / (e^2 + 1)) = log(1 + e^-2)
  CHECK(softmax_cross_entropy(Tensor({1, 2}, {2, 0}), zero).item() ==
        doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-14));
  CHECK(std::log1p(std::exp(-2.0)) == doctest::Approx(0.1269).epsilon(1e-3));

  CHECK_THROWS_AS(softmax_cross_entropy(Tensor({1, 2}, {0, 0}), std::vector<int>{2}), IndexError);
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor({1, 2}, {0, 0}), std::vector<int>{-1}), IndexError);
}

TEST_CASE("softmax cross entropy is shift invariant") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor logits = random_tensor(rng, {4, 6}, 3.0);
    std::vector<int> labels(4);
    for (auto& l : labels) l = static_cast<int>(rng.index(6));
    const double c = (rng.uniform() - 0.5) * 40.0;
    std::vector<double> shifted(logits.data().begin(), logits.data().end());
    for (auto& v : shifted) v += c;
    CHECK(std::abs(softmax_cross_entropy(logits, labels).item() -
                   softmax_cross_entropy(Tensor({4, 6}, shifted), labels).item()) < 1e-12);
  }
}

TEST_CASE("backward") {
  SUBCASE("sum gives ones") {
    Tensor x = Tensor({2, 3}, {1, -2, 3, 0, 5, 6}, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("quadratic") {
    Tensor x = Tensor({2}, {1, 2}, true);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
  }
  SUBCASE("non-scalar loss") {
    Tensor x = Tensor({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
  }
  SUBCASE("reused tensor accumulates both paths") {
    Tensor x = Tensor({3}, {1, 2, 3}, true);
    backward(sum(add(x, x)));
    for (double g : x.grad()) CHECK(g == 2.0);
  }
  SUBCASE("leaf gradients accumulate across passes") {
    Tensor x = Tensor({1}, {3}, true);
    backward(square(x));
    backward(square(x));
    CHECK(x.grad()[0] == 12.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }
  SUBCASE("every reachable requires_grad tensor gets a grad") {
    Tensor x = Tensor({2}, {1, -1}, true);
    Tensor hidden = relu(x);
    Tensor loss = sum(hidden);
    backward(loss);
    CHECK(hidden.has_grad());
    CHECK(x.has_grad());
  }
  SUBCASE("stop_gradient blocks the path") {
    Tensor x = Tensor({2}, {1, 2}, true);
    backward(sum(add(mul(x, stop_gradient(x)), x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 3.0);
  }
  SUBCASE("graph lists inputs before their consumers") {
    Tensor x = Tensor({2}, {1, 2}, true);
    Tensor loss = sum(relu(scale(x, 2.0)));
    const auto ops = Graph(loss).op_names();
    CHECK(ops == std::vector<std::string>{"leaf", "scale", "relu", "sum"});
  }
  SUBCASE("op outputs cannot be mutated in place") {
    Tensor x = Tensor({2}, {1, 2}, true);
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(y.mutable_data(), ContractError);
    CHECK_NOTHROW(x.mutable_data());
  }
}

TEST_CASE("every primitive matches finite differences on random instances") {
  Rng rng(1234);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {3, 4});
    Tensor w = random_tensor(rng, {4, 2});
    Tensor bias = random_tensor(rng, {4});
    Tensor img = random_tensor(rng, {2, 4, 3, 3});
    const auto p12 = rng.normals(12), p6 = rng.normals(6), p3 = rng.normals(3), p72 = rng.normals(72);
    std::vector<int> labels{static_cast<int>(rng.index(4)), static_cast<int>(rng.index(4)),
                            static_cast<int>(rng.index(4))};

    const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>> cases = {
        {"add", [&](const Tensor& x) { return weighted_sum(add(x, b), p12); }},
        {"sub", [&](const Tensor& x) { return weighted_sum(sub(b, x), p12); }},
        {"mul", [&](const Tensor& x) { return weighted_sum(mul(x, b), p12); }},
        {"scale", [&](const Tensor& x) { return weighted_sum(scale(x, -1.7), p12); }},
        {"add_bias", [&](const Tensor& x) { return weighted_sum(add_bias(x, bias), p12); }},
        {"add_bias/bias", [&](const Tensor& x) {
           return weighted_sum(add_bias(b, reshape(matmul(Tensor::full({1, 3}, 1.0), x), {4})), p12);
         }},
        {"matmul", [&](const Tensor& x) { return weighted_sum(matmul(x, w), p6); }},
        {"relu", [&](const Tensor& x) { return weighted_sum(relu(x), p12); }},
        {"tanh", [&](const Tensor& x) { return weighted_sum(tanh(x), p12); }},
        {"square", [&](const Tensor& x) { return weighted_sum(square(x), p12); }},
        {"reshape", [&](const Tensor& x) { return weighted_sum(reshape(x, {4, 3}), p12); }},
        {"row_sum", [&](const Tensor& x) { return weighted_sum(row_sum(x), p3); }},
        {"mean", [&](const Tensor& x) { return scale(mean(x), 3.0); }},
        {"cross_entropy", [&](const Tensor& x) { return softmax_cross_entropy(x, labels); }},
        {"conv2d", [&](const Tensor& x) {
           return weighted_sum(conv2d(img, reshape(x, {1, 4, 1, 3}), {1, 0}), std::vector<double>(p72.begin(), p72.begin() + 6));
         }},
    };
    for (const auto& [name, f] : cases) {
      CAPTURE(name);
      CHECK(max_relative_error(analytic_grad(f, a), numeric_grad(f, a), 1e-7) < 1e-4);
    }
  }
}

TEST_CASE("random two-layer MLP gradients match finite differences") {
  Rng rng(99);
  const ModelSpec spec = ModelSpec::mlp(5, {7}, 3);
  for (int trial = 0; trial < 5; ++trial) {
    Model model = Model::create(spec, 100 + trial);
    Tensor x = random_tensor(rng, {4, 5});
    const std::vector<int> labels{0, 2, 1, 2};
    NoiseContext off = NoiseContext::off();
    model.zero_grad();
    backward(softmax_cross_entropy(model.forward(x, off), labels));
    for (auto& p : model.parameters()) {
      CAPTURE(p.name);
      const std::vector<double> analytic(p.value.grad().begin(), p.value.grad().end());
      std::vector<double> original(p.value.data().begin(), p.value.data().end());
      Tensor numeric = finite_diff_grad(
          [&](const Tensor& probe) {
            std::copy(probe.data().begin(), probe.data().end(), p.value.mutable_data().begin());
            NoiseContext ctx = NoiseContext::off();
            const double loss = softmax_cross_entropy(model.forward(x, ctx), labels).item();
            std::copy(original.begin(), original.end(), p.value.mutable_data().begin());
            return loss;
          },
          p.value.detach());
      CHECK(max_relative_error(analytic, numeric.data(), 1e-7) < 1e-4);
    }
  }
}

TEST_CASE("gaussian sampling") {
  SUBCASE("same seed, same stream") {
    Rng r1(42), r2(42);
    Tensor a = gaussian(r1, {4, 5});
    Tensor b = gaussian(r2, {4, 5});
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    CHECK(r1 == r2);
  }
  SUBCASE("different seeds differ") {
    Rng r1(1), r2(2);
    CHECK(gaussian(r1, {8}).at(0) != gaussian(r2, {8}).at(0));
  }
  SUBCASE("moments of 1e6 samples") {
    Rng rng(7);
    const auto v = rng.normals(1'000'000);
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    s /= static_cast<double>(v.size());
    CHECK(std::abs(m) < 0.01);
    CHECK(std::abs(s - 1.0) < 0.01);
  }
  SUBCASE("derived streams are independent of the parent position") {
    Rng parent(5);
    Rng child_before = parent.derive(3);
    parent.normals(10);
    CHECK(parent.derive(3) == child_before);
    CHECK(parent.derive(3).next_u64() != parent.derive(4).next_u64());
  }
  SUBCASE("golden values for seed 0") {
    std::ifstream in(std::string(PNI_FIXTURE_DIR) + "/rng_golden.json");
    REQUIRE(in.good());
    const auto golden = nlohmann::json::parse(in);
    Rng rng(golden.at("seed").get<std::uint64_t>());
    const auto expected = golden.at("normals").get<std::vector<double>>();
    const auto got = rng.normals(expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(got[i] == expected[i]);
    Rng u(0);
    CHECK(u.next_u64() == golden.at("first_u64").get<std::uint64_t>());
  }
}

TEST_CASE("finite differences") {
  Tensor g = finite_diff_grad([](const Tensor& x) { return sum(x).item(); }, Tensor({3}, {0.3, -2, 7}));
  for (double v : g.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));

  Tensor q = finite_diff_grad([](const Tensor& x) { return x.item() * x.item(); }, Tensor::scalar(3.0), 1e-5);
  CHECK(std::abs(q.item() - 6.0) < 1e-8);

  CHECK_THROWS_AS(finite_diff_grad([](const Tensor& x) { return x.item(); }, Tensor::scalar(1.0), 0.0), ContractError);

  Rng rng(8);
  const auto vals = uniform_values(rng, 4, -1, 1);
  Tensor x({4}, vals);
  auto f = [](const Tensor& t) { return sum(tanh(square(t))); };
  CHECK(max_relative_error(analytic_grad(f, x), numeric_grad(f, x)) < 1e-8);
}
