#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "refrec/rng.hpp"
#include "refrec/tensor.hpp"

using namespace refrec;

namespace {

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("elementwise values") {
  Tensor z = Tensor::zeros({2});
  CHECK(to_vec(sigmoid(z).value()) == std::vector<double>{0.5, 0.5});

  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = Tensor::from_data({2}, {3, 4});
  CHECK(to_vec(add(a, b).value()) == std::vector<double>{4, 6});
  CHECK(to_vec(sub(b, a).value()) == std::vector<double>{2, 2});
  CHECK(to_vec(mul(a, b).value()) == std::vector<double>{3, 8});
  CHECK(to_vec(scale(a, -2.0).value()) == std::vector<double>{-2, -4});
  Tensor r = Tensor::from_data({3}, {-1, 0, 2});
  CHECK(to_vec(relu(r).value()) == std::vector<double>{0, 0, 2});
  CHECK(refrec::tanh(z).value()[0] == 0.0);
}

TEST_CASE("elementwise shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  try {
    add(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("sigmoid gradient at zero") {
  Tensor x = Tensor::zeros({2}, /*requires_grad=*/true);
  backward(reduce(sigmoid(x), ReduceMode::kSum));
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("conv2d forward examples") {
  Tensor ones = Tensor::full({1, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
  Tensor bias = Tensor::zeros({1});

  Tensor y = conv2d(ones, k, bias, 1, 0);
  CHECK(y.shape() == Shape{1, 2, 2});
  for (double v : y.value()) CHECK(v == 4.0);

  Tensor y2 = conv2d(ones, k, bias, 2, 0);
  CHECK(y2.shape() == Shape{1, 1, 1});
  CHECK(y2.item() == 4.0);
}

TEST_CASE("conv2d shape law sweep") {
  for (int stride = 1; stride <= 3; ++stride) {
    for (int padding = 0; padding <= 2; ++padding) {
      Tensor in = Tensor::uniform({2, 7, 6}, -1, 1, 11);
      Tensor k = Tensor::uniform({3, 2, 3, 3}, -1, 1, 12);
      Tensor b = Tensor::zeros({3});
      Tensor y = conv2d(in, k, b, stride, padding);
      int oh = (7 + 2 * padding - 3) / stride + 1;
      int ow = (6 + 2 * padding - 3) / stride + 1;
      CHECK(y.shape() == Shape{3, oh, ow});
    }
  }
}

TEST_CASE("conv2d rejects kernel larger than padded input") {
  Tensor in = Tensor::zeros({1, 2, 2});
  Tensor k = Tensor::zeros({1, 1, 3, 3});
  Tensor b = Tensor::zeros({1});
  CHECK_THROWS_AS(conv2d(in, k, b, 1, 0), std::invalid_argument);
  CHECK_NOTHROW(conv2d(in, k, b, 1, 1));
}

TEST_CASE("conv2d gradients match finite differences") {
  Tensor in = Tensor::uniform({2, 5, 5}, -2, 2, 21);
  Tensor k = Tensor::uniform({3, 2, 3, 3}, -2, 2, 22);
  Tensor b = Tensor::uniform({3}, -2, 2, 23);

  auto wrt_input = [&](const Tensor& x) { return reduce(conv2d(x, k, b, 1, 1), ReduceMode::kSum); };
  auto wrt_kernel = [&](const Tensor& x) { return reduce(conv2d(in, x, b, 2, 0), ReduceMode::kSum); };
  auto wrt_bias = [&](const Tensor& x) { return reduce(conv2d(in, k, x, 1, 0), ReduceMode::kSum); };

  CHECK(grad_check(wrt_input, in, 1e-5) <= 1e-4);
  CHECK(grad_check(wrt_kernel, k, 1e-5) <= 1e-4);
  CHECK(grad_check(wrt_bias, b, 1e-5) <= 1e-4);
}

TEST_CASE("pool2d examples") {
  Tensor x = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
  CHECK(pool2d(x, 2, PoolMode::kMax).item() == 4.0);
  CHECK(pool2d(x, 2, PoolMode::kAvg).item() == 2.5);
  CHECK_THROWS_AS(pool2d(Tensor::zeros({1, 3, 3}), 2, PoolMode::kMax), std::invalid_argument);
}

TEST_CASE("max-pool routes gradient to argmax") {
  Tensor x = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4}, /*requires_grad=*/true);
  backward(reduce(pool2d(x, 2, PoolMode::kMax), ReduceMode::kSum));
  CHECK(to_vec(x.grad()) == std::vector<double>{0, 0, 0, 1});
}

TEST_CASE("avg-pool splits gradient uniformly") {
  Tensor x = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4}, /*requires_grad=*/true);
  backward(reduce(pool2d(x, 2, PoolMode::kAvg), ReduceMode::kSum));
  CHECK(to_vec(x.grad()) == std::vector<double>{0.25, 0.25, 0.25, 0.25});
}

TEST_CASE("upsample_nearest replicates and sums back") {
  Tensor x = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4}, /*requires_grad=*/true);
  Tensor y = upsample_nearest(x, 2);
  CHECK(y.shape() == Shape{1, 4, 4});
  CHECK(y.at(0) == 1.0);
  CHECK(y.at(1) == 1.0);
  CHECK(y.at(2) == 2.0);
  CHECK(y.at(5) == 1.0);
  CHECK(y.at(15) == 4.0);

  CHECK(to_vec(upsample_nearest(x, 1).value()) == to_vec(x.value()));

  backward(reduce(y, ReduceMode::kSum));
  CHECK(to_vec(x.grad()) == std::vector<double>{4, 4, 4, 4});
}

TEST_CASE("concat_channels and slice recover inputs bit-exactly") {
  Tensor a = Tensor::uniform({1, 2, 2}, -1, 1, 7, true);
  Tensor b = Tensor::uniform({3, 2, 2}, -1, 1, 8, true);
  Tensor cat = concat_channels({a, b});
  CHECK(cat.shape() == Shape{4, 2, 2});
  CHECK(to_vec(slice_channels(cat, 0, 1).value()) == to_vec(a.value()));
  CHECK(to_vec(slice_channels(cat, 1, 4).value()) == to_vec(b.value()));

  // single input is the identity
  CHECK(to_vec(concat_channels({a}).value()) == to_vec(a.value()));

  // backward splits gradient exactly by channel ranges
  std::vector<double> g(16);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(i) + 1.0;
  Tensor weights = Tensor::from_data({4, 2, 2}, g);
  backward(reduce(mul(cat, weights), ReduceMode::kSum));
  CHECK(to_vec(a.grad()) == std::vector<double>(g.begin(), g.begin() + 4));
  CHECK(to_vec(b.grad()) == std::vector<double>(g.begin() + 4, g.end()));

  CHECK_THROWS_AS(concat_channels({a, Tensor::zeros({1, 3, 3})}), std::invalid_argument);
}

TEST_CASE("broadcast_spatial") {
  Tensor v = Tensor::from_data({2}, {2, 5}, /*requires_grad=*/true);
  Tensor y = broadcast_spatial(v, 2, 2);
  CHECK(y.shape() == Shape{2, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(y.at(i) == 2.0);
  for (int i = 4; i < 8; ++i) CHECK(y.at(i) == 5.0);

  Tensor one = broadcast_spatial(Tensor::from_data({3}, {1, 2, 3}), 1, 1);
  CHECK(one.shape() == Shape{3, 1, 1});
  CHECK(to_vec(one.value()) == std::vector<double>{1, 2, 3});

  backward(reduce(broadcast_spatial(v, 3, 3), ReduceMode::kSum));
  CHECK(to_vec(v.grad()) == std::vector<double>{9, 9});
}

TEST_CASE("reduce") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3});
  CHECK(reduce(x, ReduceMode::kSum).item() == 6.0);
  CHECK(reduce(x, ReduceMode::kMean).item() == 2.0);

  Tensor y = Tensor::full({4}, 1.0, /*requires_grad=*/true);
  backward(reduce(y, ReduceMode::kMean));
  CHECK(to_vec(y.grad()) == std::vector<double>{0.25, 0.25, 0.25, 0.25});
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::from_data({2}, {1, 2}, /*requires_grad=*/true);
  backward(reduce(mul(x, x), ReduceMode::kSum));
  CHECK(to_vec(x.grad()) == std::vector<double>{2, 4});

  // disconnected parameter keeps a zero gradient
  Tensor unused = Tensor::zeros({3}, /*requires_grad=*/true);
  CHECK(to_vec(unused.grad()) == std::vector<double>{0, 0, 0});

  CHECK_THROWS_AS(backward(mul(x, x)), std::invalid_argument);
}

TEST_CASE("backward accumulates; zeroing restores determinism") {
  Tensor x = Tensor::from_data({2}, {1, 2}, /*requires_grad=*/true);
  Tensor loss = reduce(mul(x, x), ReduceMode::kSum);
  backward(loss);
  std::vector<double> first = to_vec(x.grad());
  backward(loss);
  CHECK(to_vec(x.grad()) == std::vector<double>{4, 8});  // += semantics

  x.zero_grad();
  backward(loss);
  CHECK(to_vec(x.grad()) == first);
}

TEST_CASE("grad_check on linear and smooth functions") {
  Tensor x = Tensor::uniform({3, 3}, -2, 2, 31);
  auto linear = [](const Tensor& t) { return reduce(t, ReduceMode::kSum); };
  CHECK(grad_check(linear, x, 1e-5) <= 1e-10);

  auto smooth = [](const Tensor& t) { return reduce(sigmoid(t), ReduceMode::kSum); };
  CHECK(grad_check(smooth, x, 1e-5) <= 1e-6);

  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return mul(t, t); }, x, 1e-5),
                  std::invalid_argument);
  CHECK_THROWS_AS(grad_check(linear, x, 0.0), std::invalid_argument);
}

TEST_CASE("every elementwise op passes grad_check on random inputs") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Tensor x = Tensor::uniform({2, 3}, -2, 2, seed);
    Tensor other = Tensor::uniform({2, 3}, -2, 2, seed + 100);
    auto checks = {
        std::function<Tensor(const Tensor&)>(
            [&](const Tensor& t) { return reduce(mul(add(t, other), sub(t, other)), ReduceMode::kSum); }),
        std::function<Tensor(const Tensor&)>(
            [&](const Tensor& t) { return reduce(refrec::tanh(scale(t, 0.7)), ReduceMode::kMean); }),
        std::function<Tensor(const Tensor&)>(
            [&](const Tensor& t) { return reduce(mul(sigmoid(t), refrec::tanh(t)), ReduceMode::kSum); }),
    };
    for (const auto& f : checks) CHECK(grad_check(f, x, 1e-5) <= 1e-4);
  }
}

TEST_SUITE_END();
