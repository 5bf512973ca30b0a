#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pgsgan/error.hpp"
#include "pgsgan/kernels.hpp"
#include "pgsgan/nn.hpp"

using namespace pgsgan;

namespace {

void set_values(const nn::ParamPtr& p, float v) {
  for (float& x : p->value.values()) x = v;
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("1x1 identity convolution passes the input through") {
  nn::Rng rng(1);
  nn::Conv2d conv("c", 3, 3, 1, 1, 0, rng);
  set_values(conv.weight(), 0.0f);
  for (int o = 0; o < 3; ++o) conv.weight()->value.at(o, o, 0, 0) = 1.0f;
  std::mt19937_64 r(2);
  const Tensor x = oracle::random_tensor({2, 3, 5, 5}, r);
  CHECK(max_abs_diff(conv.forward(x), x) == 0.0f);
}

TEST_CASE("3x3 all-ones kernel on a 4x4 ones image") {
  nn::Rng rng(1);
  nn::Conv2d conv("c", 1, 1, 3, 1, 1, rng);
  set_values(conv.weight(), 1.0f);
  const Tensor y = conv.forward(Tensor({1, 1, 4, 4}, 1.0f));
  CHECK(y.at(0, 0, 0, 0) == 4.0f);
  CHECK(y.at(0, 0, 3, 3) == 4.0f);
  CHECK(y.at(0, 0, 0, 1) == 6.0f);
  CHECK(y.at(0, 0, 2, 0) == 6.0f);
  CHECK(y.at(0, 0, 1, 1) == 9.0f);
  CHECK(y.at(0, 0, 2, 2) == 9.0f);
}

TEST_CASE("k4 s2 p1 halves 32x32") {
  nn::Rng rng(1);
  nn::Conv2d conv("c", 2, 5, 4, 2, 1, rng);
  CHECK(conv.output_shape({1, 2, 32, 32}) == Shape{1, 5, 16, 16});
  CHECK(conv.forward(Tensor({1, 2, 32, 32})).shape() == Shape{1, 5, 16, 16});
  CHECK(nn::conv_output_size(32, 4, 2, 1) == 16);
}

TEST_CASE("GEMM convolution agrees with the direct-loop oracle") {
  std::mt19937_64 r(3);
  for (auto [k, s, p] : {std::tuple{3, 1, 1}, {4, 2, 1}, {7, 1, 3}, {4, 1, 1}, {3, 2, 1}}) {
    const Tensor x = oracle::random_tensor({3, 5, 13, 11}, r);
    const Tensor w = oracle::random_tensor({7, 5, k, k}, r);
    std::vector<float> b(7);
    for (float& v : b) v = std::uniform_real_distribution<float>(-1, 1)(r);
    kernels::ConvGeometry g{5, 7, k, s, p};
    std::vector<float> cols;
    const Tensor fast = kernels::conv2d_forward(x, w.values(), b, g, cols);
    const Tensor want = oracle::conv2d(x, w, b, s, p);
    CHECK(fast.shape() == want.shape());
    CHECK(max_abs_diff(fast, want) < 1e-4f);
    const Tensor ref = kernels::reference::conv2d_forward(x, w.values(), b, g);
    CHECK(max_abs_diff(ref, want) < 1e-5f);
  }
}

TEST_CASE("sum-loss weight gradient is the correlation of the input with ones") {
  std::mt19937_64 r(4);
  nn::Rng rng(5);
  nn::Conv2d conv("c", 2, 3, 3, 1, 1, rng);
  const Tensor x = oracle::random_tensor({2, 2, 6, 6}, r);
  const Tensor y = conv.forward(x);
  conv.backward(Tensor(y.shape(), 1.0f));
  // d/dw[o,c,a,b] sum(y) = sum over n, i, j of x[n, c, i - 1 + a, j - 1 + b] (zero padded).
  for (int c = 0; c < 2; ++c)
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        double want = 0.0;
        for (int n = 0; n < 2; ++n)
          for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) {
              const int yy = i - 1 + a, xx = j - 1 + b;
              if (yy >= 0 && yy < 6 && xx >= 0 && xx < 6) want += x.at(n, c, yy, xx);
            }
        for (int o = 0; o < 3; ++o) CHECK(conv.weight()->grad.at(o, c, a, b) == doctest::Approx(want).epsilon(1e-5));
      }
  for (int o = 0; o < 3; ++o) CHECK(conv.bias()->grad[o] == doctest::Approx(2 * 36));
}

TEST_CASE("zero output gradient leaves parameter gradients at zero") {
  std::mt19937_64 r(6);
  nn::Rng rng(7);
  nn::ResidualBlock block("r", 4, rng);
  const Tensor x = oracle::random_tensor({2, 4, 8, 8}, r);
  const Tensor y = block.forward(x);
  block.backward(Tensor(y.shape()));
  nn::ParamList ps;
  block.collect_parameters(ps);
  for (const auto& p : ps)
    for (float g : p->grad.values()) CHECK(g == 0.0f);
}

TEST_CASE("backward before forward is a state error") {
  nn::Rng rng(1);
  nn::Conv2d conv("c", 1, 1, 3, 1, 1, rng);
  CHECK_THROWS_AS(conv.backward(Tensor({1, 1, 4, 4})), StateError);
  nn::InstanceNorm norm("n", 2);
  CHECK_THROWS_AS(norm.backward(Tensor({1, 2, 4, 4})), StateError);
}

TEST_CASE("Adam: zero gradient leaves parameters unchanged") {
  auto p = std::make_shared<nn::Parameter>("p", Shape{1, 1, 1, 3});
  p->value[0] = 0.5f;
  nn::Adam adam(1e-3f);
  adam.step({p});
  CHECK(p->value[0] == 0.5f);
  CHECK(p->value[1] == 0.0f);
}

TEST_CASE("Adam: first and second unit-gradient steps move by lr") {
  auto p = std::make_shared<nn::Parameter>("p", Shape{1, 1, 1, 1});
  nn::Adam adam(1e-3f);
  p->grad[0] = 1.0f;
  adam.step({p});
  // m_hat = v_hat = 1 after bias correction: delta = -lr / (1 + eps).
  CHECK(p->value[0] == doctest::Approx(-0.001 / (1.0 + 1e-8)).epsilon(1e-6));
  CHECK(p->grad[0] == 0.0f);
  const float before = p->value[0];
  p->grad[0] = 1.0f;
  adam.step({p});
  CHECK(std::abs((p->value[0] - before) + 0.001) < 1e-6);
  CHECK(p->step == 2);
}

TEST_CASE("Adam rejects a non-finite gradient and names the parameter") {
  auto p = std::make_shared<nn::Parameter>("g.enc.conv.weight", Shape{1, 1, 1, 1});
  p->grad[0] = std::nanf("");
  nn::Adam adam(1e-3f);
  try {
    adam.step({p});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("g.enc.conv.weight") != std::string::npos);
  }
}

TEST_CASE("resize up and down") {
  const Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const Tensor up = kernels::upsample2x(x);
  const std::vector<float> want{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(std::vector<float>(up.values().begin(), up.values().end()) == want);
  CHECK(max_abs_diff(kernels::downsample2x(up), x) == 0.0f);
  const Tensor c = kernels::downsample2x(Tensor({2, 3, 6, 4}, 0.3f));
  for (float v : c.values()) CHECK(v == 0.3f);
  CHECK_THROWS_AS(kernels::downsample2x(Tensor({1, 1, 5, 4})), SizeError);
}

TEST_CASE("instance norm output is standardized per sample and channel") {
  std::mt19937_64 r(8);
  nn::InstanceNorm norm("n", 3);
  Tensor x = oracle::random_tensor({2, 3, 8, 8}, r, -3.0f, 5.0f);
  norm.forward(x);
  const Tensor& xh = norm.normalized();
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      const float* p = xh.plane(n, c);
      double mean = 0.0, var = 0.0;
      for (int i = 0; i < 64; ++i) mean += p[i];
      mean /= 64;
      for (int i = 0; i < 64; ++i) var += (p[i] - mean) * (p[i] - mean);
      var /= 64;
      CHECK(std::abs(mean) <= 1e-5);
      CHECK(std::abs(var - 1.0) <= 1e-4);
    }
}

TEST_CASE("fixed seed gives identical initialization and outputs") {
  std::mt19937_64 r(9);
  const Tensor x = oracle::random_tensor({1, 3, 8, 8}, r);
  nn::Rng a(11), b(11);
  nn::Conv2d ca("c", 3, 4, 3, 1, 1, a), cb("c", 3, 4, 3, 1, 1, b);
  CHECK(max_abs_diff(ca.weight()->value, cb.weight()->value) == 0.0f);
  CHECK(max_abs_diff(ca.forward(x), cb.forward(x)) == 0.0f);
}

TEST_CASE("kernels are bitwise independent of the worker count") {
  std::mt19937_64 r(10);
  const Tensor x = oracle::random_tensor({4, 16, 20, 20}, r);
  const Tensor w = oracle::random_tensor({32, 16, 3, 3}, r);
  kernels::ConvGeometry g{16, 32, 3, 1, 1};
  std::vector<float> cols;
  const int saved = kernels::worker_count();
  kernels::set_worker_count(1);
  const Tensor one = kernels::conv2d_forward(x, w.values(), {}, g, cols);
  kernels::set_worker_count(3);
  const Tensor three = kernels::conv2d_forward(x, w.values(), {}, g, cols);
  kernels::set_worker_count(saved);
  CHECK(max_abs_diff(one, three) == 0.0f);
}

TEST_CASE("gemm transposition variants match the triple loop") {
  std::mt19937_64 r(12);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      const int m = 13, n = 37, k = 29;
      const Tensor a = oracle::random_tensor({1, 1, 1, m * k}, r);
      const Tensor b = oracle::random_tensor({1, 1, 1, k * n}, r);
      std::vector<float> c1(m * n, 0.5f), c2(m * n, 0.5f);
      kernels::gemm(ta, tb, m, n, k, a.data(), ta ? m : k, b.data(), tb ? k : n, c1.data(), n, true);
      kernels::reference::gemm(ta, tb, m, n, k, a.data(), ta ? m : k, b.data(), tb ? k : n, c2.data(), n, true);
      for (int i = 0; i < m * n; ++i) CHECK(c1[i] == doctest::Approx(c2[i]).epsilon(1e-5));
    }
}

}  // TEST_SUITE
