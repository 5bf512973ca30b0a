#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pgsgan/error.hpp"
#include "pgsgan/kernels.hpp"
#include "pgsgan/sgan.hpp"

using namespace pgsgan;
using sgan::DiscriminatorConfig;
using sgan::GeneratorConfig;

namespace {

// Closed-form patch grid side: floor((n + 2p - k) / s) + 1 per layer.
int grid_side(const DiscriminatorConfig& c, int n) {
  for (int s : c.strides) n = (n + 2 * c.padding - c.kernel) / s + 1;
  return n;
}

Tensor label_batch(int n, int size, std::mt19937_64& rng) {
  Tensor t({n, 3, size, size});
  std::bernoulli_distribution on(0.3);
  for (float& v : t.values()) v = on(rng) ? 1.0f : 0.0f;
  return t;
}

std::vector<Tensor> snapshot(const nn::ParamList& ps) {
  std::vector<Tensor> out;
  for (const auto& p : ps) out.push_back(p->value);
  return out;
}

bool changed(const nn::ParamList& ps, const std::vector<Tensor>& before) {
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (max_abs_diff(ps[i]->value, before[i]) > 0.0f) return true;
  return false;
}

bool identical(const nn::ParamList& a, const nn::ParamList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (max_abs_diff(a[i]->value, b[i]->value) != 0.0f) return false;
  return true;
}

}  // namespace

TEST_SUITE("sgan") {

TEST_CASE("generator shapes, range and determinism") {
  std::mt19937_64 rng(1);
  sgan::Generator g(GeneratorConfig::desk(), 32, 7);
  const Tensor x = label_batch(2, 32, rng);
  const Tensor y = g.forward(x);
  CHECK(y.shape() == Shape{2, 1, 32, 32});
  for (float v : y.values()) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  CHECK(max_abs_diff(g.forward(x), y) == 0.0f);
  sgan::Generator twin(GeneratorConfig::desk(), 32, 7);
  CHECK(max_abs_diff(twin.forward(x), y) == 0.0f);

  g.grow({});
  CHECK(g.forward(label_batch(2, 64, rng)).shape() == Shape{2, 1, 64, 64});
  CHECK_THROWS_AS(g.forward(x), SizeError);
  CHECK_THROWS_AS(g.grow({}), StateError);
}

TEST_CASE("patch grid is 30x30 at full scale and 6x6 at desk scale") {
  CHECK(DiscriminatorConfig::full().grid_size(256) == 30);
  CHECK(grid_side(DiscriminatorConfig::full(), 256) == 30);
  CHECK(DiscriminatorConfig::desk().grid_size(32) == 6);
  CHECK(grid_side(DiscriminatorConfig::desk(), 32) == 6);

  std::mt19937_64 rng(2);
  sgan::Discriminator d(DiscriminatorConfig::desk(), 32, 3);
  CHECK(d.forward(label_batch(2, 32, rng), oracle::random_tensor({2, 1, 32, 32}, rng)).shape() ==
        Shape{2, 1, 6, 6});
  sgan::Discriminator full(DiscriminatorConfig::full(), 256, 3);
  const Tensor grid = full.forward(label_batch(1, 256, rng), oracle::random_tensor({1, 1, 256, 256}, rng));
  CHECK(grid.shape() == Shape{1, 1, 30, 30});
  for (float v : grid.values()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
}

TEST_CASE("grid size follows the shape algebra for random configs") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> layers(2, 4), width(2, 6), stride(1, 2);
  for (int trial = 0; trial < 25; ++trial) {
    DiscriminatorConfig c;
    c.widths.clear();
    c.strides.clear();
    const int n = layers(rng);
    for (int i = 0; i < n; ++i) c.widths.push_back(width(rng));
    for (int i = 0; i <= n; ++i) c.strides.push_back(stride(rng));
    if (grid_side(c, 32) < 1) continue;
    CHECK(c.grid_size(32) == grid_side(c, 32));
    sgan::Discriminator d(c, 32, 4);
    const Tensor out = d.forward(label_batch(1, 32, rng), oracle::random_tensor({1, 1, 32, 32}, rng));
    CHECK(out.shape() == Shape{1, 1, grid_side(c, 32), grid_side(c, 32)});
  }
}

TEST_CASE("zero final layer gives one half everywhere") {
  std::mt19937_64 rng(4);
  sgan::Discriminator d(DiscriminatorConfig::desk(), 32, 5);
  for (float& v : d.final_conv().weight()->value.values()) v = 0.0f;
  for (float& v : d.final_conv().bias()->value.values()) v = 0.0f;
  const Tensor grid = d.forward(label_batch(2, 32, rng), oracle::random_tensor({2, 1, 32, 32}, rng));
  for (float v : grid.values()) CHECK(v == 0.5f);
}

TEST_CASE("misaligned inputs are rejected") {
  std::mt19937_64 rng(5);
  sgan::Discriminator d(DiscriminatorConfig::desk(), 32, 5);
  CHECK_THROWS_AS(d.forward(label_batch(2, 32, rng), Tensor({2, 1, 16, 16})), SizeError);
  CHECK_THROWS_AS(d.forward(label_batch(2, 32, rng), Tensor({1, 1, 32, 32})), SizeError);
  CHECK_THROWS_AS(d.backward(Tensor({2, 1, 6, 6})), StateError);
}

TEST_CASE("loss values") {
  const Tensor ones({2, 1, 6, 6}, 1.0f), zeros({2, 1, 6, 6}, 0.0f), half({2, 1, 6, 6}, 0.5f);
  const Tensor y({2, 1, 8, 8}, 0.2f);

  const sgan::LossReport perfect = sgan::compute_losses(ones, zeros, y, y, 100.0);
  CHECK(perfect.d_loss == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(perfect.g_adv_loss == doctest::Approx(-std::log(1e-7)).epsilon(1e-9));
  CHECK(perfect.g_adv_loss == doctest::Approx(16.118).epsilon(1e-4));

  const sgan::LossReport coin = sgan::compute_losses(half, half, y, y, 100.0);
  CHECK(coin.d_loss == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(coin.g_adv_loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(coin.g_l1_loss == 0.0);

  Tensor shifted = y;
  for (float& v : shifted.values()) v -= 0.1f;
  const sgan::LossReport off = sgan::compute_losses(half, half, y, shifted, 100.0);
  CHECK(off.g_l1_loss == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(off.g_total - off.g_adv_loss - 100.0 * off.g_l1_loss == doctest::Approx(0.0).epsilon(1e-12));

  const sgan::LossReport sat = sgan::compute_losses(half, half, y, y, 1.0, sgan::AdversarialForm::saturating);
  CHECK(sat.g_adv_loss == doctest::Approx(std::log(0.5)).epsilon(1e-12));
  CHECK(sat.d_loss == coin.d_loss);

  Tensor bad = half;
  bad[3] = 1.5f;
  CHECK_THROWS_AS(sgan::discriminator_loss(bad, half), NumericError);
  bad[3] = std::nanf("");
  CHECK_THROWS_AS(sgan::generator_loss(bad, y, y, 1.0), NumericError);
}

TEST_CASE("discriminator separates +1 from -1 images") {
  std::mt19937_64 rng(6);
  sgan::Discriminator d(DiscriminatorConfig::desk(), 32, 8);
  nn::Adam opt(1e-4f);
  const Tensor label = label_batch(2, 32, rng);
  const Tensor real({2, 1, 32, 32}, 1.0f), fake({2, 1, 32, 32}, -1.0f);
  double loss = 0.0;
  for (int step = 0; step < 200; ++step) {
    const std::vector<Tensor> labels{label, label}, images{real, fake};
    const Tensor grid = d.forward(stack_batch(labels), stack_batch(images));
    const sgan::DiscriminatorLoss dl = sgan::discriminator_loss(grid.slice_batch(0, 2), grid.slice_batch(2, 2));
    const std::vector<Tensor> grads{dl.grad_real, dl.grad_fake};
    d.backward(stack_batch(grads));
    opt.step(d.parameters());
    loss = dl.loss;
  }
  CHECK(loss < 0.2);
}

TEST_CASE("lambda zero: adversarial gradient alone moves G") {
  std::mt19937_64 rng(7);
  sgan::Generator g(GeneratorConfig::desk(), 32, 9);
  sgan::Discriminator d(DiscriminatorConfig::desk(), 32, 10);
  nn::Adam opt_g(1e-3f), opt_d(0.0f);
  sgan::TrainOptions o;
  o.lambda = 0.0;
  o.lr_d = 0.0f;
  sgan::Batch b{label_batch(2, 32, rng), oracle::random_tensor({2, 1, 32, 32}, rng), {}, {}};
  b.d_label = b.g_label;
  b.d_real = b.g_real;
  const auto g0 = snapshot(g.parameters());
  const auto d0 = snapshot(d.parameters());
  const sgan::LossReport r = sgan::train_step(g, d, b, o, opt_g, opt_d);
  CHECK(changed(g.parameters(), g0));
  CHECK_FALSE(changed(d.parameters(), d0));
  CHECK(r.g_total == r.g_adv_loss);
  CHECK(r.g_l1_loss > 0.0);
}

TEST_CASE("one step moves both networks and leaves no stray gradients") {
  std::mt19937_64 rng(8);
  sgan::Generator g(GeneratorConfig::desk(), 32, 11);
  sgan::Discriminator d(DiscriminatorConfig::desk(), 32, 12);
  nn::Adam opt_g(1e-3f), opt_d(1e-4f);
  sgan::Batch b{label_batch(4, 32, rng), oracle::random_tensor({4, 1, 32, 32}, rng), {}, {}};
  b.d_label = b.g_label;
  b.d_real = b.g_real;
  const auto g0 = snapshot(g.parameters());
  const auto d0 = snapshot(d.parameters());
  sgan::train_step(g, d, b, {}, opt_g, opt_d);
  CHECK(changed(g.parameters(), g0));
  CHECK(changed(d.parameters(), d0));
  for (const auto& p : d.parameters())
    for (float v : p->grad.values()) CHECK(v == 0.0f);
  for (const auto& p : g.parameters())
    for (float v : p->grad.values()) CHECK(v == 0.0f);
}

TEST_CASE("updates are detached") {
  // Replays the step by hand with each update isolated: the D step sees only
  // the D loss, the G step only the G loss through the updated D.
  std::mt19937_64 rng(9);
  const sgan::TrainOptions o;
  sgan::Batch b{label_batch(2, 32, rng), oracle::random_tensor({2, 1, 32, 32}, rng), {}, {}};
  b.d_label = b.g_label;
  b.d_real = b.g_real;

  sgan::Generator g(GeneratorConfig::desk(), 32, 13);
  sgan::Discriminator d(DiscriminatorConfig::desk(), 32, 14);
  nn::Adam opt_g(o.lr_g), opt_d(o.lr_d);
  sgan::train_step(g, d, b, o, opt_g, opt_d);

  sgan::Generator hg(GeneratorConfig::desk(), 32, 13);
  sgan::Discriminator hd(DiscriminatorConfig::desk(), 32, 14);
  nn::Adam hopt_g(o.lr_g), hopt_d(o.lr_d);
  const Tensor fake = hg.forward(b.g_label);
  const auto g_before = snapshot(hg.parameters());
  {
    const std::vector<Tensor> labels{b.d_label, b.d_label}, images{b.d_real, fake};
    const Tensor grid = hd.forward(stack_batch(labels), stack_batch(images));
    const auto dl = sgan::discriminator_loss(grid.slice_batch(0, 2), grid.slice_batch(2, 2));
    const std::vector<Tensor> grads{dl.grad_real, dl.grad_fake};
    hd.backward(stack_batch(grads));
    hopt_d.step(hd.parameters());
  }
  CHECK_FALSE(changed(hg.parameters(), g_before));
  CHECK(identical(d.parameters(), hd.parameters()));

  // G step: D's parameters must come out untouched.
  const auto d_after = snapshot(hd.parameters());
  {
    const Tensor grid = hd.forward(b.d_label, fake);
    const auto gl = sgan::generator_loss(grid, b.g_real, fake, o.lambda);
    nn::zero_grads(hd.parameters());
    Tensor gi = hd.backward(gl.grad_d_fake);
    nn::zero_grads(hd.parameters());
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += gl.grad_image[i];
    hg.backward(gi);
    hopt_g.step(hg.parameters());
  }
  CHECK_FALSE(changed(hd.parameters(), d_after));
  CHECK(identical(g.parameters(), hg.parameters()));
}

TEST_CASE("phase-2 bridging upsamples the fake for D") {
  std::mt19937_64 rng(10);
  sgan::Generator g(GeneratorConfig::desk(), 32, 15);
  sgan::Discriminator d(DiscriminatorConfig::desk(), 32, 16);
  d.grow({});
  nn::Adam opt_g(1e-3f), opt_d(1e-4f);
  sgan::Batch b;
  b.d_label = label_batch(2, 64, rng);
  b.d_real = oracle::random_tensor({2, 1, 64, 64}, rng);
  b.g_label = kernels::downsample2x(b.d_label);
  b.g_real = kernels::downsample2x(b.d_real);
  const sgan::LossReport r = sgan::train_step(g, d, b, {}, opt_g, opt_d);
  CHECK(std::isfinite(r.g_total));
  b.g_real = Tensor({2, 1, 16, 16});
  CHECK_THROWS_AS(sgan::train_step(g, d, b, {}, opt_g, opt_d), SizeError);
}

}  // TEST_SUITE
