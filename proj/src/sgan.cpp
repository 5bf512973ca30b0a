#include "pgsgan/sgan.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "pgsgan/error.hpp"

namespace pgsgan::sgan {

namespace {

constexpr std::uint64_t kGrowSalt = 0x9E3779B97F4A7C15ULL;

std::string upsample_name(UpsampleMode m) {
  return m == UpsampleMode::resize_conv ? "resize-conv" : "transposed-conv";
}

void check_square(const Tensor& x, int resolution, const char* who) {
  const Shape& s = x.shape();
  if (s.h != resolution || s.w != resolution) {
    throw SizeError(std::string(who) + ": input " + s.str() + " does not match resolution " +
                    std::to_string(resolution));
  }
}

}  // namespace

void GeneratorConfig::validate() const {
  if (input_channels <= 0 || output_channels <= 0) throw ConfigError("generator channel counts must be positive");
  if (base_width <= 0) throw ConfigError("generator.base_width must be positive");
  if (n_downsample < 0) throw ConfigError("generator.n_downsample must be non-negative");
  if (n_residual_blocks < 0) throw ConfigError("generator.n_residual_blocks must be non-negative");
}

void DiscriminatorConfig::validate() const {
  if (input_channels <= 0) throw ConfigError("discriminator.input_channels must be positive");
  if (strides.size() != widths.size() + 1) {
    throw ConfigError("discriminator.strides needs one entry per layer (widths + 1)");
  }
  if (std::any_of(widths.begin(), widths.end(), [](int w) { return w <= 0; })) {
    throw ConfigError("discriminator.widths must be positive");
  }
  if (std::any_of(strides.begin(), strides.end(), [](int s) { return s <= 0; })) {
    throw ConfigError("discriminator.strides must be positive");
  }
}

int DiscriminatorConfig::grid_size(int input) const {
  int s = input;
  for (int stride : strides) s = nn::conv_output_size(s, kernel, stride, padding);
  return s;
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = nlohmann::json{{"input_channels", c.input_channels},   {"base_width", c.base_width},
                     {"n_downsample", c.n_downsample},       {"n_residual_blocks", c.n_residual_blocks},
                     {"output_channels", c.output_channels}, {"upsample", upsample_name(c.upsample)}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  c = GeneratorConfig{};
  c.input_channels = j.value("input_channels", c.input_channels);
  c.base_width = j.value("base_width", c.base_width);
  c.n_downsample = j.value("n_downsample", c.n_downsample);
  c.n_residual_blocks = j.value("n_residual_blocks", c.n_residual_blocks);
  c.output_channels = j.value("output_channels", c.output_channels);
  const std::string up = j.value("upsample", upsample_name(c.upsample));
  c.upsample = up == "transposed-conv" ? UpsampleMode::transposed_conv : UpsampleMode::resize_conv;
}

void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
  j = nlohmann::json{{"input_channels", c.input_channels},
                     {"kernel", c.kernel},
                     {"padding", c.padding},
                     {"widths", c.widths},
                     {"strides", c.strides}};
}

void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
  c = DiscriminatorConfig{};
  c.input_channels = j.value("input_channels", c.input_channels);
  c.kernel = j.value("kernel", c.kernel);
  c.padding = j.value("padding", c.padding);
  c.widths = j.value("widths", c.widths);
  c.strides = j.value("strides", c.strides);
}

nn::ParamList unique_parameters(const nn::ParamList& params) {
  nn::ParamList out;
  std::unordered_set<const nn::Parameter*> seen;
  for (const auto& p : params) {
    if (seen.insert(p.get()).second) out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------- Generator

Generator::Generator(const GeneratorConfig& config, int resolution, std::uint64_t seed)
    : config_(config), base_resolution_(resolution), seed_(seed) {
  config_.validate();
  const int scale = 1 << config_.n_downsample;
  if (resolution <= 0 || resolution % scale != 0) {
    throw ConfigError("generator resolution " + std::to_string(resolution) + " must be divisible by " +
                      std::to_string(scale));
  }
  nn::Rng rng(seed);
  const int w = config_.base_width;
  trunk_.emplace<nn::Conv2d>("g.enc.conv", config_.input_channels, w, 7, 1, 3, rng);
  trunk_.emplace<nn::InstanceNorm>("g.enc.norm", w);
  trunk_.emplace<nn::ActivationLayer>(nn::Activation::relu);
  int ch = w;
  for (int i = 0; i < config_.n_downsample; ++i) {
    const std::string name = "g.down" + std::to_string(i);
    trunk_.emplace<nn::Conv2d>(name + ".conv", ch, ch * 2, 3, 2, 1, rng);
    trunk_.emplace<nn::InstanceNorm>(name + ".norm", ch * 2);
    trunk_.emplace<nn::ActivationLayer>(nn::Activation::relu);
    ch *= 2;
  }
  for (int i = 0; i < config_.n_residual_blocks; ++i) {
    trunk_.emplace<nn::ResidualBlock>("g.res" + std::to_string(i), ch, rng);
  }
  for (int i = 0; i < config_.n_downsample; ++i) {
    const std::string name = "g.up" + std::to_string(i);
    if (config_.upsample == UpsampleMode::resize_conv) {
      trunk_.add(nn::make_layer({nn::LayerKind::resize_conv, 3, 1, 1, ch, ch / 2}, name + ".conv", rng));
    } else {
      trunk_.emplace<nn::ConvTranspose2d>(name + ".conv", ch, ch / 2, 4, 2, 1, rng);
    }
    trunk_.emplace<nn::InstanceNorm>(name + ".norm", ch / 2);
    trunk_.emplace<nn::ActivationLayer>(nn::Activation::relu);
    ch /= 2;
  }
  head_ = std::make_unique<nn::Sequential>();
  to_image_ = &head_->emplace<nn::Conv2d>("g.to_image", ch, config_.output_channels, 7, 1, 3, rng);
  head_->emplace<nn::ActivationLayer>(nn::Activation::tanh);
}

Tensor Generator::forward(const Tensor& x) {
  check_square(x, resolution(), "generator");
  if (x.shape().c != config_.input_channels) {
    throw SizeError("generator: input " + x.shape().str() + " has wrong channel count");
  }
  Tensor h = in_fib_ ? in_fib_->forward(x) : x;
  h = trunk_.forward(h);
  return out_fib_ ? out_fib_->forward(h) : head_->forward(h);
}

Tensor Generator::backward(const Tensor& grad_out) {
  Tensor g = out_fib_ ? out_fib_->backward(grad_out) : head_->backward(grad_out);
  g = trunk_.backward(g);
  return in_fib_ ? in_fib_->backward(g) : g;
}

void Generator::grow(const fib::FibState& state) {
  if (grown()) throw StateError("generator has already grown");
  nn::Rng rng(seed_ ^ kGrowSalt);
  const int features = config_.base_width;
  in_fib_ = fib::make_fib_down("g.fib_in", config_.input_channels, features, config_.input_channels, state, rng);
  out_fib_ = fib::make_fib_up("g.fib_out", features, *to_image_, std::move(head_), state, rng);
  if (trunk_.frozen()) {
    in_fib_->set_frozen(true);
    out_fib_->set_frozen(true);
  }
}

nn::ParamList Generator::parameters() const {
  nn::ParamList all;
  if (in_fib_) in_fib_->collect_parameters(all);
  trunk_.collect_parameters(all);
  if (out_fib_) {
    out_fib_->collect_parameters(all);
  } else {
    head_->collect_parameters(all);
  }
  return unique_parameters(all);
}

nn::ParamList Generator::trunk_parameters() const {
  nn::ParamList all;
  trunk_.collect_parameters(all);
  to_image_->collect_parameters(all);
  return all;
}

std::vector<fib::FadeInBlock*> Generator::fade_in_blocks() {
  if (!grown()) return {};
  return {in_fib_.get(), out_fib_.get()};
}

std::vector<const fib::FadeInBlock*> Generator::fade_in_blocks() const {
  if (!grown()) return {};
  return {in_fib_.get(), out_fib_.get()};
}

std::string Generator::describe() const {
  std::string d = "G{";
  if (in_fib_) d += in_fib_->describe() + ";";
  d += trunk_.describe() + ";";
  d += out_fib_ ? out_fib_->describe() : head_->describe();
  return d + "}";
}

void Generator::set_frozen(bool frozen) {
  if (in_fib_) in_fib_->set_frozen(frozen);
  trunk_.set_frozen(frozen);
  if (out_fib_) out_fib_->set_frozen(frozen);
  if (head_) head_->set_frozen(frozen);
}

// ------------------------------------------------------------ Discriminator

Discriminator::Discriminator(const DiscriminatorConfig& config, int resolution, std::uint64_t seed)
    : config_(config), base_resolution_(resolution), seed_(seed) {
  config_.validate();
  if (config_.grid_size(resolution) <= 0) {
    throw ConfigError("discriminator resolution " + std::to_string(resolution) + " is too small");
  }
  nn::Rng rng(seed);
  const int layers = static_cast<int>(config_.strides.size());
  int in = config_.input_channels;
  for (int i = 0; i < layers; ++i) {
    const bool last = i == layers - 1;
    const int out = last ? 1 : config_.widths[i];
    const std::string name = "d.layer" + std::to_string(i);
    auto& conv = trunk_.emplace<nn::Conv2d>(name + ".conv", in, out, config_.kernel, config_.strides[i],
                                            config_.padding, rng);
    if (last) {
      final_conv_ = &conv;
      trunk_.emplace<nn::ActivationLayer>(nn::Activation::sigmoid);
    } else {
      if (i > 0) trunk_.emplace<nn::InstanceNorm>(name + ".norm", out);
      trunk_.emplace<nn::ActivationLayer>(nn::Activation::leaky_relu, 0.2f);
    }
    in = out;
  }
}

Tensor Discriminator::forward(const Tensor& label, const Tensor& image) {
  if (!(label.shape().n == image.shape().n && label.shape().h == image.shape().h &&
        label.shape().w == image.shape().w)) {
    throw SizeError("discriminator: label " + label.shape().str() + " and image " + image.shape().str() +
                    " are not aligned");
  }
  if (label.shape().c + image.shape().c != config_.input_channels) {
    throw SizeError("discriminator: expected " + std::to_string(config_.input_channels) + " input channels");
  }
  check_square(image, resolution(), "discriminator");
  label_channels_ = label.shape().c;
  Tensor h = concat_channels(label, image);
  if (in_fib_) h = in_fib_->forward(h);
  return trunk_.forward(h);
}

Tensor Discriminator::backward(const Tensor& grad_out) {
  Tensor g = trunk_.backward(grad_out);
  if (in_fib_) g = in_fib_->backward(g);
  Tensor g_label;
  Tensor g_image;
  split_channels(g, label_channels_, g_label, g_image);
  return g_image;
}

void Discriminator::grow(const fib::FibState& state) {
  if (grown()) throw StateError("discriminator has already grown");
  nn::Rng rng(seed_ ^ kGrowSalt);
  in_fib_ = fib::make_fib_down("d.fib_in", config_.input_channels, config_.widths.front(), config_.input_channels,
                               state, rng);
  if (trunk_.frozen()) in_fib_->set_frozen(true);
}

int Discriminator::grid_size() const { return config_.grid_size(base_resolution_); }

nn::ParamList Discriminator::parameters() const {
  nn::ParamList all;
  if (in_fib_) in_fib_->collect_parameters(all);
  trunk_.collect_parameters(all);
  return unique_parameters(all);
}

nn::ParamList Discriminator::trunk_parameters() const {
  nn::ParamList all;
  trunk_.collect_parameters(all);
  return all;
}

std::vector<fib::FadeInBlock*> Discriminator::fade_in_blocks() {
  if (!grown()) return {};
  return {in_fib_.get()};
}

std::vector<const fib::FadeInBlock*> Discriminator::fade_in_blocks() const {
  if (!grown()) return {};
  return {in_fib_.get()};
}

std::string Discriminator::describe() const {
  return "D{" + (in_fib_ ? in_fib_->describe() + ";" : std::string()) + trunk_.describe() + "}";
}

void Discriminator::set_frozen(bool frozen) {
  if (in_fib_) in_fib_->set_frozen(frozen);
  trunk_.set_frozen(frozen);
}

// ------------------------------------------------------------------- losses

namespace {

void check_probabilities(const Tensor& t, const char* name) {
  for (float v : t.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw NumericError(std::string(name) + " contains a value outside [0,1]: " + std::to_string(v));
    }
  }
}

}  // namespace

DiscriminatorLoss discriminator_loss(const Tensor& d_real, const Tensor& d_fake) {
  check_probabilities(d_real, "d_real");
  check_probabilities(d_fake, "d_fake");
  DiscriminatorLoss out;
  out.grad_real = Tensor(d_real.shape());
  out.grad_fake = Tensor(d_fake.shape());
  const double nr = static_cast<double>(d_real.size());
  const double nf = static_cast<double>(d_fake.size());
  double real_term = 0.0;
  for (std::size_t i = 0; i < d_real.size(); ++i) {
    const double r = d_real[i];
    real_term += std::log(std::max(r, kLogClamp));
    out.grad_real[i] = r > kLogClamp ? static_cast<float>(-1.0 / (nr * r)) : 0.0f;
  }
  double fake_term = 0.0;
  for (std::size_t i = 0; i < d_fake.size(); ++i) {
    const double q = 1.0 - static_cast<double>(d_fake[i]);
    fake_term += std::log(std::max(q, kLogClamp));
    out.grad_fake[i] = q > kLogClamp ? static_cast<float>(1.0 / (nf * q)) : 0.0f;
  }
  out.loss = -real_term / nr - fake_term / nf;
  return out;
}

GeneratorLoss generator_loss(const Tensor& d_fake, const Tensor& y, const Tensor& g_x, double lambda,
                             AdversarialForm form) {
  check_probabilities(d_fake, "d_fake");
  if (!(y.shape() == g_x.shape())) {
    throw SizeError("generator_loss: target " + y.shape().str() + " vs output " + g_x.shape().str());
  }
  GeneratorLoss out;
  out.grad_d_fake = Tensor(d_fake.shape());
  const double nf = static_cast<double>(d_fake.size());
  double adv = 0.0;
  for (std::size_t i = 0; i < d_fake.size(); ++i) {
    const double f = d_fake[i];
    if (form == AdversarialForm::non_saturating) {
      adv -= std::log(std::max(f, kLogClamp));
      out.grad_d_fake[i] = f > kLogClamp ? static_cast<float>(-1.0 / (nf * f)) : 0.0f;
    } else {
      const double q = 1.0 - f;
      adv += std::log(std::max(q, kLogClamp));
      out.grad_d_fake[i] = q > kLogClamp ? static_cast<float>(-1.0 / (nf * q)) : 0.0f;
    }
  }
  out.adversarial = adv / nf;

  out.grad_image = Tensor(g_x.shape());
  const double n = static_cast<double>(g_x.size());
  double l1 = 0.0;
  const float step = static_cast<float>(lambda / n);
  for (std::size_t i = 0; i < g_x.size(); ++i) {
    const float d = g_x[i] - y[i];
    l1 += std::abs(static_cast<double>(d));
    out.grad_image[i] = d > 0.0f ? step : (d < 0.0f ? -step : 0.0f);
  }
  out.l1 = l1 / n;
  out.total = out.adversarial + lambda * out.l1;
  return out;
}

LossReport compute_losses(const Tensor& d_real, const Tensor& d_fake, const Tensor& y, const Tensor& g_x,
                          double lambda, AdversarialForm form) {
  const DiscriminatorLoss dl = discriminator_loss(d_real, d_fake);
  const GeneratorLoss gl = generator_loss(d_fake, y, g_x, lambda, form);
  return {dl.loss, gl.adversarial, gl.l1, gl.total};
}

// --------------------------------------------------------------- train step

LossReport train_step(Generator& g, Discriminator& d, const Batch& batch, const TrainOptions& options,
                      nn::Adam& opt_g, nn::Adam& opt_d) {
  const int b = batch.d_real.shape().n;
  if (batch.g_label.shape().n != b || batch.d_label.shape().n != b || batch.g_real.shape().n != b) {
    throw SizeError("train_step: batch members disagree on batch size");
  }
  opt_g.set_lr(options.lr_g);
  opt_d.set_lr(options.lr_d);

  const Tensor fake = g.forward(batch.g_label);
  const bool bridge = fake.shape().h != batch.d_real.shape().h;
  if (bridge && fake.shape().h * 2 != batch.d_real.shape().h) {
    throw SizeError("train_step: generator output " + fake.shape().str() + " cannot be bridged to " +
                    batch.d_real.shape().str());
  }
  const Tensor fake_d = bridge ? kernels::upsample2x(fake) : fake;

  // Discriminator step on real and detached fake, as one 2B batch.
  const std::vector<Tensor> labels{batch.d_label, batch.d_label};
  const std::vector<Tensor> images{batch.d_real, fake_d};
  const Tensor grid = d.forward(stack_batch(labels), stack_batch(images));
  const DiscriminatorLoss dl = discriminator_loss(grid.slice_batch(0, b), grid.slice_batch(b, b));
  const std::vector<Tensor> grads{dl.grad_real, dl.grad_fake};
  d.backward(stack_batch(grads));
  opt_d.step(d.parameters());

  // Generator step through the updated, frozen discriminator.
  d.set_frozen(true);
  const Tensor grid_fake = d.forward(batch.d_label, fake_d);
  const GeneratorLoss gl = generator_loss(grid_fake, batch.g_real, fake, options.lambda, options.form);
  Tensor grad_img = d.backward(gl.grad_d_fake);
  d.set_frozen(false);
  if (bridge) grad_img = kernels::upsample2x_backward(grad_img);
  for (std::size_t i = 0; i < grad_img.size(); ++i) grad_img[i] += gl.grad_image[i];
  g.backward(grad_img);
  opt_g.step(g.parameters());

  LossReport report{dl.loss, gl.adversarial, gl.l1, gl.total};
  if (!std::isfinite(report.d_loss) || !std::isfinite(report.g_total)) {
    throw NumericError("non-finite loss; resume from the last checkpoint");
  }
  return report;
}

}  // namespace pgsgan::sgan
