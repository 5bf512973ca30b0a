#include "pgsgan/nn.hpp"

#include <cmath>

#include "pgsgan/error.hpp"

namespace pgsgan::nn {

namespace {

void gaussian_fill(Tensor& t, float stddev, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  for (float& v : t.values()) v = dist(rng);
}

[[maybe_unused]] void check_finite(const Tensor& t, const std::string& where) {
  if (!t.all_finite()) throw NumericError("non-finite values after " + where);
}

std::string conv_desc(const char* kind, const kernels::ConvGeometry& g, bool bias) {
  return std::string(kind) + "(" + std::to_string(g.in_channels) + "->" + std::to_string(g.out_channels) +
         ",k" + std::to_string(g.kernel) + ",s" + std::to_string(g.stride) + ",p" + std::to_string(g.pad) +
         (bias ? ",b" : "") + ")";
}

}  // namespace

Parameter::Parameter(std::string name_, Shape shape)
    : name(std::move(name_)), value(shape), grad(shape), m(shape), v(shape) {}

std::size_t count_values(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p->value.size();
  return n;
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::transposed_conv: return "transposed-conv";
    case LayerKind::resize_conv: return "resize-conv";
    case LayerKind::instance_norm: return "instance-norm";
    case LayerKind::relu: return "relu";
    case LayerKind::leaky_relu: return "leaky-relu";
    case LayerKind::tanh: return "tanh";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::residual_block: return "residual-block";
    case LayerKind::resize_up: return "resize-up";
    case LayerKind::resize_down: return "resize-down";
  }
  return "unknown";
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int pad,
               Rng& rng, bool bias)
    : geom_{in_channels, out_channels, kernel, stride, pad} {
  weight_ = std::make_shared<Parameter>(name + ".weight", Shape{out_channels, in_channels, kernel, kernel});
  gaussian_fill(weight_->value, kInitStd, rng);
  if (bias) bias_ = std::make_shared<Parameter>(name + ".bias", Shape{1, out_channels, 1, 1});
}

Conv2d::Conv2d(ParamPtr weight, ParamPtr bias, int kernel, int stride, int pad)
    : weight_(std::move(weight)), bias_(std::move(bias)) {
  const Shape& s = weight_->value.shape();
  if (s.h != kernel || s.w != kernel) throw SizeError("shared conv weight has wrong kernel size");
  geom_ = {s.c, s.n, kernel, stride, pad};
}

Tensor Conv2d::forward(const Tensor& x) {
  if (x.shape().c != geom_.in_channels) {
    throw SizeError("layer " + weight_->name + ": input " + x.shape().str() + " has " +
                    std::to_string(x.shape().c) + " channels, expected " + std::to_string(geom_.in_channels));
  }
  in_shape_ = x.shape();
  std::span<const float> bias;
  if (bias_) bias = bias_->value.values();
  Tensor y = kernels::conv2d_forward(x, weight_->value.values(), bias, geom_, cols_);
  cached_ = true;
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  if (!cached_) throw StateError("backward before forward in " + weight_->name);
  std::span<float> gw;
  std::span<float> gb;
  if (!frozen_) {
    gw = weight_->grad.values();
    if (bias_) gb = bias_->grad.values();
  }
  return kernels::conv2d_backward(in_shape_, cols_, weight_->value.values(), grad_out, geom_, gw, gb, true);
}

Shape Conv2d::output_shape(const Shape& in) const {
  return {in.n, geom_.out_channels, geom_.out_size(in.h), geom_.out_size(in.w)};
}

void Conv2d::collect_parameters(ParamList& out) const {
  out.push_back(weight_);
  if (bias_) out.push_back(bias_);
}

std::string Conv2d::describe() const { return conv_desc("conv", geom_, bias_ != nullptr); }

// ------------------------------------------------------- ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(const std::string& name, int in_channels, int out_channels, int kernel,
                                 int stride, int pad, Rng& rng)
    : geom_{in_channels, out_channels, kernel, stride, pad} {
  weight_ = std::make_shared<Parameter>(name + ".weight", Shape{in_channels, out_channels, kernel, kernel});
  gaussian_fill(weight_->value, kInitStd, rng);
  bias_ = std::make_shared<Parameter>(name + ".bias", Shape{1, out_channels, 1, 1});
}

Tensor ConvTranspose2d::forward(const Tensor& x) {
  input_ = x;
  cached_ = true;
  return kernels::conv_transpose2d_forward(x, weight_->value.values(), bias_->value.values(), geom_);
}

Tensor ConvTranspose2d::backward(const Tensor& grad_out) {
  if (!cached_) throw StateError("backward before forward in " + weight_->name);
  std::span<float> gw;
  std::span<float> gb;
  if (!frozen_) {
    gw = weight_->grad.values();
    gb = bias_->grad.values();
  }
  return kernels::conv_transpose2d_backward(input_, weight_->value.values(), grad_out, geom_, gw, gb, true);
}

Shape ConvTranspose2d::output_shape(const Shape& in) const {
  return {in.n, geom_.out_channels, geom_.transposed_out_size(in.h), geom_.transposed_out_size(in.w)};
}

void ConvTranspose2d::collect_parameters(ParamList& out) const {
  out.push_back(weight_);
  out.push_back(bias_);
}

std::string ConvTranspose2d::describe() const { return conv_desc("convT", geom_, true); }

// ---------------------------------------------------------- InstanceNorm

InstanceNorm::InstanceNorm(const std::string& name, int channels, float eps) : channels_(channels), eps_(eps) {
  gamma_ = std::make_shared<Parameter>(name + ".gamma", Shape{1, channels, 1, 1});
  beta_ = std::make_shared<Parameter>(name + ".beta", Shape{1, channels, 1, 1});
  gamma_->value.fill(1.0f);
}

Tensor InstanceNorm::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c != channels_) throw SizeError("layer " + gamma_->name + ": channel mismatch " + s.str());
  xhat_ = Tensor(s);
  inv_std_.assign(static_cast<std::size_t>(s.n) * s.c, 0.0f);
  Tensor y(s);
  const std::size_t plane = s.plane();
  const int planes = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const int c = p % s.c;
    const float* src = x.plane(p / s.c, c);
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) sum += src[i];
    const double mean = sum / plane;
    double var = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= plane;
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps_));
    inv_std_[p] = is;
    float* xh = xhat_.plane(p / s.c, c);
    float* dst = y.plane(p / s.c, c);
    const float g = gamma_->value[c];
    const float b = beta_->value[c];
    const float m = static_cast<float>(mean);
    for (std::size_t i = 0; i < plane; ++i) {
      xh[i] = (src[i] - m) * is;
      dst[i] = g * xh[i] + b;
    }
  }
  cached_ = true;
  return y;
}

Tensor InstanceNorm::backward(const Tensor& grad_out) {
  if (!cached_) throw StateError("backward before forward in " + gamma_->name);
  const Shape& s = grad_out.shape();
  Tensor gx(s);
  const std::size_t plane = s.plane();
  std::vector<float> dgamma(static_cast<std::size_t>(s.n) * s.c);
  std::vector<float> dbeta(static_cast<std::size_t>(s.n) * s.c);
  const int planes = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const int c = p % s.c;
    const float* dy = grad_out.plane(p / s.c, c);
    const float* xh = xhat_.plane(p / s.c, c);
    const float g = gamma_->value[c];
    double sum_dy = 0.0;
    double sum_dy_xh = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      sum_dy += dy[i];
      sum_dy_xh += static_cast<double>(dy[i]) * xh[i];
    }
    dgamma[p] = static_cast<float>(sum_dy_xh);
    dbeta[p] = static_cast<float>(sum_dy);
    const float n = static_cast<float>(plane);
    const float k = g * inv_std_[p] / n;
    const float a = static_cast<float>(sum_dy);
    const float b = static_cast<float>(sum_dy_xh);
    float* dst = gx.plane(p / s.c, c);
    for (std::size_t i = 0; i < plane; ++i) dst[i] = k * (n * dy[i] - a - xh[i] * b);
  }
  if (!frozen_) {
    for (int p = 0; p < planes; ++p) {
      gamma_->grad[p % s.c] += dgamma[p];
      beta_->grad[p % s.c] += dbeta[p];
    }
  }
  return gx;
}

void InstanceNorm::collect_parameters(ParamList& out) const {
  out.push_back(gamma_);
  out.push_back(beta_);
}

std::string InstanceNorm::describe() const { return "inorm(" + std::to_string(channels_) + ")"; }

// ------------------------------------------------------------ Activation

Tensor ActivationLayer::forward(const Tensor& x) {
  Tensor y(x.shape());
  const float* src = x.data();
  float* dst = y.data();
  const std::size_t n = x.size();
  switch (act_) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] > 0.0f ? src[i] : 0.0f;
      break;
    case Activation::leaky_relu:
      for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] > 0.0f ? src[i] : slope_ * src[i];
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) dst[i] = std::tanh(src[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) dst[i] = 1.0f / (1.0f + std::exp(-src[i]));
      break;
  }
  if (act_ == Activation::relu || act_ == Activation::leaky_relu) {
    input_ = x;
  } else {
    output_ = y;
  }
  cached_ = true;
  return y;
}

Tensor ActivationLayer::backward(const Tensor& grad_out) {
  if (!cached_) throw StateError("backward before forward in " + describe());
  Tensor gx(grad_out.shape());
  const float* g = grad_out.data();
  float* dst = gx.data();
  const std::size_t n = grad_out.size();
  switch (act_) {
    case Activation::relu: {
      const float* x = input_.data();
      for (std::size_t i = 0; i < n; ++i) dst[i] = x[i] > 0.0f ? g[i] : 0.0f;
      break;
    }
    case Activation::leaky_relu: {
      const float* x = input_.data();
      for (std::size_t i = 0; i < n; ++i) dst[i] = x[i] > 0.0f ? g[i] : slope_ * g[i];
      break;
    }
    case Activation::tanh: {
      const float* y = output_.data();
      for (std::size_t i = 0; i < n; ++i) dst[i] = g[i] * (1.0f - y[i] * y[i]);
      break;
    }
    case Activation::sigmoid: {
      const float* y = output_.data();
      for (std::size_t i = 0; i < n; ++i) dst[i] = g[i] * y[i] * (1.0f - y[i]);
      break;
    }
  }
  return gx;
}

std::string ActivationLayer::describe() const {
  switch (act_) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "lrelu(" + std::to_string(slope_).substr(0, 4) + ")";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "act";
}

// ---------------------------------------------------------------- Resize

Tensor Resize::forward(const Tensor& x) {
  cached_ = true;
  return dir_ == Direction::up ? kernels::upsample2x(x) : kernels::downsample2x(x);
}

Tensor Resize::backward(const Tensor& grad_out) {
  if (!cached_) throw StateError("backward before forward in " + describe());
  return dir_ == Direction::up ? kernels::upsample2x_backward(grad_out) : kernels::downsample2x_backward(grad_out);
}

Shape Resize::output_shape(const Shape& in) const {
  if (dir_ == Direction::up) return {in.n, in.c, in.h * 2, in.w * 2};
  if (in.h % 2 != 0 || in.w % 2 != 0) throw SizeError("resize down: odd spatial size " + in.str());
  return {in.n, in.c, in.h / 2, in.w / 2};
}

std::string Resize::describe() const { return dir_ == Direction::up ? "up2" : "down2"; }

// ------------------------------------------------------------ Sequential

Sequential& Sequential::add(LayerPtr layer) {
  layer->set_frozen(frozen_);
  layers_.push_back(std::move(layer));
  return *this;
}

Tensor Sequential::forward(const Tensor& x) {
  Tensor h = x;
  for (auto& layer : layers_) {
    h = layer->forward(h);
#ifndef NDEBUG
    check_finite(h, "forward of " + layer->describe());
#endif
  }
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    g = (*it)->backward(g);
#ifndef NDEBUG
    check_finite(g, "backward of " + (*it)->describe());
#endif
  }
  return g;
}

Shape Sequential::output_shape(const Shape& in) const {
  Shape s = in;
  for (const auto& layer : layers_) s = layer->output_shape(s);
  return s;
}

void Sequential::collect_parameters(ParamList& out) const {
  for (const auto& layer : layers_) layer->collect_parameters(out);
}

std::string Sequential::describe() const {
  std::string d = "seq[";
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i) d += ",";
    d += layers_[i]->describe();
  }
  return d + "]";
}

void Sequential::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& layer : layers_) layer->set_frozen(frozen);
}

LayerPtr Sequential::release_back() {
  if (layers_.empty()) throw StateError("release_back on empty Sequential");
  LayerPtr last = std::move(layers_.back());
  layers_.pop_back();
  return last;
}

// --------------------------------------------------------- ResidualBlock

ResidualBlock::ResidualBlock(const std::string& name, int channels, Rng& rng) : channels_(channels) {
  body_.emplace<Conv2d>(name + ".conv1", channels, channels, 3, 1, 1, rng);
  body_.emplace<InstanceNorm>(name + ".norm1", channels);
  body_.emplace<ActivationLayer>(Activation::relu);
  body_.emplace<Conv2d>(name + ".conv2", channels, channels, 3, 1, 1, rng);
  body_.emplace<InstanceNorm>(name + ".norm2", channels);
}

Tensor ResidualBlock::forward(const Tensor& x) {
  Tensor y = body_.forward(x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  return y;
}

Tensor ResidualBlock::backward(const Tensor& grad_out) {
  Tensor g = body_.backward(grad_out);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += grad_out[i];
  return g;
}

std::string ResidualBlock::describe() const { return "res(" + std::to_string(channels_) + ")"; }

void ResidualBlock::set_frozen(bool frozen) {
  frozen_ = frozen;
  body_.set_frozen(frozen);
}

// ---------------------------------------------------------------- factory

LayerPtr make_layer(const LayerSpec& spec, const std::string& name, Rng& rng) {
  switch (spec.kind) {
    case LayerKind::conv:
      return std::make_unique<Conv2d>(name, spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                                      spec.padding, rng);
    case LayerKind::transposed_conv:
      return std::make_unique<ConvTranspose2d>(name, spec.in_channels, spec.out_channels, spec.kernel,
                                               spec.stride, spec.padding, rng);
    case LayerKind::resize_conv: {
      auto seq = std::make_unique<Sequential>();
      seq->emplace<Resize>(Resize::Direction::up);
      seq->emplace<Conv2d>(name, spec.in_channels, spec.out_channels, spec.kernel, 1, spec.padding, rng);
      return seq;
    }
    case LayerKind::instance_norm:
      return std::make_unique<InstanceNorm>(name, spec.in_channels);
    case LayerKind::relu:
      return std::make_unique<ActivationLayer>(Activation::relu);
    case LayerKind::leaky_relu:
      return std::make_unique<ActivationLayer>(Activation::leaky_relu, 0.2f);
    case LayerKind::tanh:
      return std::make_unique<ActivationLayer>(Activation::tanh);
    case LayerKind::sigmoid:
      return std::make_unique<ActivationLayer>(Activation::sigmoid);
    case LayerKind::residual_block:
      return std::make_unique<ResidualBlock>(name, spec.in_channels, rng);
    case LayerKind::resize_up:
      return std::make_unique<Resize>(Resize::Direction::up);
    case LayerKind::resize_down:
      return std::make_unique<Resize>(Resize::Direction::down);
  }
  throw ConfigError("unknown layer kind");
}

// ------------------------------------------------------------------ Adam

void Adam::step(const ParamList& params) {
  for (const auto& p : params) {
    if (!p->grad.all_finite()) {
      throw NumericError("non-finite gradient in parameter " + p->name);
    }
  }
  for (const auto& p : params) {
    p->step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(p->step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(p->step));
    float* w = p->value.data();
    float* g = p->grad.data();
    float* m = p->m.data();
    float* v = p->v.data();
    const std::size_t n = p->value.size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = beta1_ * m[i] + (1.0f - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0f - beta2_) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      g[i] = 0.0f;
    }
  }
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) p->zero_grad();
}

}  // namespace pgsgan::nn
