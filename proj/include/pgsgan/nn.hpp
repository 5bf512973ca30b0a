#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "pgsgan/kernels.hpp"
#include "pgsgan/tensor.hpp"

namespace pgsgan::nn {

using Rng = std::mt19937_64;

// A learnable tensor with its gradient and Adam moments. Layers hold
// parameters through shared_ptr so a tensor keeps its identity when the
// network that owns it grows, and so two layers can share weights.
struct Parameter {
  Parameter(std::string name, Shape shape);

  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m;
  Tensor v;
  std::int64_t step = 0;

  void zero_grad() { grad.fill(0.0f); }
};

using ParamPtr = std::shared_ptr<Parameter>;
using ParamList = std::vector<ParamPtr>;

std::size_t count_values(const ParamList& params);

class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor forward(const Tensor& x) = 0;
  // Accumulates parameter gradients (unless frozen) and returns dL/dx.
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual void collect_parameters(ParamList& /*out*/) const {}
  // Stable one-line architecture description, folded into checkpoint hashes.
  virtual std::string describe() const = 0;

  // Frozen layers skip parameter-gradient accumulation; input gradients still flow.
  virtual void set_frozen(bool frozen) { frozen_ = frozen; }
  bool frozen() const { return frozen_; }

 protected:
  bool frozen_ = false;
};

using LayerPtr = std::unique_ptr<Layer>;

enum class LayerKind {
  conv,
  transposed_conv,
  resize_conv,
  instance_norm,
  relu,
  leaky_relu,
  tanh,
  sigmoid,
  residual_block,
  resize_up,
  resize_down,
};

std::string to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int in_channels = 0;
  int out_channels = 0;
};

// Spatial output size of a convolution: floor((in + 2p - k) / s) + 1.
constexpr int conv_output_size(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

class Conv2d final : public Layer {
 public:
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int pad,
         Rng& rng, bool bias = true);
  // Shares weight and bias with another convolution.
  Conv2d(ParamPtr weight, ParamPtr bias, int kernel, int stride, int pad);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect_parameters(ParamList& out) const override;
  std::string describe() const override;

  const kernels::ConvGeometry& geometry() const { return geom_; }
  const ParamPtr& weight() const { return weight_; }
  const ParamPtr& bias() const { return bias_; }

 private:
  kernels::ConvGeometry geom_;
  ParamPtr weight_;
  ParamPtr bias_;
  Shape in_shape_{};
  std::vector<float> cols_;
  bool cached_ = false;
};

class ConvTranspose2d final : public Layer {
 public:
  ConvTranspose2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride,
                  int pad, Rng& rng);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect_parameters(ParamList& out) const override;
  std::string describe() const override;

 private:
  kernels::ConvGeometry geom_;
  ParamPtr weight_;
  ParamPtr bias_;
  Tensor input_;
  bool cached_ = false;
};

// Per-(sample, channel) normalization over H x W with a learnable affine.
class InstanceNorm final : public Layer {
 public:
  InstanceNorm(const std::string& name, int channels, float eps = 1e-5f);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override { return in; }
  void collect_parameters(ParamList& out) const override;
  std::string describe() const override;

  // Output before the affine transform of the last forward pass.
  const Tensor& normalized() const { return xhat_; }

 private:
  int channels_;
  float eps_;
  ParamPtr gamma_;
  ParamPtr beta_;
  Tensor xhat_;
  std::vector<float> inv_std_;
  bool cached_ = false;
};

enum class Activation { relu, leaky_relu, tanh, sigmoid };

class ActivationLayer final : public Layer {
 public:
  explicit ActivationLayer(Activation act, float slope = 0.2f) : act_(act), slope_(slope) {}

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override { return in; }
  std::string describe() const override;

 private:
  Activation act_;
  float slope_;
  Tensor input_;
  Tensor output_;
  bool cached_ = false;
};

class Resize final : public Layer {
 public:
  enum class Direction { up, down };
  explicit Resize(Direction dir) : dir_(dir) {}

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  std::string describe() const override;

 private:
  Direction dir_;
  bool cached_ = false;
};

class Sequential : public Layer {
 public:
  Sequential() = default;

  Sequential& add(LayerPtr layer);
  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    add(std::move(layer));
    return ref;
  }

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect_parameters(ParamList& out) const override;
  std::string describe() const override;
  void set_frozen(bool frozen) override;

  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_.at(i); }
  LayerPtr release_back();

 private:
  std::vector<LayerPtr> layers_;
};

// x + body(x), body = conv3-norm-relu-conv3-norm.
class ResidualBlock final : public Layer {
 public:
  ResidualBlock(const std::string& name, int channels, Rng& rng);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override { return in; }
  void collect_parameters(ParamList& out) const override { body_.collect_parameters(out); }
  std::string describe() const override;
  void set_frozen(bool frozen) override;

 private:
  int channels_;
  Sequential body_;
};

// Builds a layer from its spec. resize_conv is nearest x2 upsampling followed
// by a stride-1 convolution.
LayerPtr make_layer(const LayerSpec& spec, const std::string& name, Rng& rng);

// Adam with bias correction; moments and step counts live on each Parameter.
class Adam {
 public:
  explicit Adam(float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Throws NumericError naming the first parameter with a non-finite gradient.
  // Gradients are zeroed afterwards.
  void step(const ParamList& params);

  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }

 private:
  float lr_;
  float beta1_;
  float beta2_;
  float eps_;
};

void zero_grads(const ParamList& params);

// Gaussian(0, 0.02) weights, zero biases.
constexpr float kInitStd = 0.02f;

}  // namespace pgsgan::nn
