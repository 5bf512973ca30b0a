#include "pgsgan/fib.hpp"

#include <algorithm>
#include <cstring>

#include "pgsgan/error.hpp"

namespace pgsgan::fib {

std::string to_string(StepUnit unit) { return unit == StepUnit::per_step ? "per-step" : "per-epoch"; }

StepUnit step_unit_from_string(const std::string& s) {
  if (s == "per-step" || s == "per_step" || s == "step") return StepUnit::per_step;
  if (s == "per-epoch" || s == "per_epoch" || s == "epoch") return StepUnit::per_epoch;
  throw ConfigError("fib.step_unit: unknown value '" + s + "'");
}

void FibState::validate() const {
  if (!(ceiling >= 0.0 && ceiling <= 1.0)) throw ConfigError("fib ceiling must lie in [0,1]");
  if (!(alpha >= 0.0 && alpha <= ceiling)) throw ConfigError("fib alpha must lie in [0, ceiling]");
  if (!(increment > 0.0)) throw ConfigError("fib increment must be positive");
}

FibState alpha_update(FibState state) {
  state.updates += 1;
  state.alpha = std::min(static_cast<double>(state.updates) * state.increment, state.ceiling);
  return state;
}

// --------------------------------------------------------- FadeInBlock

FadeInBlock::FadeInBlock(std::string name, Direction direction, std::unique_ptr<nn::Sequential> main,
                         std::unique_ptr<nn::Sequential> skip, FibState state)
    : name_(std::move(name)), direction_(direction), main_(std::move(main)), skip_(std::move(skip)) {
  set_state(state);
}

void FadeInBlock::set_state(const FibState& s) {
  s.validate();
  state_ = s;
}

Tensor FadeInBlock::forward(const Tensor& x) {
  if (direction_ == Direction::down && (x.shape().h % 2 != 0 || x.shape().w % 2 != 0)) {
    throw SizeError(name_ + ": FIB-D input " + x.shape().str() + " is not divisible by 2");
  }
  const Tensor m = main_->forward(x);
  Tensor out = skip_->forward(x);
  if (!(m.shape() == out.shape())) {
    throw SizeError(name_ + ": main path " + m.shape().str() + " and skip path " + out.shape().str() +
                    " disagree");
  }
  const float a = static_cast<float>(state_.alpha);
  const float b = 1.0f - a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * m[i] + b * out[i];
  cached_ = true;
  return out;
}

Tensor FadeInBlock::backward(const Tensor& grad_out) {
  if (!cached_) throw StateError("backward before forward in " + name_);
  const float a = static_cast<float>(state_.alpha);
  Tensor gm = grad_out;
  Tensor gs = grad_out;
  for (float& v : gm.values()) v *= a;
  for (float& v : gs.values()) v *= 1.0f - a;
  Tensor gx = main_->backward(gm);
  const Tensor gx_skip = skip_->backward(gs);
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gx_skip[i];
  return gx;
}

Shape FadeInBlock::output_shape(const Shape& in) const { return skip_->output_shape(in); }

void FadeInBlock::collect_parameters(nn::ParamList& out) const {
  main_->collect_parameters(out);
  skip_->collect_parameters(out);
}

nn::ParamList FadeInBlock::main_parameters() const {
  nn::ParamList out;
  main_->collect_parameters(out);
  return out;
}

std::string FadeInBlock::describe() const {
  return std::string(direction_ == Direction::down ? "fibD" : "fibU") + "{" + main_->describe() + "|" +
         skip_->describe() + "}";
}

void FadeInBlock::set_frozen(bool frozen) {
  frozen_ = frozen;
  main_->set_frozen(frozen);
  skip_->set_frozen(frozen);
}

// --------------------------------------------------------- ChannelAdapt

Tensor ChannelAdapt::forward(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c != in_) throw SizeError("channel adapt: expected " + std::to_string(in_) + " channels, got " + s.str());
  if (in_ == out_) return x;
  Tensor y({s.n, out_, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    for (int o = 0; o < out_; ++o) {
      std::memcpy(y.plane(n, o), x.plane(n, o % in_), s.plane() * sizeof(float));
    }
  }
  return y;
}

Tensor ChannelAdapt::backward(const Tensor& grad_out) {
  if (in_ == out_) return grad_out;
  const Shape& s = grad_out.shape();
  Tensor gx({s.n, in_, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    for (int o = 0; o < out_; ++o) {
      const float* src = grad_out.plane(n, o);
      float* dst = gx.plane(n, o % in_);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] += src[i];
    }
  }
  return gx;
}

std::string ChannelAdapt::describe() const {
  return "adapt(" + std::to_string(in_) + "->" + std::to_string(out_) + ")";
}

// ------------------------------------------------------------ builders

std::unique_ptr<FadeInBlock> make_fib_down(const std::string& name, int in_channels, int hidden,
                                           int out_channels, FibState state, nn::Rng& rng) {
  auto main = std::make_unique<nn::Sequential>();
  main->emplace<nn::Conv2d>(name + ".main.conv1", in_channels, hidden, 3, 1, 1, rng);
  main->emplace<nn::ActivationLayer>(nn::Activation::leaky_relu, 0.2f);
  main->emplace<nn::Conv2d>(name + ".main.conv2", hidden, out_channels, 3, 1, 1, rng);
  main->emplace<nn::ActivationLayer>(nn::Activation::leaky_relu, 0.2f);
  main->emplace<nn::Resize>(nn::Resize::Direction::down);

  auto skip = std::make_unique<nn::Sequential>();
  skip->emplace<nn::Resize>(nn::Resize::Direction::down);
  skip->emplace<ChannelAdapt>(in_channels, out_channels);
  return std::make_unique<FadeInBlock>(name, Direction::down, std::move(main), std::move(skip), state);
}

std::unique_ptr<FadeInBlock> make_fib_up(const std::string& name, int channels, const nn::Conv2d& to_image,
                                         std::unique_ptr<nn::Sequential> old_head, FibState state,
                                         nn::Rng& rng) {
  const auto& g = to_image.geometry();
  if (g.in_channels != channels) throw SizeError(name + ": to-image conv expects other channel count");
  auto main = std::make_unique<nn::Sequential>();
  main->emplace<nn::Resize>(nn::Resize::Direction::up);
  main->emplace<nn::Conv2d>(name + ".main.conv1", channels, channels, 3, 1, 1, rng);
  main->emplace<nn::ActivationLayer>(nn::Activation::leaky_relu, 0.2f);
  main->emplace<nn::Conv2d>(name + ".main.conv2", channels, channels, 3, 1, 1, rng);
  main->emplace<nn::ActivationLayer>(nn::Activation::leaky_relu, 0.2f);
  main->emplace<nn::Conv2d>(to_image.weight(), to_image.bias(), g.kernel, g.stride, g.pad);
  main->emplace<nn::ActivationLayer>(nn::Activation::tanh);

  old_head->emplace<nn::Resize>(nn::Resize::Direction::up);
  return std::make_unique<FadeInBlock>(name, Direction::up, std::move(main), std::move(old_head), state);
}

}  // namespace pgsgan::fib
