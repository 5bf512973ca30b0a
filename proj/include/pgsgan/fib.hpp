#pragma once

#include <memory>
#include <string>

#include "pgsgan/nn.hpp"

// Fade-in blocks: a residual blend of a new convolutional path operating at
// the new resolution with a plain resize of the block input,
//
//   out = alpha * main(x) + (1 - alpha) * skip(x).
namespace pgsgan::fib {

enum class StepUnit { per_step, per_epoch };

std::string to_string(StepUnit unit);
StepUnit step_unit_from_string(const std::string& s);

inline constexpr double kDefaultIncrement = 1.0 / 30.0;
inline constexpr double kGeneratorCeiling = 0.5;
inline constexpr double kDiscriminatorCeiling = 1.0;

struct FibState {
  double alpha = 0.0;
  double increment = kDefaultIncrement;
  double ceiling = 1.0;
  StepUnit step_unit = StepUnit::per_step;
  // Number of alpha updates applied so far. alpha is recomputed from it so
  // that 30 increments of 1/30 land exactly on 1.0.
  long updates = 0;

  void validate() const;
};

// alpha <- min(alpha + increment, ceiling).
FibState alpha_update(FibState state);

enum class Direction { down, up };

class FadeInBlock final : public nn::Layer {
 public:
  FadeInBlock(std::string name, Direction direction, std::unique_ptr<nn::Sequential> main,
              std::unique_ptr<nn::Sequential> skip, FibState state);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect_parameters(nn::ParamList& out) const override;
  std::string describe() const override;
  void set_frozen(bool frozen) override;

  const std::string& name() const { return name_; }
  Direction direction() const { return direction_; }
  const FibState& state() const { return state_; }
  void set_state(const FibState& s);
  void update_alpha() { state_ = alpha_update(state_); }

  nn::Sequential& main_path() { return *main_; }
  nn::Sequential& skip_path() { return *skip_; }
  nn::ParamList main_parameters() const;

  // Evaluate one path alone (no caching guarantees for backward).
  Tensor main_forward(const Tensor& x) { return main_->forward(x); }
  Tensor skip_forward(const Tensor& x) { return skip_->forward(x); }

 private:
  std::string name_;
  Direction direction_;
  std::unique_ptr<nn::Sequential> main_;
  std::unique_ptr<nn::Sequential> skip_;
  FibState state_;
  bool cached_ = false;
};

// Fixed 1x1 projection: output channel o copies input channel o mod C_in.
// Identity when the channel counts match.
class ChannelAdapt final : public nn::Layer {
 public:
  ChannelAdapt(int in_channels, int out_channels) : in_(in_channels), out_(out_channels) {}

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override { return {in.n, out_, in.h, in.w}; }
  std::string describe() const override;

 private:
  int in_;
  int out_;
};

// FIB-D: main = conv3(in->hidden), lrelu, conv3(hidden->out), lrelu, avgpool2;
// skip = avgpool2 then ChannelAdapt(in->out).
std::unique_ptr<FadeInBlock> make_fib_down(const std::string& name, int in_channels, int hidden,
                                           int out_channels, FibState state, nn::Rng& rng);

// FIB-U at a generator output. `old_head` is the generator's to-image head
// (to-image conv followed by tanh) and becomes the skip path followed by a
// nearest x2 upsample. The main path upsamples the trunk features, runs two
// conv3+lrelu layers at the new resolution and maps them to an image with a
// second convolution sharing the head's to-image weights.
std::unique_ptr<FadeInBlock> make_fib_up(const std::string& name, int channels, const nn::Conv2d& to_image,
                                         std::unique_ptr<nn::Sequential> old_head, FibState state,
                                         nn::Rng& rng);

}  // namespace pgsgan::fib
