#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgsgan/fib.hpp"
#include "pgsgan/nn.hpp"

namespace pgsgan::sgan {

enum class UpsampleMode { resize_conv, transposed_conv };

struct GeneratorConfig {
  int input_channels = 3;
  int base_width = 16;
  int n_downsample = 2;
  int n_residual_blocks = 4;
  int output_channels = 1;
  UpsampleMode upsample = UpsampleMode::resize_conv;

  static GeneratorConfig desk() { return {}; }
  static GeneratorConfig full() { return {3, 64, 2, 10, 1, UpsampleMode::resize_conv}; }
  void validate() const;
};

struct DiscriminatorConfig {
  int input_channels = 4;  // label channels + image
  int kernel = 4;
  int padding = 1;
  // Hidden widths; the final layer always has one output channel.
  std::vector<int> widths{16, 32, 64};
  // One stride per layer including the final one.
  std::vector<int> strides{2, 2, 1, 1};

  static DiscriminatorConfig desk() { return {}; }
  static DiscriminatorConfig full() { return {4, 4, 1, {64, 128, 256, 512}, {2, 2, 2, 1, 1}}; }
  void validate() const;
  // Side of the patch grid produced for a square input of side `input`.
  int grid_size(int input) const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);
void to_json(nlohmann::json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::json& j, DiscriminatorConfig& c);

// De-duplicates shared parameters, preserving first-seen order.
nn::ParamList unique_parameters(const nn::ParamList& params);

// Encoder-decoder generator with a residual-block bottleneck:
//   conv7 -> n_downsample x (conv3 s2) -> residual blocks -> n_downsample x up
//   -> to-image conv7 -> tanh
// After growth a FIB-D sits before the trunk and a FIB-U replaces the head.
class Generator {
 public:
  Generator(const GeneratorConfig& config, int resolution, std::uint64_t seed);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);

  // Adds the FIB-D at the input and the FIB-U before the output.
  void grow(const fib::FibState& state);
  bool grown() const { return in_fib_ != nullptr; }
  int resolution() const { return grown() ? base_resolution_ * 2 : base_resolution_; }
  int base_resolution() const { return base_resolution_; }
  const GeneratorConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  nn::ParamList parameters() const;
  nn::ParamList trunk_parameters() const;
  std::vector<fib::FadeInBlock*> fade_in_blocks();
  std::vector<const fib::FadeInBlock*> fade_in_blocks() const;
  std::string describe() const;
  void set_frozen(bool frozen);

 private:
  GeneratorConfig config_;
  int base_resolution_;
  std::uint64_t seed_;
  std::unique_ptr<fib::FadeInBlock> in_fib_;
  nn::Sequential trunk_;
  std::unique_ptr<nn::Sequential> head_;  // before growth
  nn::Conv2d* to_image_ = nullptr;
  std::unique_ptr<fib::FadeInBlock> out_fib_;  // after growth
};

// Conditional PatchGAN: the label and the image are concatenated on channels
// and mapped to a grid of patch probabilities.
class Discriminator {
 public:
  Discriminator(const DiscriminatorConfig& config, int resolution, std::uint64_t seed);

  Tensor forward(const Tensor& label, const Tensor& image);
  // Returns dL/d(image); label gradients are discarded.
  Tensor backward(const Tensor& grad_out);

  void grow(const fib::FibState& state);
  bool grown() const { return in_fib_ != nullptr; }
  int resolution() const { return grown() ? base_resolution_ * 2 : base_resolution_; }
  int base_resolution() const { return base_resolution_; }
  const DiscriminatorConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  int grid_size() const;

  nn::ParamList parameters() const;
  nn::ParamList trunk_parameters() const;
  std::vector<fib::FadeInBlock*> fade_in_blocks();
  std::vector<const fib::FadeInBlock*> fade_in_blocks() const;
  std::string describe() const;
  void set_frozen(bool frozen);
  // Last layer (the one producing the grid logits).
  nn::Conv2d& final_conv() { return *final_conv_; }

 private:
  DiscriminatorConfig config_;
  int base_resolution_;
  std::uint64_t seed_;
  std::unique_ptr<fib::FadeInBlock> in_fib_;
  nn::Sequential trunk_;
  nn::Conv2d* final_conv_ = nullptr;
  int label_channels_ = 0;
};

struct LossReport {
  double d_loss = 0.0;
  double g_adv_loss = 0.0;
  double g_l1_loss = 0.0;
  double g_total = 0.0;
};

enum class AdversarialForm { non_saturating, saturating };

inline constexpr double kLogClamp = 1e-7;

struct DiscriminatorLoss {
  double loss = 0.0;
  Tensor grad_real;
  Tensor grad_fake;
};

struct GeneratorLoss {
  double adversarial = 0.0;
  double l1 = 0.0;
  double total = 0.0;
  Tensor grad_d_fake;  // d(adversarial)/d(d_fake)
  Tensor grad_image;   // lambda * d(l1)/d(g_x)
};

// -mean(log d_real) - mean(log(1 - d_fake)); logs clamped at 1e-7.
DiscriminatorLoss discriminator_loss(const Tensor& d_real, const Tensor& d_fake);
// Non-saturating: -mean(log d_fake). Saturating: mean(log(1 - d_fake)).
GeneratorLoss generator_loss(const Tensor& d_fake, const Tensor& y, const Tensor& g_x, double lambda,
                             AdversarialForm form = AdversarialForm::non_saturating);
LossReport compute_losses(const Tensor& d_real, const Tensor& d_fake, const Tensor& y, const Tensor& g_x,
                          double lambda, AdversarialForm form = AdversarialForm::non_saturating);

struct TrainOptions {
  double lambda = 100.0;
  float lr_g = 1e-3f;
  float lr_d = 1e-4f;
  AdversarialForm form = AdversarialForm::non_saturating;
};

// One training batch. The generator sees `g_label`; the discriminator judges
// (`d_label`, `d_real`) against (`d_label`, fake). When the generator runs at
// half the discriminator's resolution the fake is nearest-upsampled before D.
// `g_real` is the target for the L1 term at the generator's resolution.
struct Batch {
  Tensor g_label;
  Tensor g_real;
  Tensor d_label;
  Tensor d_real;
};

// Alternating update: a D step on (real, detached fake), then a G step
// through the updated D. Returns the losses evaluated before each update.
LossReport train_step(Generator& g, Discriminator& d, const Batch& batch, const TrainOptions& options,
                      nn::Adam& opt_g, nn::Adam& opt_d);

}  // namespace pgsgan::sgan
