#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pgsgan/phantom.hpp"
#include "pgsgan/tensor.hpp"

namespace pgsgan::sketch {

struct CannyParams {
  double gaussian_sigma = 1.4;  // 5x5 window
  // Fractions of the image's maximum gradient magnitude.
  double low_threshold = 0.10;
  double high_threshold = 0.25;

  void validate() const;
};

using EdgeMap = Grid<std::uint8_t>;

// Intermediate stages, exposed so tests can compare stage by stage.
struct CannyStages {
  std::vector<double> smoothed;
  std::vector<double> magnitude;
  std::vector<std::uint8_t> direction;  // 0: 0deg, 1: 45deg, 2: 90deg, 3: 135deg
  std::vector<std::uint8_t> suppressed;  // survivors of non-maximum suppression
  double max_magnitude = 0.0;
};

inline constexpr int kGaussianWindow = 5;

// Gaussian smoothing, Sobel gradients, 4-bin direction quantization,
// non-maximum suppression, and 8-connected double-threshold hysteresis.
EdgeMap canny(const Tensor& image, const CannyParams& params = {});
EdgeMap canny(const Tensor& image, const CannyParams& params, CannyStages* stages);

inline constexpr int kLabelChannels = 3;
enum LabelChannel : int { kOvaryChannel = 0, kFollicleChannel = 1, kSketchChannel = 2 };

// (1,3,H,W) tensor of {0,1}: [ovary one-hot, follicle one-hot, background sketch].
using CompositeLabel = Tensor;

CompositeLabel compose_label(const LabelMap& mask, const EdgeMap& edges);
CompositeLabel label_from_sample(const phantom::Sample& sample, const CannyParams& params = {});

// Forces the label invariants in place: binarizes at 0.5, makes the mask
// channels exclusive (follicle wins) and clears the sketch under the mask.
// Returns the number of sketch pixels that were cleared.
std::size_t sanitize_label(CompositeLabel& label);
// True when the label already satisfies every invariant.
bool label_is_valid(const CompositeLabel& label);

// RGB PNG, R = ovary, G = follicle, B = sketch, 255 = on.
std::vector<std::uint8_t> encode_label_png(const CompositeLabel& label);
// Accepts RGB, RGBA, grey and grey+alpha; channels >= 128 are on. Missing
// channels decode as 0. Does not sanitize.
CompositeLabel decode_label_png(std::span<const std::uint8_t> bytes);

// Drops the sketch channel (mask-only ablation input).
CompositeLabel mask_only(const CompositeLabel& label);

}  // namespace pgsgan::sketch
