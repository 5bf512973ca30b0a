#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pgsgan/kernels.hpp"
#include "pgsgan/tensor.hpp"

namespace pgsgan::metrics {

// One feature vector per row.
using Features = Eigen::MatrixXd;

inline constexpr std::uint64_t kExtractorSeed = 42;
inline constexpr int kFeatureDim = 64;

// Fixed random embedding: three conv3 s2 p1 + leaky-relu(0.2) stages
// (1 -> 16 -> 32 -> 64 channels), then global average pooling. Weights are
// N(0, 1/sqrt(fan_in)), biases zero.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(std::uint64_t seed = kExtractorSeed);

  // images: (N,1,H,W). Returns N x 64.
  Features extract(const Tensor& images) const;
  Features extract(const std::vector<Tensor>& images) const;
  std::uint64_t seed() const { return seed_; }

 private:
  struct Stage {
    kernels::ConvGeometry geom;
    std::vector<float> weight;
    std::vector<float> bias;
  };
  std::uint64_t seed_;
  std::vector<Stage> stages_;
};

inline constexpr double kFidRidge = 1e-6;

double fid(const Features& real, const Features& synth);
// Raw unbiased MMD^2 with k(a,b) = (a.b/d + 1)^3.
double kid(const Features& real, const Features& synth);

// Images are single planes (1,1,H,W) with values spanning `data_range`.
double ms_ssim(const Tensor& a, const Tensor& b, double data_range = 2.0);
int ms_ssim_scales(int height, int width);

inline constexpr double kMaskPercentile = 0.15;
inline constexpr double kEmptyMaskTolerance = 0.005;

// numpy-style linear-interpolated percentile, q in [0,1].
double percentile(std::vector<double> values, double q);
// Dice between the darkest 15% of the ovary region (ovary + follicle
// channels) of `synth` and the follicle channel of `label` (1,3,H,W).
double mask_fidelity(const Tensor& synth, const Tensor& label);

struct MetricReport {
  double fid = 0.0;
  double kid_x100 = 0.0;
  double ms_ssim = 0.0;
  double mask_fidelity_dice = 0.0;
  int n_real = 0;
  int n_synth = 0;
  std::uint64_t extractor_seed = kExtractorSeed;
};

void to_json(nlohmann::json& j, const MetricReport& r);

// real[i] and synth[i] share labels[i]. Images in [-1,1].
MetricReport evaluate(const std::vector<Tensor>& real, const std::vector<Tensor>& synth,
                      const std::vector<Tensor>& labels, const FeatureExtractor& extractor);

}  // namespace pgsgan::metrics
