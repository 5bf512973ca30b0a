#include "pgsgan/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "pgsgan/error.hpp"
#include "pgsgan/sketch.hpp"

namespace pgsgan::metrics {

FeatureExtractor::FeatureExtractor(std::uint64_t seed) : seed_(seed) {
  std::mt19937_64 rng(seed);
  int in = 1;
  for (int out : {16, 32, 64}) {
    Stage s;
    s.geom = {in, out, 3, 2, 1};
    const int fan_in = in * 9;
    std::normal_distribution<float> dist(0.0f, 1.0f / std::sqrt(static_cast<float>(fan_in)));
    s.weight.resize(static_cast<std::size_t>(out) * fan_in);
    for (float& w : s.weight) w = dist(rng);
    s.bias.assign(out, 0.0f);
    stages_.push_back(std::move(s));
    in = out;
  }
}

Features FeatureExtractor::extract(const Tensor& images) const {
  if (images.shape().c != 1) throw SizeError("feature extractor expects (N,1,H,W), got " + images.shape().str());
  Tensor h = images;
  std::vector<float> cols;
  for (const Stage& s : stages_) {
    h = kernels::conv2d_forward(h, s.weight, s.bias, s.geom, cols);
    for (float& v : h.values()) v = v > 0.0f ? v : 0.2f * v;
  }
  const Shape& s = h.shape();
  Features f(s.n, s.c);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* p = h.plane(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      f(n, c) = acc / static_cast<double>(s.plane());
    }
  }
  return f;
}

Features FeatureExtractor::extract(const std::vector<Tensor>& images) const {
  if (images.empty()) return Features(0, kFeatureDim);
  return extract(stack_batch(images));
}

namespace {

struct Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

Moments moments(const Features& f) {
  Moments m;
  m.mean = f.colwise().mean().transpose();
  const Eigen::MatrixXd centered = f.rowwise() - m.mean.transpose();
  m.cov = centered.transpose() * centered / static_cast<double>(f.rows() - 1);
  m.cov += kFidRidge * Eigen::MatrixXd::Identity(f.cols(), f.cols());
  return m;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

void check_features(const Features& a, const Features& b, const char* who) {
  if (a.rows() < 2 || b.rows() < 2) {
    throw DataError(std::string(who) + " needs at least 2 samples per set, got " + std::to_string(a.rows()) +
                    " and " + std::to_string(b.rows()));
  }
  if (a.cols() != b.cols()) throw SizeError(std::string(who) + ": feature dimensions differ");
}

}  // namespace

double fid(const Features& real, const Features& synth) {
  check_features(real, synth, "fid");
  const Moments r = moments(real);
  const Moments s = moments(synth);
  const Eigen::MatrixXd root_r = sqrt_psd(r.cov);
  Eigen::MatrixXd inner = root_r * s.cov * root_r;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (r.mean - s.mean).squaredNorm() + r.cov.trace() + s.cov.trace() - 2.0 * tr_sqrt;
  return std::max(value, 0.0);
}

double kid(const Features& real, const Features& synth) {
  check_features(real, synth, "kid");
  const double d = static_cast<double>(real.cols());
  const auto kernel = [d](const Eigen::MatrixXd& gram) {
    return ((gram.array() / d + 1.0).cube()).matrix();
  };
  const Eigen::MatrixXd kxx = kernel(real * real.transpose());
  const Eigen::MatrixXd kyy = kernel(synth * synth.transpose());
  const Eigen::MatrixXd kxy = kernel(real * synth.transpose());
  const double m = static_cast<double>(real.rows());
  const double n = static_cast<double>(synth.rows());
  const double sxx = kxx.sum() - kxx.trace();
  const double syy = kyy.sum() - kyy.trace();
  return sxx / (m * (m - 1.0)) + syy / (n * (n - 1.0)) - 2.0 * kxy.sum() / (m * n);
}

// ------------------------------------------------------------------ MS-SSIM

namespace {

constexpr std::array<double, 5> kMsWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;
constexpr int kMinScaleSide = 16;

struct Plane {
  int h = 0;
  int w = 0;
  std::vector<double> v;
  double operator()(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

Plane to_plane(const Tensor& t) {
  const Shape& s = t.shape();
  Plane p{s.h, s.w, std::vector<double>(t.values().begin(), t.values().end())};
  return p;
}

Plane halve(const Plane& p) {
  Plane out{p.h / 2, p.w / 2, {}};
  out.v.resize(static_cast<std::size_t>(out.h) * out.w);
  for (int y = 0; y < out.h; ++y) {
    for (int x = 0; x < out.w; ++x) {
      out.v[static_cast<std::size_t>(y) * out.w + x] =
          0.25 * (p(2 * y, 2 * x) + p(2 * y, 2 * x + 1) + p(2 * y + 1, 2 * x) + p(2 * y + 1, 2 * x + 1));
    }
  }
  return out;
}

// Valid-mode separable Gaussian filtering.
Plane filter(const Plane& p, const std::array<double, kWindow>& g) {
  Plane tmp{p.h, p.w - kWindow + 1, {}};
  tmp.v.resize(static_cast<std::size_t>(tmp.h) * tmp.w);
  for (int y = 0; y < tmp.h; ++y) {
    for (int x = 0; x < tmp.w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kWindow; ++i) acc += g[i] * p(y, x + i);
      tmp.v[static_cast<std::size_t>(y) * tmp.w + x] = acc;
    }
  }
  Plane out{p.h - kWindow + 1, tmp.w, {}};
  out.v.resize(static_cast<std::size_t>(out.h) * out.w);
  for (int y = 0; y < out.h; ++y) {
    for (int x = 0; x < out.w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kWindow; ++i) acc += g[i] * tmp(y + i, x);
      out.v[static_cast<std::size_t>(y) * out.w + x] = acc;
    }
  }
  return out;
}

Plane product(const Plane& a, const Plane& b) {
  Plane out{a.h, a.w, a.v};
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

// Mean luminance-contrast-structure (ssim) and contrast-structure (cs).
std::pair<double, double> ssim_terms(const Plane& a, const Plane& b, double c1, double c2,
                                     const std::array<double, kWindow>& g) {
  const Plane mu_a = filter(a, g);
  const Plane mu_b = filter(b, g);
  const Plane aa = filter(product(a, a), g);
  const Plane bb = filter(product(b, b), g);
  const Plane ab = filter(product(a, b), g);
  double ssim = 0.0;
  double cs = 0.0;
  for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
    const double ma = mu_a.v[i];
    const double mb = mu_b.v[i];
    const double va = aa.v[i] - ma * ma;
    const double vb = bb.v[i] - mb * mb;
    const double cov = ab.v[i] - ma * mb;
    const double c = (2.0 * cov + c2) / (va + vb + c2);
    cs += c;
    ssim += c * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
  }
  const double n = static_cast<double>(mu_a.v.size());
  return {ssim / n, cs / n};
}

}  // namespace

int ms_ssim_scales(int height, int width) {
  const int side = std::min(height, width);
  if (side < kMinScaleSide) return 0;
  int s = 1;
  while (s < 5 && (side >> s) >= kMinScaleSide) ++s;
  return s;
}

double ms_ssim(const Tensor& a, const Tensor& b, double data_range) {
  if (!(a.shape() == b.shape())) throw SizeError("ms_ssim: shapes " + a.shape().str() + " and " + b.shape().str());
  const Shape& s = a.shape();
  if (s.n != 1 || s.c != 1) throw SizeError("ms_ssim expects single planes, got " + s.str());
  const int scales = ms_ssim_scales(s.h, s.w);
  if (scales == 0) throw SizeError("ms_ssim: image " + s.str() + " is smaller than 16 pixels on a side");

  std::array<double, kWindow> g{};
  double gsum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    g[i] = std::exp(-d * d / (2.0 * kWindowSigma * kWindowSigma));
    gsum += g[i];
  }
  for (double& v : g) v /= gsum;

  double wsum = 0.0;
  for (int i = 0; i < scales; ++i) wsum += kMsWeights[i];

  const double c1 = std::pow(0.01 * data_range, 2);
  const double c2 = std::pow(0.03 * data_range, 2);
  Plane pa = to_plane(a);
  Plane pb = to_plane(b);
  double result = 1.0;
  for (int i = 0; i < scales; ++i) {
    const auto [ssim, cs] = ssim_terms(pa, pb, c1, c2, g);
    const double term = i == scales - 1 ? ssim : cs;
    result *= std::pow(std::max(term, 0.0), kMsWeights[i] / wsum);
    if (i + 1 < scales) {
      pa = halve(pa);
      pb = halve(pb);
    }
  }
  return result;
}

// ------------------------------------------------------------ mask fidelity

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double mask_fidelity(const Tensor& synth, const Tensor& label) {
  const Shape& s = synth.shape();
  const Shape& l = label.shape();
  if (s.n != 1 || s.c != 1 || l.n != 1 || l.c != sketch::kLabelChannels || s.h != l.h || s.w != l.w) {
    throw SizeError("mask_fidelity: synth " + s.str() + " vs label " + l.str());
  }
  std::vector<double> region_values;
  std::vector<std::size_t> region;
  std::size_t follicle = 0;
  const float* ov = label.plane(0, sketch::kOvaryChannel);
  const float* fo = label.plane(0, sketch::kFollicleChannel);
  for (std::size_t i = 0; i < s.plane(); ++i) {
    if (ov[i] >= 0.5f || fo[i] >= 0.5f) {
      region.push_back(i);
      region_values.push_back(synth[i]);
    }
    if (fo[i] >= 0.5f) ++follicle;
  }
  if (region.empty()) return follicle == 0 ? 1.0 : 0.0;
  const double t = percentile(region_values, kMaskPercentile);
  std::size_t dark = 0;
  std::size_t overlap = 0;
  for (std::size_t i : region) {
    if (synth[i] < t) {
      ++dark;
      if (fo[i] >= 0.5f) ++overlap;
    }
  }
  if (follicle == 0) {
    return static_cast<double>(dark) <= kEmptyMaskTolerance * static_cast<double>(region.size()) ? 1.0 : 0.0;
  }
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(dark + follicle);
}

// ------------------------------------------------------------------- report

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{{"fid", r.fid},
                     {"kid_x100", r.kid_x100},
                     {"ms_ssim", r.ms_ssim},
                     {"mask_fidelity_dice", r.mask_fidelity_dice},
                     {"n_real", r.n_real},
                     {"n_synth", r.n_synth},
                     {"extractor_seed", r.extractor_seed}};
}

MetricReport evaluate(const std::vector<Tensor>& real, const std::vector<Tensor>& synth,
                      const std::vector<Tensor>& labels, const FeatureExtractor& extractor) {
  if (real.size() != synth.size() || real.size() != labels.size()) {
    throw SizeError("evaluate: real, synth and labels must pair up");
  }
  MetricReport r;
  r.n_real = static_cast<int>(real.size());
  r.n_synth = static_cast<int>(synth.size());
  r.extractor_seed = extractor.seed();
  const Features fr = extractor.extract(real);
  const Features fs = extractor.extract(synth);
  r.fid = fid(fr, fs);
  r.kid_x100 = 100.0 * kid(fr, fs);
  double ssim_sum = 0.0;
  double dice_sum = 0.0;
  for (std::size_t i = 0; i < real.size(); ++i) {
    ssim_sum += ms_ssim(real[i], synth[i]);
    dice_sum += mask_fidelity(synth[i], labels[i]);
  }
  r.ms_ssim = ssim_sum / static_cast<double>(real.size());
  r.mask_fidelity_dice = dice_sum / static_cast<double>(real.size());
  return r;
}

}  // namespace pgsgan::metrics
