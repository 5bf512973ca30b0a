#include "pgsgan/sketch.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "pgsgan/error.hpp"
#include "pgsgan/png_io.hpp"

namespace pgsgan::sketch {

void CannyParams::validate() const {
  if (!(gaussian_sigma > 0.0)) throw ConfigError("canny.gaussian_sigma must be positive");
  if (!(low_threshold > 0.0 && low_threshold < high_threshold && high_threshold <= 1.0)) {
    throw ConfigError("canny thresholds must satisfy 0 < low < high <= 1");
  }
}

namespace {

// Gradient step for each direction bin, pointing along +gradient.
constexpr std::array<std::array<int, 2>, 4> kStep = {{{0, 1}, {1, 1}, {1, 0}, {1, -1}}};  // (dy, dx)

const double kTan22 = std::tan(std::numbers::pi / 8.0);
const double kTan67 = std::tan(3.0 * std::numbers::pi / 8.0);

std::uint8_t quantize(double gx, double gy) {
  // Fold into the upper half plane; the bin is symmetric under negation.
  if (gy < 0.0 || (gy == 0.0 && gx < 0.0)) {
    gx = -gx;
    gy = -gy;
  }
  const double ax = std::abs(gx);
  if (gy <= kTan22 * ax) return 0;
  if (gy >= kTan67 * ax) return 2;
  return gx > 0.0 ? 1 : 3;
}

}  // namespace

EdgeMap canny(const Tensor& image, const CannyParams& params) { return canny(image, params, nullptr); }

EdgeMap canny(const Tensor& image, const CannyParams& params, CannyStages* stages) {
  params.validate();
  const Shape& s = image.shape();
  if (s.n != 1 || s.c != 1) throw SizeError("canny expects a single-channel image, got " + s.str());
  if (s.h < kGaussianWindow || s.w < kGaussianWindow) {
    throw SizeError("canny: image " + s.str() + " is smaller than the 5x5 Gaussian window");
  }
  const int h = s.h;
  const int w = s.w;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const auto idx = [w](int y, int x) { return static_cast<std::size_t>(y) * w + x; };

  std::array<double, kGaussianWindow> g{};
  double gsum = 0.0;
  for (int i = 0; i < kGaussianWindow; ++i) {
    const double d = i - kGaussianWindow / 2;
    g[i] = std::exp(-(d * d) / (2.0 * params.gaussian_sigma * params.gaussian_sigma));
    gsum += g[i];
  }
  for (double& v : g) v /= gsum;

  // Separable blur, replicated borders.
  std::vector<double> tmp(n);
  std::vector<double> smooth(n);
  const float* src = image.data();
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kGaussianWindow; ++i) {
        acc += g[i] * src[idx(y, std::clamp(x + i - 2, 0, w - 1))];
      }
      tmp[idx(y, x)] = acc;
    }
  }
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = 0; j < kGaussianWindow; ++j) {
        acc += g[j] * tmp[idx(std::clamp(y + j - 2, 0, h - 1), x)];
      }
      smooth[idx(y, x)] = acc;
    }
  }

  std::vector<double> mag(n);
  std::vector<std::uint8_t> dir(n);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    const int ym = std::max(y - 1, 0);
    const int yp = std::min(y + 1, h - 1);
    for (int x = 0; x < w; ++x) {
      const int xm = std::max(x - 1, 0);
      const int xp = std::min(x + 1, w - 1);
      const double gx = (smooth[idx(ym, xp)] + 2.0 * smooth[idx(y, xp)] + smooth[idx(yp, xp)]) -
                        (smooth[idx(ym, xm)] + 2.0 * smooth[idx(y, xm)] + smooth[idx(yp, xm)]);
      const double gy = (smooth[idx(yp, xm)] + 2.0 * smooth[idx(yp, x)] + smooth[idx(yp, xp)]) -
                        (smooth[idx(ym, xm)] + 2.0 * smooth[idx(ym, x)] + smooth[idx(ym, xp)]);
      mag[idx(y, x)] = std::sqrt(gx * gx + gy * gy);
      dir[idx(y, x)] = quantize(gx, gy);
    }
  }
  const double max_mag = *std::max_element(mag.begin(), mag.end());

  // Keep a pixel iff it beats its backward neighbour and ties-or-beats its
  // forward neighbour, so plateaus across the ridge stay one pixel wide.
  std::vector<std::uint8_t> nms(n, 0);
#pragma omp parallel for schedule(static)
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) {
      const double m = mag[idx(y, x)];
      if (m <= 0.0) continue;
      const auto [dy, dx] = kStep[dir[idx(y, x)]];
      const double fwd = mag[idx(y + dy, x + dx)];
      const double back = mag[idx(y - dy, x - dx)];
      if (m > back && m >= fwd) nms[idx(y, x)] = 1;
    }
  }

  EdgeMap edges(h, w, 0);
  if (max_mag > 0.0) {
    const double lo = params.low_threshold * max_mag;
    const double hi = params.high_threshold * max_mag;
    std::vector<int> stack;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (nms[idx(y, x)] && mag[idx(y, x)] >= hi && !edges(y, x)) {
          edges(y, x) = 1;
          stack.push_back(static_cast<int>(idx(y, x)));
        }
      }
    }
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int py = p / w;
      const int px = p % w;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = py + dy;
          const int nx = px + dx;
          if (!edges.contains(ny, nx) || edges(ny, nx)) continue;
          const std::size_t q = idx(ny, nx);
          if (nms[q] && mag[q] >= lo) {
            edges(ny, nx) = 1;
            stack.push_back(static_cast<int>(q));
          }
        }
      }
    }
  }

  if (stages) {
    stages->smoothed = std::move(smooth);
    stages->magnitude = std::move(mag);
    stages->direction = std::move(dir);
    stages->suppressed = std::move(nms);
    stages->max_magnitude = max_mag;
  }
  return edges;
}

CompositeLabel compose_label(const LabelMap& mask, const EdgeMap& edges) {
  if (mask.height != edges.height || mask.width != edges.width) {
    throw SizeError("compose_label: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                    " vs edges " + std::to_string(edges.height) + "x" + std::to_string(edges.width));
  }
  CompositeLabel label({1, kLabelChannels, mask.height, mask.width});
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const std::uint8_t c = mask(y, x);
      if (c > phantom::kFollicle) {
        throw DataError("compose_label: unknown class id " + std::to_string(c) + " at (" + std::to_string(y) +
                        "," + std::to_string(x) + ")");
      }
      label.at(0, kOvaryChannel, y, x) = c == phantom::kOvary ? 1.0f : 0.0f;
      label.at(0, kFollicleChannel, y, x) = c == phantom::kFollicle ? 1.0f : 0.0f;
      label.at(0, kSketchChannel, y, x) = (edges(y, x) && c == phantom::kBackground) ? 1.0f : 0.0f;
    }
  }
  return label;
}

CompositeLabel label_from_sample(const phantom::Sample& sample, const CannyParams& params) {
  return compose_label(sample.mask, canny(sample.image, params));
}

std::size_t sanitize_label(CompositeLabel& label) {
  const Shape& s = label.shape();
  if (s.n != 1 || s.c != kLabelChannels) throw SizeError("sanitize_label: expected (1,3,H,W), got " + s.str());
  std::size_t cleared = 0;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      float& ov = label.at(0, kOvaryChannel, y, x);
      float& fo = label.at(0, kFollicleChannel, y, x);
      float& sk = label.at(0, kSketchChannel, y, x);
      ov = ov >= 0.5f ? 1.0f : 0.0f;
      fo = fo >= 0.5f ? 1.0f : 0.0f;
      sk = sk >= 0.5f ? 1.0f : 0.0f;
      if (fo == 1.0f) ov = 0.0f;
      if (sk == 1.0f && (ov == 1.0f || fo == 1.0f)) {
        sk = 0.0f;
        ++cleared;
      }
    }
  }
  return cleared;
}

bool label_is_valid(const CompositeLabel& label) {
  const Shape& s = label.shape();
  if (s.n != 1 || s.c != kLabelChannels) return false;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const float ov = label.at(0, kOvaryChannel, y, x);
      const float fo = label.at(0, kFollicleChannel, y, x);
      const float sk = label.at(0, kSketchChannel, y, x);
      for (float v : {ov, fo, sk}) {
        if (v != 0.0f && v != 1.0f) return false;
      }
      if (ov == 1.0f && fo == 1.0f) return false;
      if (sk == 1.0f && (ov == 1.0f || fo == 1.0f)) return false;
    }
  }
  return true;
}

std::vector<std::uint8_t> encode_label_png(const CompositeLabel& label) {
  const Shape& s = label.shape();
  if (s.n != 1 || s.c != kLabelChannels) throw SizeError("encode_label_png: expected (1,3,H,W), got " + s.str());
  png::Raster r{s.w, s.h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(s.h) * s.w * 3)};
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      for (int c = 0; c < 3; ++c) {
        r.pixels[(static_cast<std::size_t>(y) * s.w + x) * 3 + c] = label.at(0, c, y, x) >= 0.5f ? 255 : 0;
      }
    }
  }
  return png::encode_rgb(r);
}

CompositeLabel decode_label_png(std::span<const std::uint8_t> bytes) {
  const png::Raster r = png::decode(bytes);
  // grey (1), grey+alpha (2), rgb (3), rgba (4): colour channels are the first 1 or 3.
  const int colour = r.channels >= 3 ? 3 : 1;
  CompositeLabel label({1, kLabelChannels, r.height, r.width});
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      for (int c = 0; c < colour; ++c) {
        label.at(0, c, y, x) = r.at(y, x, c) >= 128 ? 1.0f : 0.0f;
      }
    }
  }
  return label;
}

CompositeLabel mask_only(const CompositeLabel& label) {
  CompositeLabel out = label;
  const Shape& s = out.shape();
  for (int n = 0; n < s.n; ++n) {
    float* p = out.plane(n, kSketchChannel);
    std::fill(p, p + s.plane(), 0.0f);
  }
  return out;
}

}  // namespace pgsgan::sketch
