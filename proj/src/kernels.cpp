#include "pgsgan/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "pgsgan/error.hpp"

namespace pgsgan::kernels {

namespace {

constexpr int kMr = 6;
constexpr int kNr = 16;

using v8 = float __attribute__((vector_size(32)));

inline v8 load8(const float* p) {
  v8 v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void store8(float* p, v8 v) { std::memcpy(p, &v, sizeof(v)); }

// op(A) as row panels of kMr rows, each panel K x kMr, zero-padded.
void pack_a(bool trans, int m, int k, const float* a, int lda, float* out) {
  const int panels = (m + kMr - 1) / kMr;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < panels; ++p) {
    float* dst = out + static_cast<std::size_t>(p) * k * kMr;
    for (int kk = 0; kk < k; ++kk) {
      for (int r = 0; r < kMr; ++r) {
        const int row = p * kMr + r;
        float v = 0.0f;
        if (row < m) v = trans ? a[static_cast<std::size_t>(kk) * lda + row] : a[static_cast<std::size_t>(row) * lda + kk];
        dst[kk * kMr + r] = v;
      }
    }
  }
}

// op(B) as column panels of kNr columns, each panel K x kNr, zero-padded.
void pack_b(bool trans, int n, int k, const float* b, int ldb, float* out) {
  const int panels = (n + kNr - 1) / kNr;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < panels; ++p) {
    float* dst = out + static_cast<std::size_t>(p) * k * kNr;
    const int col0 = p * kNr;
    const int width = std::min(kNr, n - col0);
    for (int kk = 0; kk < k; ++kk) {
      float* row = dst + kk * kNr;
      if (!trans) {
        const float* src = b + static_cast<std::size_t>(kk) * ldb + col0;
        int j = 0;
        for (; j < width; ++j) row[j] = src[j];
        for (; j < kNr; ++j) row[j] = 0.0f;
      } else {
        int j = 0;
        for (; j < width; ++j) row[j] = b[static_cast<std::size_t>(col0 + j) * ldb + kk];
        for (; j < kNr; ++j) row[j] = 0.0f;
      }
    }
  }
}

void micro_kernel(int k, const float* ap, const float* bp, float* c, int ldc, int rows, int cols,
                  bool accumulate) {
  v8 acc[kMr][2] = {};
  for (int kk = 0; kk < k; ++kk) {
    const v8 b0 = load8(bp + kk * kNr);
    const v8 b1 = load8(bp + kk * kNr + 8);
    const float* a = ap + kk * kMr;
    for (int r = 0; r < kMr; ++r) {
      acc[r][0] += a[r] * b0;
      acc[r][1] += a[r] * b1;
    }
  }
  if (rows == kMr && cols == kNr) {
    for (int r = 0; r < kMr; ++r) {
      float* dst = c + static_cast<std::size_t>(r) * ldc;
      if (accumulate) {
        store8(dst, load8(dst) + acc[r][0]);
        store8(dst + 8, load8(dst + 8) + acc[r][1]);
      } else {
        store8(dst, acc[r][0]);
        store8(dst + 8, acc[r][1]);
      }
    }
    return;
  }
  float tile[kMr][kNr];
  for (int r = 0; r < kMr; ++r) {
    store8(tile[r], acc[r][0]);
    store8(tile[r] + 8, acc[r][1]);
  }
  for (int r = 0; r < rows; ++r) {
    float* dst = c + static_cast<std::size_t>(r) * ldc;
    for (int j = 0; j < cols; ++j) dst[j] = accumulate ? dst[j] + tile[r][j] : tile[r][j];
  }
}

// NCHW batch -> (C x N*H*W) matrix and back.
void to_channel_major(const Tensor& t, float* out) {
  const Shape& s = t.shape();
  const std::size_t plane = s.plane();
  const std::size_t row = static_cast<std::size_t>(s.n) * plane;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < s.c; ++c) {
    for (int n = 0; n < s.n; ++n) {
      std::memcpy(out + c * row + n * plane, t.plane(n, c), plane * sizeof(float));
    }
  }
}

void from_channel_major(const float* in, std::span<const float> bias, Tensor& t) {
  const Shape& s = t.shape();
  const std::size_t plane = s.plane();
  const std::size_t row = static_cast<std::size_t>(s.n) * plane;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < s.c; ++c) {
    const float b = bias.empty() ? 0.0f : bias[c];
    for (int n = 0; n < s.n; ++n) {
      const float* src = in + c * row + n * plane;
      float* dst = t.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] + b;
    }
  }
}

void check_weight(std::span<const float> weight, std::size_t expected, const char* who) {
  if (weight.size() != expected) {
    throw SizeError(std::string(who) + ": weight has " + std::to_string(weight.size()) +
                    " values, expected " + std::to_string(expected));
  }
}

void bias_grad(const float* gmat, int channels, std::size_t cols, std::span<float> grad_bias) {
  if (grad_bias.empty()) return;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    const float* row = gmat + c * cols;
    float s = 0.0f;
    for (std::size_t i = 0; i < cols; ++i) s += row[i];
    grad_bias[c] += s;
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda, const float* b,
          int ldb, float* c, int ldc, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate) {
      for (int i = 0; i < m; ++i) std::fill(c + static_cast<std::size_t>(i) * ldc, c + static_cast<std::size_t>(i) * ldc + n, 0.0f);
    }
    return;
  }
  const int row_panels = (m + kMr - 1) / kMr;
  const int col_panels = (n + kNr - 1) / kNr;
  std::vector<float> ap(static_cast<std::size_t>(row_panels) * kMr * k);
  std::vector<float> bp(static_cast<std::size_t>(col_panels) * kNr * k);
  pack_a(trans_a, m, k, a, lda, ap.data());
  pack_b(trans_b, n, k, b, ldb, bp.data());
  const int tiles = row_panels * col_panels;
#pragma omp parallel for schedule(static)
  for (int t = 0; t < tiles; ++t) {
    const int rp = t / col_panels;
    const int cp = t % col_panels;
    const int row0 = rp * kMr;
    const int col0 = cp * kNr;
    micro_kernel(k, ap.data() + static_cast<std::size_t>(rp) * kMr * k,
                 bp.data() + static_cast<std::size_t>(cp) * kNr * k,
                 c + static_cast<std::size_t>(row0) * ldc + col0, ldc, std::min(kMr, m - row0),
                 std::min(kNr, n - col0), accumulate);
  }
}

void im2col(const Tensor& x, const ConvGeometry& g, std::span<float> cols) {
  const Shape& s = x.shape();
  const int oh = g.out_size(s.h);
  const int ow = g.out_size(s.w);
  const std::size_t opix = static_cast<std::size_t>(oh) * ow;
  const std::size_t row_len = static_cast<std::size_t>(s.n) * opix;
  const int rows = s.c * g.kernel * g.kernel;
  if (cols.size() != rows * row_len) throw SizeError("im2col: buffer size mismatch");
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int c = r / (g.kernel * g.kernel);
    const int ky = (r / g.kernel) % g.kernel;
    const int kx = r % g.kernel;
    float* dst_row = cols.data() + r * row_len;
    for (int n = 0; n < s.n; ++n) {
      const float* src = x.plane(n, c);
      float* dst = dst_row + n * opix;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy * g.stride - g.pad + ky;
        float* drow = dst + oy * ow;
        if (iy < 0 || iy >= s.h) {
          std::fill(drow, drow + ow, 0.0f);
          continue;
        }
        const float* srow = src + static_cast<std::size_t>(iy) * s.w;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox * g.stride - g.pad + kx;
          drow[ox] = (ix >= 0 && ix < s.w) ? srow[ix] : 0.0f;
        }
      }
    }
  }
}

void col2im(std::span<const float> cols, const ConvGeometry& g, Tensor& x) {
  const Shape& s = x.shape();
  const int oh = g.out_size(s.h);
  const int ow = g.out_size(s.w);
  const std::size_t opix = static_cast<std::size_t>(oh) * ow;
  const std::size_t row_len = static_cast<std::size_t>(s.n) * opix;
  if (cols.size() != static_cast<std::size_t>(s.c) * g.kernel * g.kernel * row_len) {
    throw SizeError("col2im: buffer size mismatch");
  }
  const int planes = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const int n = p / s.c;
    const int c = p % s.c;
    float* dst = x.plane(n, c);
    std::fill(dst, dst + s.plane(), 0.0f);
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const int r = (c * g.kernel + ky) * g.kernel + kx;
        const float* src = cols.data() + r * row_len + n * opix;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= s.h) continue;
          float* drow = dst + static_cast<std::size_t>(iy) * s.w;
          const float* srow = src + oy * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < s.w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

Tensor conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias,
                      const ConvGeometry& g, std::vector<float>& cols) {
  const Shape& s = x.shape();
  if (s.c != g.in_channels) {
    throw SizeError("conv2d: input has " + std::to_string(s.c) + " channels, expected " +
                    std::to_string(g.in_channels));
  }
  check_weight(weight, static_cast<std::size_t>(g.out_channels) * g.patch(), "conv2d");
  const int oh = g.out_size(s.h);
  const int ow = g.out_size(s.w);
  if (oh <= 0 || ow <= 0) throw SizeError("conv2d: input " + s.str() + " too small for kernel");
  const std::size_t ncols = static_cast<std::size_t>(s.n) * oh * ow;
  cols.resize(static_cast<std::size_t>(g.patch()) * ncols);
  im2col(x, g, cols);
  std::vector<float> out(static_cast<std::size_t>(g.out_channels) * ncols);
  gemm(false, false, g.out_channels, static_cast<int>(ncols), g.patch(), weight.data(), g.patch(),
       cols.data(), static_cast<int>(ncols), out.data(), static_cast<int>(ncols), false);
  Tensor y({s.n, g.out_channels, oh, ow});
  from_channel_major(out.data(), bias, y);
  return y;
}

Tensor conv2d_backward(const Shape& x_shape, std::span<const float> cols, std::span<const float> weight,
                       const Tensor& grad_out, const ConvGeometry& g, std::span<float> grad_weight,
                       std::span<float> grad_bias, bool want_input_grad) {
  const Shape& gs = grad_out.shape();
  const std::size_t ncols = static_cast<std::size_t>(gs.n) * gs.plane();
  if (cols.size() != static_cast<std::size_t>(g.patch()) * ncols) {
    throw SizeError("conv2d_backward: cached columns do not match grad " + gs.str());
  }
  std::vector<float> gmat(static_cast<std::size_t>(g.out_channels) * ncols);
  to_channel_major(grad_out, gmat.data());
  if (!grad_weight.empty()) {
    gemm(false, true, g.out_channels, g.patch(), static_cast<int>(ncols), gmat.data(),
         static_cast<int>(ncols), cols.data(), static_cast<int>(ncols), grad_weight.data(), g.patch(),
         true);
  }
  bias_grad(gmat.data(), g.out_channels, ncols, grad_bias);
  if (!want_input_grad) return {};
  std::vector<float> dcols(static_cast<std::size_t>(g.patch()) * ncols);
  gemm(true, false, g.patch(), static_cast<int>(ncols), g.out_channels, weight.data(), g.patch(),
       gmat.data(), static_cast<int>(ncols), dcols.data(), static_cast<int>(ncols), false);
  Tensor gx(x_shape);
  col2im(dcols, g, gx);
  return gx;
}

namespace {
ConvGeometry adjoint(const ConvGeometry& g) {
  return {g.out_channels, g.in_channels, g.kernel, g.stride, g.pad};
}
}  // namespace

Tensor conv_transpose2d_forward(const Tensor& x, std::span<const float> weight,
                                std::span<const float> bias, const ConvGeometry& g) {
  const Shape& s = x.shape();
  if (s.c != g.in_channels) {
    throw SizeError("conv_transpose2d: input has " + std::to_string(s.c) + " channels, expected " +
                    std::to_string(g.in_channels));
  }
  const ConvGeometry adj = adjoint(g);
  check_weight(weight, static_cast<std::size_t>(g.in_channels) * adj.patch(), "conv_transpose2d");
  const std::size_t ncols = static_cast<std::size_t>(s.n) * s.plane();
  std::vector<float> xmat(static_cast<std::size_t>(s.c) * ncols);
  to_channel_major(x, xmat.data());
  std::vector<float> cols(static_cast<std::size_t>(adj.patch()) * ncols);
  gemm(true, false, adj.patch(), static_cast<int>(ncols), g.in_channels, weight.data(), adj.patch(),
       xmat.data(), static_cast<int>(ncols), cols.data(), static_cast<int>(ncols), false);
  Tensor y({s.n, g.out_channels, g.transposed_out_size(s.h), g.transposed_out_size(s.w)});
  col2im(cols, adj, y);
  if (!bias.empty()) {
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < g.out_channels; ++c) {
        float* p = y.plane(n, c);
        for (std::size_t i = 0; i < y.shape().plane(); ++i) p[i] += bias[c];
      }
    }
  }
  return y;
}

Tensor conv_transpose2d_backward(const Tensor& x, std::span<const float> weight, const Tensor& grad_out,
                                 const ConvGeometry& g, std::span<float> grad_weight,
                                 std::span<float> grad_bias, bool want_input_grad) {
  const Shape& s = x.shape();
  const ConvGeometry adj = adjoint(g);
  const std::size_t ncols = static_cast<std::size_t>(s.n) * s.plane();
  std::vector<float> gcols(static_cast<std::size_t>(adj.patch()) * ncols);
  im2col(grad_out, adj, gcols);
  if (!grad_bias.empty()) {
    const Shape& gs = grad_out.shape();
    for (int c = 0; c < gs.c; ++c) {
      float acc = 0.0f;
      for (int n = 0; n < gs.n; ++n) {
        const float* p = grad_out.plane(n, c);
        for (std::size_t i = 0; i < gs.plane(); ++i) acc += p[i];
      }
      grad_bias[c] += acc;
    }
  }
  std::vector<float> xmat(static_cast<std::size_t>(s.c) * ncols);
  to_channel_major(x, xmat.data());
  if (!grad_weight.empty()) {
    gemm(false, true, g.in_channels, adj.patch(), static_cast<int>(ncols), xmat.data(),
         static_cast<int>(ncols), gcols.data(), static_cast<int>(ncols), grad_weight.data(), adj.patch(),
         true);
  }
  if (!want_input_grad) return {};
  std::vector<float> gx_mat(static_cast<std::size_t>(s.c) * ncols);
  gemm(false, false, g.in_channels, static_cast<int>(ncols), adj.patch(), weight.data(), adj.patch(),
       gcols.data(), static_cast<int>(ncols), gx_mat.data(), static_cast<int>(ncols), false);
  Tensor gx(s);
  from_channel_major(gx_mat.data(), {}, gx);
  return gx;
}

Tensor upsample2x(const Tensor& x) {
  const Shape& s = x.shape();
  Tensor y({s.n, s.c, s.h * 2, s.w * 2});
  const int planes = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const float* src = x.plane(p / s.c, p % s.c);
    float* dst = y.plane(p / s.c, p % s.c);
    const int w2 = s.w * 2;
    for (int yy = 0; yy < s.h; ++yy) {
      float* r0 = dst + static_cast<std::size_t>(2 * yy) * w2;
      for (int xx = 0; xx < s.w; ++xx) {
        const float v = src[yy * s.w + xx];
        r0[2 * xx] = v;
        r0[2 * xx + 1] = v;
      }
      std::memcpy(r0 + w2, r0, w2 * sizeof(float));
    }
  }
  return y;
}

Tensor downsample2x(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw SizeError("downsample2x: odd spatial size " + s.str());
  }
  Tensor y({s.n, s.c, s.h / 2, s.w / 2});
  const int planes = s.n * s.c;
  const int h2 = s.h / 2;
  const int w2 = s.w / 2;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const float* src = x.plane(p / s.c, p % s.c);
    float* dst = y.plane(p / s.c, p % s.c);
    for (int yy = 0; yy < h2; ++yy) {
      const float* r0 = src + static_cast<std::size_t>(2 * yy) * s.w;
      const float* r1 = r0 + s.w;
      for (int xx = 0; xx < w2; ++xx) {
        dst[yy * w2 + xx] = 0.25f * ((r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]));
      }
    }
  }
  return y;
}

Tensor upsample2x_backward(const Tensor& grad_out) {
  const Shape& s = grad_out.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw SizeError("upsample2x_backward: odd spatial size " + s.str());
  }
  Tensor g({s.n, s.c, s.h / 2, s.w / 2});
  const int planes = s.n * s.c;
  const int h2 = s.h / 2;
  const int w2 = s.w / 2;
#pragma omp parallel for schedule(static)
  for (int p = 0; p < planes; ++p) {
    const float* src = grad_out.plane(p / s.c, p % s.c);
    float* dst = g.plane(p / s.c, p % s.c);
    for (int yy = 0; yy < h2; ++yy) {
      const float* r0 = src + static_cast<std::size_t>(2 * yy) * s.w;
      const float* r1 = r0 + s.w;
      for (int xx = 0; xx < w2; ++xx) {
        dst[yy * w2 + xx] = (r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]);
      }
    }
  }
  return g;
}

Tensor downsample2x_backward(const Tensor& grad_out) {
  Tensor g = upsample2x(grad_out);
  for (float& v : g.values()) v *= 0.25f;
  return g;
}

namespace reference {

Tensor conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias,
                      const ConvGeometry& g) {
  const Shape& s = x.shape();
  const int oh = g.out_size(s.h);
  const int ow = g.out_size(s.w);
  const int k = g.kernel;
  Tensor y({s.n, g.out_channels, oh, ow});
  for (int n = 0; n < s.n; ++n) {
    for (int o = 0; o < g.out_channels; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (int c = 0; c < s.c; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= s.h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= s.w) continue;
                acc += static_cast<double>(weight[((o * s.c + c) * k + ky) * k + kx]) * x.at(n, c, iy, ix);
              }
            }
          }
          y.at(n, o, oy, ox) = static_cast<float>(acc);
        }
      }
    }
  }
  return y;
}

void conv2d_backward(const Tensor& x, std::span<const float> weight, const Tensor& grad_out,
                     const ConvGeometry& g, std::span<float> grad_weight, std::span<float> grad_bias,
                     Tensor& grad_input) {
  const Shape& s = x.shape();
  const Shape& gs = grad_out.shape();
  const int k = g.kernel;
  grad_input = Tensor(s);
  for (int n = 0; n < s.n; ++n) {
    for (int o = 0; o < g.out_channels; ++o) {
      for (int oy = 0; oy < gs.h; ++oy) {
        for (int ox = 0; ox < gs.w; ++ox) {
          const float go = grad_out.at(n, o, oy, ox);
          if (!grad_bias.empty()) grad_bias[o] += go;
          for (int c = 0; c < s.c; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= s.h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= s.w) continue;
                const std::size_t wi = ((o * s.c + c) * k + ky) * k + kx;
                if (!grad_weight.empty()) grad_weight[wi] += go * x.at(n, c, iy, ix);
                grad_input.at(n, c, iy, ix) += go * weight[wi];
              }
            }
          }
        }
      }
    }
  }
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda, const float* b,
          int ldb, float* c, int ldc, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (int kk = 0; kk < k; ++kk) {
        const float av = trans_a ? a[static_cast<std::size_t>(kk) * lda + i] : a[static_cast<std::size_t>(i) * lda + kk];
        const float bv = trans_b ? b[static_cast<std::size_t>(j) * ldb + kk] : b[static_cast<std::size_t>(kk) * ldb + j];
        acc += av * bv;
      }
      float& dst = c[static_cast<std::size_t>(i) * ldc + j];
      dst = accumulate ? dst + acc : acc;
    }
  }
}

}  // namespace reference

int worker_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_worker_count(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

void configure_workers_from_env() {
  if (const char* env = std::getenv("PGSGAN_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) set_worker_count(n);
  }
}

}  // namespace pgsgan::kernels
