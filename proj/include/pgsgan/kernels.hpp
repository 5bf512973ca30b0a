#pragma once

#include <span>

#include "pgsgan/tensor.hpp"

// Convolution and resize kernels.
//
// The default entry points are the parallel kernels: im2col over the whole
// batch followed by a register-tiled GEMM whose tiles are distributed with
// OpenMP. Every output element is reduced by exactly one thread in a fixed
// order, so results do not depend on the worker count.
//
// namespace reference holds direct-loop serial versions used as test oracles
// and as the benchmark baseline.
namespace pgsgan::kernels {

struct ConvGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;

  int out_size(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
  // Input extent reproduced by a transposed convolution with this geometry.
  int transposed_out_size(int in) const { return (in - 1) * stride - 2 * pad + kernel; }
  int patch() const { return in_channels * kernel * kernel; }
};

// C[M x N] (+)= op(A) * op(B), row-major. op(A) is M x K, op(B) is K x N.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda, const float* b,
          int ldb, float* c, int ldc, bool accumulate);

// Unfolds a batch into a (patch x batch*out_h*out_w) matrix.
void im2col(const Tensor& x, const ConvGeometry& g, std::span<float> cols);
// Scatter-adds columns back into an image batch of shape `x.shape()` (x is overwritten).
void col2im(std::span<const float> cols, const ConvGeometry& g, Tensor& x);

// weight: out_channels x in_channels x k x k, bias: out_channels (may be empty).
// `cols` receives the im2col buffer so backward can reuse it.
Tensor conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias,
                      const ConvGeometry& g, std::vector<float>& cols);
// Accumulates into grad_weight / grad_bias when non-empty; returns dL/dx when
// want_input_grad is set, otherwise an empty tensor.
Tensor conv2d_backward(const Shape& x_shape, std::span<const float> cols, std::span<const float> weight,
                       const Tensor& grad_out, const ConvGeometry& g, std::span<float> grad_weight,
                       std::span<float> grad_bias, bool want_input_grad);

// Transposed convolution; weight layout in_channels x out_channels x k x k
// (the adjoint of conv2d with the roles of the channel counts swapped).
Tensor conv_transpose2d_forward(const Tensor& x, std::span<const float> weight,
                                std::span<const float> bias, const ConvGeometry& g);
Tensor conv_transpose2d_backward(const Tensor& x, std::span<const float> weight, const Tensor& grad_out,
                                 const ConvGeometry& g, std::span<float> grad_weight,
                                 std::span<float> grad_bias, bool want_input_grad);

// Nearest-neighbour x2 upsampling and 2x2 average pooling, with adjoints.
Tensor upsample2x(const Tensor& x);
Tensor downsample2x(const Tensor& x);
Tensor upsample2x_backward(const Tensor& grad_out);
Tensor downsample2x_backward(const Tensor& grad_out);

namespace reference {

Tensor conv2d_forward(const Tensor& x, std::span<const float> weight, std::span<const float> bias,
                      const ConvGeometry& g);
void conv2d_backward(const Tensor& x, std::span<const float> weight, const Tensor& grad_out,
                     const ConvGeometry& g, std::span<float> grad_weight, std::span<float> grad_bias,
                     Tensor& grad_input);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda, const float* b,
          int ldb, float* c, int ldc, bool accumulate);

}  // namespace reference

// Worker count used by the parallel kernels (1 when built without OpenMP).
int worker_count();
void set_worker_count(int n);
// Applies PGSGAN_THREADS when set.
void configure_workers_from_env();

}  // namespace pgsgan::kernels
