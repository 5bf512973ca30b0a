#include "pgsgan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "pgsgan/error.hpp"

namespace pgsgan {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape_.numel()) {
    throw SizeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                    shape_.str());
  }
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(Shape shape) {
  if (shape.numel() != data_.size()) {
    throw SizeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  shape_ = shape;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor Tensor::slice_batch(int first, int count) const {
  if (first < 0 || count < 0 || first + count > shape_.n) {
    throw SizeError("batch slice out of range for " + shape_.str());
  }
  Shape s = shape_;
  s.n = count;
  Tensor out(s);
  const std::size_t per = static_cast<std::size_t>(shape_.c) * shape_.plane();
  std::memcpy(out.data(), data_.data() + first * per, count * per * sizeof(float));
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw SizeError("concat_channels: " + sa.str() + " vs " + sb.str());
  }
  Tensor out({sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t pa = sa.c * sa.plane();
  const std::size_t pb = sb.c * sb.plane();
  for (int n = 0; n < sa.n; ++n) {
    float* dst = out.plane(n, 0);
    std::memcpy(dst, a.plane(n, 0), pa * sizeof(float));
    std::memcpy(dst + pa, b.plane(n, 0), pb * sizeof(float));
  }
  return out;
}

void split_channels(const Tensor& joined, int first_channels, Tensor& a, Tensor& b) {
  const Shape& s = joined.shape();
  if (first_channels < 0 || first_channels > s.c) {
    throw SizeError("split_channels: bad split " + std::to_string(first_channels));
  }
  a = Tensor({s.n, first_channels, s.h, s.w});
  b = Tensor({s.n, s.c - first_channels, s.h, s.w});
  const std::size_t pa = first_channels * s.plane();
  const std::size_t pb = (s.c - first_channels) * s.plane();
  for (int n = 0; n < s.n; ++n) {
    const float* src = joined.plane(n, 0);
    std::memcpy(a.plane(n, 0), src, pa * sizeof(float));
    std::memcpy(b.plane(n, 0), src + pa, pb * sizeof(float));
  }
}

Tensor stack_batch(std::span<const Tensor> items) {
  if (items.empty()) throw SizeError("stack_batch: no items");
  Shape s = items.front().shape();
  Shape out_shape = s;
  out_shape.n = 0;
  for (const auto& t : items) {
    if (t.shape().c != s.c || t.shape().h != s.h || t.shape().w != s.w) {
      throw SizeError("stack_batch: " + t.shape().str() + " vs " + s.str());
    }
    out_shape.n += t.shape().n;
  }
  Tensor out(out_shape);
  float* dst = out.data();
  for (const auto& t : items) {
    std::memcpy(dst, t.data(), t.size() * sizeof(float));
    dst += t.size();
  }
  return out;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw SizeError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  }
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace pgsgan
