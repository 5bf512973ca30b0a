#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pgsgan {

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Dense NCHW float tensor. Single images use n == 1.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  float& at(int n, int c, int y, int x) {
    return data_[index(n, c, y, x)];
  }
  float at(int n, int c, int y, int x) const {
    return data_[index(n, c, y, x)];
  }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Pointer to the (n, c) plane.
  float* plane(int n, int c) { return data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.plane(); }
  const float* plane(int n, int c) const {
    return data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.plane();
  }

  void fill(float v);
  // Reinterprets the buffer with a new shape of equal element count.
  void reshape(Shape shape);

  bool all_finite() const;

  // Sample-range view: samples [first, first + count).
  Tensor slice_batch(int first, int count) const;

 private:
  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape shape_{};
  std::vector<float> data_;
};

// Concatenates along the channel axis; batch and spatial sizes must agree.
Tensor concat_channels(const Tensor& a, const Tensor& b);
// Splits a channel-concatenated gradient back into its two parts.
void split_channels(const Tensor& joined, int first_channels, Tensor& a, Tensor& b);
// Stacks single-sample tensors into one batch.
Tensor stack_batch(std::span<const Tensor> items);

float max_abs_diff(const Tensor& a, const Tensor& b);

// Single-channel 2-D raster used for masks and edge maps.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<T> cells;

  Grid() = default;
  Grid(int h, int w, T fill = T{}) : height(h), width(w), cells(static_cast<std::size_t>(h) * w, fill) {}

  T& operator()(int y, int x) { return cells[static_cast<std::size_t>(y) * width + x]; }
  const T& operator()(int y, int x) const { return cells[static_cast<std::size_t>(y) * width + x]; }
  bool contains(int y, int x) const { return y >= 0 && x >= 0 && y < height && x < width; }
  bool operator==(const Grid&) const = default;
};

using LabelMap = Grid<std::uint8_t>;

}  // namespace pgsgan
