#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "hrfseg/tensor.hpp"

namespace hrfseg {

// Binary raster, row-major, one byte per pixel (0 or 1).
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

  std::uint8_t& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::uint8_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

std::size_t intersection_count(const Mask& a, const Mask& b);
// a |= b
void merge_into(Mask& a, const Mask& b);
// a &= ~b
void subtract(Mask& a, const Mask& b);

struct Pixel {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

// Centroid of a non-empty mask, rounded to the nearest pixel.
Pixel centroid(const Mask& m);

// Grayscale images are Tensors of shape [rows, cols].
inline std::size_t image_rows(const Tensor& img) { return img.dim(0); }
inline std::size_t image_cols(const Tensor& img) { return img.dim(1); }

}  // namespace hrfseg
