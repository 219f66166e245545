#include "hrfseg/image.hpp"

#include <cmath>

#include "hrfseg/error.hpp"

namespace hrfseg {

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (auto v : data) n += v != 0;
  return n;
}

namespace {

void require_same(const Mask& a, const Mask& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("mask dimensions differ");
}

}  // namespace

std::size_t intersection_count(const Mask& a, const Mask& b) {
  require_same(a, b);
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) n += (a.data[i] && b.data[i]);
  return n;
}

void merge_into(Mask& a, const Mask& b) {
  require_same(a, b);
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] = (a.data[i] || b.data[i]) ? 1 : 0;
}

void subtract(Mask& a, const Mask& b) {
  require_same(a, b);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    if (b.data[i]) a.data[i] = 0;
  }
}

Pixel centroid(const Mask& m) {
  double sr = 0.0, sc = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      if (m(r, c)) {
        sr += static_cast<double>(r);
        sc += static_cast<double>(c);
        ++n;
      }
    }
  }
  if (n == 0) throw ArgumentError("centroid of an empty mask");
  return {static_cast<std::size_t>(std::lround(sr / static_cast<double>(n))),
          static_cast<std::size_t>(std::lround(sc / static_cast<double>(n)))};
}

}  // namespace hrfseg
