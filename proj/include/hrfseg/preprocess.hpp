#pragma once

// Retina localization, MIL patch tiling, normalization and augmentation.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "hrfseg/image.hpp"
#include "hrfseg/tensor.hpp"

namespace hrfseg::preprocess {

inline constexpr std::size_t kHistogramBins = 256;

// Otsu on a 256-bin histogram spanning [min, max]. Pixels in bins >= bin are
// foreground; threshold is the lower edge of that bin. A constant image gives
// bin 0 and threshold equal to the constant.
struct OtsuResult {
  double threshold = 0.0;
  std::size_t bin = 0;
  double lo = 0.0;
  double hi = 0.0;

  bool foreground(double v) const;
};

OtsuResult otsu(const Tensor& image);
inline double otsu_threshold(const Tensor& image) { return otsu(image).threshold; }

// Bin index of v in a 256-bin histogram over [lo, hi].
std::size_t histogram_bin(double v, double lo, double hi);

struct RetinaBand {
  std::vector<std::size_t> top;
  std::vector<std::size_t> bottom;

  std::size_t cols() const { return top.size(); }
};

inline constexpr std::size_t kBandSmoothing = 15;
RetinaBand locate_retina(const Tensor& image);

struct PatchGrid {
  std::size_t patch = 64;
  std::size_t rows = 3;
  std::vector<Pixel> anchors;  // top-left corners, patch-row major
};

struct Patches {
  PatchGrid grid;
  std::vector<Tensor> tiles;  // [patch, patch] each, aligned with grid.anchors
};

Patches extract_patch_rows(const Tensor& image, const RetinaBand& band, std::size_t patch = 64,
                           std::size_t rows = 3);

struct Stats {
  double mean = 0.0;
  double std = 1.0;
};

// Pixel mean and population standard deviation over a set of images.
Stats compute_stats(const std::vector<const Tensor*>& images);
Tensor normalize(const Tensor& image, double mean, double std);
inline Tensor normalize(const Tensor& image, const Stats& s) { return normalize(image, s.mean, s.std); }

// Pads bottom/right by reflection (no edge repeat) so both dims are
// multiples of `multiple`.
Tensor reflect_pad(const Tensor& image, std::size_t multiple);

struct AugmentConfig {
  double probability = 0.5;
  int max_shift = 32;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double max_rotation_deg = 10.0;
  double gain_min = 0.9;
  double gain_max = 1.1;
  double max_offset = 0.05;
};

// Every draw is made whether or not the transform is applied, so the random
// stream consumed per call is fixed.
struct AugmentDraw {
  bool shift = false, flip = false, scale = false, rotate = false, intensity = false;
  int dy = 0;
  double factor = 1.0;
  double angle_rad = 0.0;
  double gain = 1.0;
  double offset = 0.0;

  static AugmentDraw sample(std::uint64_t seed, const AugmentConfig& cfg = {});
  bool identity() const { return !(shift || flip || scale || rotate || intensity); }
};

struct Augmented {
  Tensor image;
  std::vector<Mask> masks;
};

Augmented apply_augment(const Tensor& image, const std::vector<Mask>& masks, const AugmentDraw& draw);
inline Augmented augment(const Tensor& image, const std::vector<Mask>& masks, std::uint64_t seed,
                         const AugmentConfig& cfg = {}) {
  return apply_augment(image, masks, AugmentDraw::sample(seed, cfg));
}

Tensor flip_horizontal(const Tensor& image);
Mask flip_horizontal(const Mask& mask);

// Bilinear sample with clamp-to-edge addressing.
double bilinear(const Tensor& image, double row, double col);

}  // namespace hrfseg::preprocess
