#pragma once

// Relevance argmax -> crop + box prompt -> promptable segmenter -> mask in
// full-image coordinates.

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "hrfseg/image.hpp"
#include "hrfseg/synth.hpp"
#include "hrfseg/tensor.hpp"

namespace hrfseg::prompt {

inline constexpr std::size_t kDefaultCrop = 64;
inline constexpr std::size_t kDefaultBox = 4;
inline constexpr std::size_t kBuiltinSide = 256;
inline constexpr std::size_t kBridgeSide = 1024;

// Half-open pixel box [x0, x1) x [y0, y1); as continuous coordinates the same
// numbers are the box corners.
struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::size_t width() const { return x1 - x0; }
  std::size_t height() const { return y1 - y0; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct PromptSpec {
  Pixel pixel;                  // full-image prompt
  std::size_t crop_row = 0;     // crop origin
  std::size_t crop_col = 0;
  std::size_t crop = kDefaultCrop;
  std::size_t box_side = kDefaultBox;  // in image pixels
  std::size_t side = kBuiltinSide;     // upsampled crop side S
  Box box;                             // in upsampled-crop coordinates
};

struct MaskCandidate {
  Mask mask;  // side x side
  double score = 0.0;
};

class Segmenter {
 public:
  virtual ~Segmenter() = default;
  // Returns 1..3 candidates for `crop` (square) and `box`.
  virtual std::vector<MaskCandidate> segment(const Tensor& crop, const Box& box) = 0;
  virtual std::size_t native_side() const = 0;
  virtual std::string name() const = 0;
};

// Position of the largest value; ties go to the smallest row-major index.
// Pixels set in `exclude` are skipped. Throws ArgumentError for an empty map
// or when every pixel is excluded.
Pixel argmax_pixel(const Tensor& map, const Mask* exclude = nullptr);

// Throws ArgumentError unless the pixel is inside the image,
// 0 < box < crop <= min(rows, cols) and side >= crop.
PromptSpec make_prompt(Pixel pixel, std::size_t rows, std::size_t cols, std::size_t crop = kDefaultCrop,
                       std::size_t box = kDefaultBox, std::size_t side = kBuiltinSide);

// Pixel-centre bilinear resampling of the crop to side x side.
Tensor upsample_crop(const Tensor& image, const PromptSpec& spec);

// Region-growing stand-in for a foundation segmenter.
std::vector<MaskCandidate> builtin_segment(const Tensor& crop, const Box& box);

class BuiltinSegmenter final : public Segmenter {
 public:
  std::vector<MaskCandidate> segment(const Tensor& crop, const Box& box) override {
    return builtin_segment(crop, box);
  }
  std::size_t native_side() const override { return kBuiltinSide; }
  std::string name() const override { return "builtin"; }
};

// "builtin" or "bridge:<url>".
std::unique_ptr<Segmenter> make_segmenter(const std::string& spec);

// Each crop pixel is on when at least half of its footprint in the
// upsampled mask is on.
Mask downsample_mask(const Mask& upsampled, std::size_t crop);

// Full-image mask of the highest-scoring candidate, pasted at the crop
// origin. `side` 0 selects the segmenter's native resolution (or the crop
// size, if larger).
Mask segment_at_prompt(const Tensor& image, Pixel pixel, Segmenter& segmenter, std::size_t crop = kDefaultCrop,
                       std::size_t box = kDefaultBox, std::size_t side = 0);

double dice(const Mask& a, const Mask& b);

struct GridResult {
  std::vector<std::size_t> crops;
  std::vector<std::size_t> boxes;
  std::vector<std::vector<double>> dice;  // [crop][box]
  std::size_t foci = 0;
  std::size_t best_crop = 0;
  std::size_t best_box = 0;
};

// Prompts every focus at its ground-truth centroid. Crop sizes larger than
// the image are reported as NaN.
GridResult gridsearch_crop_box(const std::vector<const synth::Scan*>& scans, Segmenter& segmenter,
                               std::vector<std::size_t> crops = {32, 48, 64, 80, 96, 128},
                               std::vector<std::size_t> boxes = {2, 4, 8, 16});

// Mean Dice of prompting each focus at its centroid with one geometry.
double centroid_prompt_dice(const std::vector<const synth::Scan*>& scans, Segmenter& segmenter,
                            std::size_t crop = kDefaultCrop, std::size_t box = kDefaultBox,
                            std::size_t* foci = nullptr);

}  // namespace hrfseg::prompt
