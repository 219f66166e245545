#pragma once

// Detect, segment, inpaint with the image mean, repeat.

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfseg/image.hpp"
#include "hrfseg/models.hpp"
#include "hrfseg/prompt.hpp"

namespace hrfseg::iterate {

struct IterConfig {
  double tau = 0.05;
  std::size_t max_iter = 6;
  std::size_t min_area = 1;
  std::size_t crop = prompt::kDefaultCrop;
  std::size_t box = prompt::kDefaultBox;
  double eps = 1e-6;

  void validate() const;
  nlohmann::json to_json() const;
  static IterConfig from_json(const nlohmann::json& j, IterConfig base);
};

struct Detection {
  Mask mask;
  Pixel prompt;
  double score = 0.0;  // positivity before this detection was inpainted
};

struct DetectionSet {
  std::vector<Detection> detections;
  std::vector<double> scores;  // positivity at every evaluated iteration
  std::size_t segmenter_calls = 0;
  bool error = false;
  std::string error_message;

  Mask combined(std::size_t rows, std::size_t cols) const;
};

double image_mean(const Tensor& image);
// Pixels under `mask` set to `mean`; others untouched.
Tensor inpaint(const Tensor& image, const Mask& mask, double mean);
inline Tensor inpaint(const Tensor& image, const Mask& mask) { return inpaint(image, mask, image_mean(image)); }

// Throws StateError for an uncalibrated model. Segmenter failures stop the
// loop and are reported through `error`.
DetectionSet run_iterative(const Tensor& image, const models::Model& model, prompt::Segmenter& segmenter,
                           const IterConfig& config = {});

}  // namespace hrfseg::iterate
