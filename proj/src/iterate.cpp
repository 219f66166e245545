#include "hrfseg/iterate.hpp"

#include <cmath>

#include "hrfseg/error.hpp"
#include "hrfseg/lrp.hpp"

namespace hrfseg::iterate {

void IterConfig::validate() const {
  if (max_iter == 0) throw ArgumentError("iterate: max_iter must be >= 1");
  if (std::isnan(tau) || tau < 0.0) throw ArgumentError("iterate: tau must be >= 0");
  if (min_area == 0) throw ArgumentError("iterate: min_area must be >= 1");
}

nlohmann::json IterConfig::to_json() const {
  return {{"tau", tau}, {"max_iter", max_iter}, {"min_area", min_area}, {"crop", crop}, {"box", box}, {"eps", eps}};
}

IterConfig IterConfig::from_json(const nlohmann::json& j, IterConfig c) {
  const auto def = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!def.contains(key)) throw ArgumentError("iterate config: unknown key '" + key + "'");
  }
  c.tau = j.value("tau", c.tau);
  c.max_iter = j.value("max_iter", c.max_iter);
  c.min_area = j.value("min_area", c.min_area);
  c.crop = j.value("crop", c.crop);
  c.box = j.value("box", c.box);
  c.eps = j.value("eps", c.eps);
  return c;
}

Mask DetectionSet::combined(std::size_t rows, std::size_t cols) const {
  Mask all(rows, cols);
  for (const auto& d : detections) merge_into(all, d.mask);
  return all;
}

double image_mean(const Tensor& image) {
  if (image.size() == 0) throw ArgumentError("image_mean: empty image");
  double s = 0.0;
  for (double v : image.storage()) s += v;
  return s / static_cast<double>(image.size());
}

Tensor inpaint(const Tensor& image, const Mask& mask, double mean) {
  if (mask.rows != image_rows(image) || mask.cols != image_cols(image)) {
    throw ShapeError("inpaint: mask dims differ from the image");
  }
  Tensor out = image;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask.data[i]) out[i] = mean;
  }
  return out;
}

DetectionSet run_iterative(const Tensor& image, const models::Model& model, prompt::Segmenter& segmenter,
                           const IterConfig& config) {
  config.validate();
  if (!model.calibrated()) throw StateError("iterative inference needs a trained model");
  const std::size_t rows = image_rows(image), cols = image_cols(image);
  const double mean = image_mean(image);
  DetectionSet out;
  Mask prior(rows, cols);
  Tensor current = image;
  for (std::size_t it = 0; it < config.max_iter; ++it) {
    const double score = model.predict(current).positivity;
    out.scores.push_back(score);
    if (score < config.tau) break;
    const lrp::RelevanceMap rel = lrp::relevance_map(model, current, config.eps);
    if (prior.count() == prior.data.size()) break;
    const Pixel p = prompt::argmax_pixel(rel.map, &prior);
    Mask m;
    try {
      ++out.segmenter_calls;
      m = prompt::segment_at_prompt(current, p, segmenter, config.crop, config.box);
    } catch (const SegmenterError& e) {
      out.error = true;
      out.error_message = e.what();
      break;
    }
    subtract(m, prior);
    if (m.count() < config.min_area) break;
    merge_into(prior, m);
    current = inpaint(current, m, mean);
    out.detections.push_back({std::move(m), p, score});
  }
  return out;
}

}  // namespace hrfseg::iterate
