#pragma once

// Pixel relevance maps and their on-disk form.

#include <filesystem>
#include <string>

#include "hrfseg/models.hpp"

namespace hrfseg::lrp {

using models::RelevanceMap;

// Seeds the model's positivity logit(s) and propagates to input pixels.
// Throws StateError for a model without normalization statistics (never
// trained or loaded).
RelevanceMap relevance_map(const models::Model& model, const Tensor& raw, double eps = 1e-6);

// |sum(map) + absorbed - source|
double conservation_error(const RelevanceMap& m);

// `<stem>.rel` holds little-endian float32 values row-major; `<stem>.json`
// records dims, source score, absorbed relevance and the model id.
void write_relevance(const std::filesystem::path& stem, const RelevanceMap& m, const std::string& model_id);
RelevanceMap read_relevance(const std::filesystem::path& stem);

}  // namespace hrfseg::lrp
