#pragma once

// Deterministic synthetic OCT B-scans with analytic ground-truth foci.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfseg/image.hpp"
#include "hrfseg/tensor.hpp"

namespace hrfseg::synth {

inline constexpr std::size_t kMinFocusArea = 5;

struct GenParams {
  std::size_t volumes = 40;
  std::size_t slices = 12;
  std::size_t rows = 192;
  std::size_t cols = 512;

  // Retina band: top(x) = top + amplitude * sin(2 pi x / period + phase),
  // bottom(x) = top(x) + height.
  double band_top_min = 30.0;
  double band_top_max = 60.0;
  double band_height_min = 80.0;
  double band_height_max = 110.0;
  double band_amplitude_max = 10.0;
  double band_period_min = 400.0;
  double band_period_max = 1200.0;
  double band_intensity = 0.45;
  double background = 0.06;
  double speckle = 0.15;          // std of the multiplicative speckle factor
  double background_noise = 0.02; // additive noise std outside the band

  double foci_per_volume = 12.0;  // Poisson mean
  double focus_contrast_min = 0.25;
  double focus_contrast_max = 0.5;
  double focus_sigma_median = 1.95;  // geometric-mean Gaussian sigma, px
  double focus_sigma_spread = 0.25;  // log-normal spread of the sigma
  double focus_anisotropy = 0.2;     // log-normal spread of sigma_x / sigma_y
  std::size_t max_rejections = 100;

  std::uint64_t seed = 7;

  static GenParams desk() { return {}; }
  static GenParams paper();

  void validate() const;
  nlohmann::json to_json() const;
  static GenParams from_json(const nlohmann::json& j);
};

struct BandGeometry {
  double top = 0.0;
  double amplitude = 0.0;
  double period = 1.0;
  double phase = 0.0;
  double height = 0.0;

  double top_at(double col) const;
  double bottom_at(double col) const { return top_at(col) + height; }
  nlohmann::json to_json() const;
  static BandGeometry from_json(const nlohmann::json& j);
};

// Per-focus masks of one scan stored as a label image (0 = background,
// k = focus k-1); foci are pairwise disjoint.
struct Annotation {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint16_t> labels;
  std::vector<std::size_t> areas;

  std::size_t count() const { return areas.size(); }
  Mask focus(std::size_t k) const;
  Mask all() const;
};

struct Scan {
  std::size_t volume = 0;
  std::size_t slice = 0;
  Tensor image;  // [rows, cols], values in [0, 1], float32-representable
  Annotation annotation;
  BandGeometry band;

  bool positive() const { return annotation.count() > 0; }
  // Pixels lying entirely inside the band.
  Mask retina_mask() const;
};

struct VolumeMeta {
  std::size_t id = 0;
  std::size_t hrf_count = 0;
  int stratum = 0;
};

// Count strata {0, 1-5, 6-15, >15}.
int stratum_of(std::size_t hrf_count);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::vector<std::string> warnings;
};

struct Dataset {
  GenParams params;
  std::vector<Scan> scans;
  std::vector<VolumeMeta> volumes;
  Split split;
  std::vector<std::string> warnings;

  std::vector<const Scan*> scans_in(const std::vector<std::size_t>& volume_ids) const;
};

Dataset generate(const GenParams& params);

// 80/20 volume split stratified by HRF-count stratum, then 20 % of the
// training volumes (again stratified) moved to validation. Strata with fewer
// than two volumes are merged into the nearest populated stratum.
Split split(const std::vector<VolumeMeta>& volumes, std::uint64_t seed);

// Directory layout: manifest.json plus <volume>_<slice>.img / .msk rasters.
inline constexpr int kDatasetVersion = 1;
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Single-raster helpers shared with the CLI.
void write_image(const std::filesystem::path& path, const Tensor& image);
Tensor read_image(const std::filesystem::path& path);
void write_masks(const std::filesystem::path& path, const Annotation& annotation);
Annotation read_masks(const std::filesystem::path& path);

}  // namespace hrfseg::synth
