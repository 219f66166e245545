#pragma once

// Small synthetic scans and models that keep end-to-end tests fast.

#include "hrfseg/models.hpp"
#include "hrfseg/synth.hpp"

namespace hrfseg::testing {

inline synth::GenParams tiny_params(std::size_t volumes = 6, std::uint64_t seed = 3) {
  synth::GenParams p;
  p.volumes = volumes;
  p.slices = 4;
  p.rows = 64;
  p.cols = 96;
  p.band_top_min = 12.0;
  p.band_top_max = 16.0;
  p.band_height_min = 30.0;
  p.band_height_max = 36.0;
  p.band_amplitude_max = 2.0;
  p.foci_per_volume = 6.0;
  p.seed = seed;
  return p;
}

inline models::CCTConfig tiny_cct() {
  models::CCTConfig c = models::CCTConfig::desk(64, 96);
  c.dim = 16;
  return c;
}

}  // namespace hrfseg::testing
