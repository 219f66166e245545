#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hrfseg/image.hpp"
#include "hrfseg/tensor.hpp"

namespace hrfseg::io {

// 8-bit raster, row-major, interleaved channels (1 = gray, 3 = RGB).
struct Raster {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> data;
};

std::string encode_png(const Raster& r);
// Any bit depth, palette or alpha is expanded to 8-bit gray or RGB(A).
Raster decode_png(const std::string& bytes);
void write_png(const std::filesystem::path& path, const Raster& r);

// Values in [0, 1] scaled to 0..255 and replicated to three channels.
Raster gray_to_rgb(const Tensor& image);
// 1-bit grayscale PNG of a mask.
std::string encode_mask_png(const Mask& m);
// Nonzero in any channel is foreground.
Mask decode_mask_png(const std::string& bytes);

std::string base64_encode(const std::string& bytes);
// Throws FormatError on malformed input.
std::string base64_decode(const std::string& text);

}  // namespace hrfseg::io
