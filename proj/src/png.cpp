#include "hrfseg/io/png.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <openssl/evp.h>
#include <png.h>

#include "hrfseg/error.hpp"

namespace hrfseg::io {

namespace {

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw FormatError(std::string("png: ") + msg); }
void png_warn(png_structp, png_const_charp) {}

struct Reader {
  const std::string* bytes;
  std::size_t pos = 0;
};

void read_fn(png_structp png, png_bytep out, png_size_t n) {
  auto* r = static_cast<Reader*>(png_get_io_ptr(png));
  if (r->pos + n > r->bytes->size()) png_error(png, "truncated data");
  std::copy_n(r->bytes->data() + r->pos, n, out);
  r->pos += n;
}

void write_fn(png_structp png, png_bytep in, png_size_t n) {
  static_cast<std::string*>(png_get_io_ptr(png))->append(reinterpret_cast<const char*>(in), n);
}
void flush_fn(png_structp) {}

// Writes rows already packed for the given bit depth and color type.
std::string encode_rows(std::size_t rows, std::size_t cols, int depth, int color,
                        const std::vector<std::vector<std::uint8_t>>& packed) {
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  try {
    png_set_write_fn(png, &out, write_fn, flush_fn);
    png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), depth, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (const auto& row : packed) png_write_row(png, row.data());
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

std::string encode_png(const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw ArgumentError("png: only gray or RGB rasters are written");
  if (r.data.size() != r.rows * r.cols * r.channels) throw ArgumentError("png: raster size mismatch");
  std::vector<std::vector<std::uint8_t>> rows(r.rows);
  const std::size_t stride = r.cols * r.channels;
  for (std::size_t i = 0; i < r.rows; ++i) rows[i].assign(r.data.begin() + i * stride, r.data.begin() + (i + 1) * stride);
  return encode_rows(r.rows, r.cols, 8, r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, rows);
}

Raster decode_png(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw FormatError("png: bad signature");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  Reader reader{&bytes};
  Raster r;
  try {
    png_set_read_fn(png, &reader, read_fn);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_read_update_info(png, info);
    r.rows = png_get_image_height(png, info);
    r.cols = png_get_image_width(png, info);
    r.channels = png_get_channels(png, info);
    r.data.resize(r.rows * r.cols * r.channels);
    std::vector<png_bytep> ptrs(r.rows);
    for (std::size_t i = 0; i < r.rows; ++i) ptrs[i] = r.data.data() + i * r.cols * r.channels;
    png_read_image(png, ptrs.data());
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return r;
}

void write_png(const std::filesystem::path& path, const Raster& r) {
  const std::string bytes = encode_png(r);
  std::ofstream os(path, std::ios::binary);
  if (!os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw ArgumentError(path.string() + ": cannot write");
  }
}

Raster gray_to_rgb(const Tensor& image) {
  Raster r{image_rows(image), image_cols(image), 3, {}};
  r.data.reserve(image.size() * 3);
  for (double v : image.storage()) {
    const auto b = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    r.data.insert(r.data.end(), 3, b);
  }
  return r;
}

std::string encode_mask_png(const Mask& m) {
  std::vector<std::vector<std::uint8_t>> rows(m.rows, std::vector<std::uint8_t>((m.cols + 7) / 8, 0));
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      if (m(i, j)) rows[i][j / 8] |= static_cast<std::uint8_t>(0x80u >> (j % 8));
    }
  }
  return encode_rows(m.rows, m.cols, 1, PNG_COLOR_TYPE_GRAY, rows);
}

Mask decode_mask_png(const std::string& bytes) {
  const Raster r = decode_png(bytes);
  Mask m(r.rows, r.cols);
  for (std::size_t p = 0; p < r.rows * r.cols; ++p) {
    // Alpha (last channel of 2 or 4) does not count as foreground.
    const std::size_t colour = r.channels == 2 || r.channels == 4 ? r.channels - 1 : r.channels;
    for (std::size_t c = 0; c < colour; ++c) {
      if (r.data[p * r.channels + c]) m.data[p] = 1;
    }
  }
  return m;
}

std::string base64_encode(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw FormatError("base64: length is not a multiple of 4");
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw FormatError("base64: invalid characters");
  // EVP_DecodeBlock keeps the bytes produced by '=' padding.
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

}  // namespace hrfseg::io
