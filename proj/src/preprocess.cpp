#include "hrfseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "hrfseg/error.hpp"

namespace hrfseg::preprocess {

std::size_t histogram_bin(double v, double lo, double hi) {
  if (!(hi > lo)) return 0;
  const double pos = std::floor((v - lo) / (hi - lo) * static_cast<double>(kHistogramBins));
  if (pos <= 0.0) return 0;
  return std::min(kHistogramBins - 1, static_cast<std::size_t>(pos));
}

bool OtsuResult::foreground(double v) const { return histogram_bin(v, lo, hi) >= bin; }

OtsuResult otsu(const Tensor& image) {
  if (image.empty()) throw ArgumentError("otsu: empty image");
  OtsuResult out;
  out.lo = image.min();
  out.hi = image.max();
  if (!(out.hi > out.lo)) {
    out.threshold = out.lo;
    return out;
  }
  std::vector<std::uint64_t> hist(kHistogramBins, 0);
  for (double v : image.values()) ++hist[histogram_bin(v, out.lo, out.hi)];

  const std::uint64_t total = image.size();
  std::uint64_t total_sum = 0;
  for (std::size_t b = 0; b < kHistogramBins; ++b) total_sum += b * hist[b];

  // Between-class variance in bin units with integer class statistics.
  double best = -1.0;
  std::uint64_t n0 = 0, s0 = 0;
  for (std::size_t k = 1; k < kHistogramBins; ++k) {
    n0 += hist[k - 1];
    s0 += (k - 1) * hist[k - 1];
    const std::uint64_t n1 = total - n0, s1 = total_sum - s0;
    if (n0 == 0 || n1 == 0) continue;
    const double d = static_cast<double>(s0) / static_cast<double>(n0) - static_cast<double>(s1) / static_cast<double>(n1);
    const double var = static_cast<double>(n0) * static_cast<double>(n1) * d * d;
    if (var > best) {
      best = var;
      out.bin = k;
    }
  }
  out.threshold = out.lo + static_cast<double>(out.bin) * (out.hi - out.lo) / static_cast<double>(kHistogramBins);
  return out;
}

namespace {

std::vector<std::size_t> median_filter(const std::vector<std::size_t>& v, std::size_t window) {
  const std::size_t half = window / 2, n = v.size();
  std::vector<std::size_t> out(n), buf;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = i >= half ? i - half : 0, b = std::min(n, i + half + 1);
    buf.assign(v.begin() + static_cast<long>(a), v.begin() + static_cast<long>(b));
    std::nth_element(buf.begin(), buf.begin() + static_cast<long>(buf.size() / 2), buf.end());
    out[i] = buf[buf.size() / 2];
  }
  return out;
}

}  // namespace

RetinaBand locate_retina(const Tensor& image) {
  const std::size_t H = image.dim(0), W = image.dim(1);
  const OtsuResult t = otsu(image);
  RetinaBand band;
  band.top.assign(W, 0);
  band.bottom.assign(W, H - 1);
  std::vector<bool> valid(W, false);
  for (std::size_t c = 0; c < W; ++c) {
    for (std::size_t r = 0; r < H; ++r) {
      if (!t.foreground(image.at(r, c))) continue;
      if (!valid[c]) band.top[c] = r;
      band.bottom[c] = r;
      valid[c] = true;
    }
  }
  if (std::none_of(valid.begin(), valid.end(), [](bool b) { return b; })) {
    std::fill(band.top.begin(), band.top.end(), 0);
    std::fill(band.bottom.begin(), band.bottom.end(), H - 1);
    return band;
  }
  // Empty columns copy the nearest valid column, preferring the left one.
  for (std::size_t c = 0; c < W; ++c) {
    if (valid[c]) continue;
    for (std::size_t d = 1;; ++d) {
      if (c >= d && valid[c - d]) {
        band.top[c] = band.top[c - d];
        band.bottom[c] = band.bottom[c - d];
        break;
      }
      if (c + d < W && valid[c + d]) {
        band.top[c] = band.top[c + d];
        band.bottom[c] = band.bottom[c + d];
        break;
      }
    }
  }
  band.top = median_filter(band.top, kBandSmoothing);
  band.bottom = median_filter(band.bottom, kBandSmoothing);
  for (std::size_t c = 0; c < W; ++c) band.bottom[c] = std::max(band.bottom[c], band.top[c]);
  return band;
}

Patches extract_patch_rows(const Tensor& image, const RetinaBand& band, std::size_t patch, std::size_t rows) {
  const std::size_t H = image.dim(0), W = image.dim(1);
  if (patch == 0 || rows == 0) throw ArgumentError("extract_patch_rows: patch size and row count must be positive");
  if (W < patch) throw ArgumentError("extract_patch_rows: image width " + std::to_string(W) + " < patch " + std::to_string(patch));
  if (H < patch) throw ArgumentError("extract_patch_rows: image height " + std::to_string(H) + " < patch " + std::to_string(patch));
  if (band.cols() != W) throw ShapeError("extract_patch_rows: band has " + std::to_string(band.cols()) + " columns, image " + std::to_string(W));

  const std::size_t n_cols = (W + patch - 1) / patch;
  std::vector<std::size_t> col_anchor(n_cols), row_anchor(n_cols);
  std::vector<std::size_t> tops;
  for (std::size_t j = 0; j < n_cols; ++j) {
    col_anchor[j] = std::min(j * patch, W - patch);
    tops.assign(band.top.begin() + static_cast<long>(col_anchor[j]), band.top.begin() + static_cast<long>(col_anchor[j] + patch));
    std::sort(tops.begin(), tops.end());
    row_anchor[j] = tops[(tops.size() - 1) / 2];
  }

  Patches out;
  out.grid.patch = patch;
  out.grid.rows = rows;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < n_cols; ++j) {
      const std::size_t r0 = std::min(row_anchor[j] + i * patch, H - patch), c0 = col_anchor[j];
      Tensor tile({patch, patch});
      for (std::size_t r = 0; r < patch; ++r) {
        for (std::size_t c = 0; c < patch; ++c) tile.at(r, c) = image.at(r0 + r, c0 + c);
      }
      out.grid.anchors.push_back({r0, c0});
      out.tiles.push_back(std::move(tile));
    }
  }
  return out;
}

Stats compute_stats(const std::vector<const Tensor*>& images) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const Tensor* t : images) {
    for (double v : t->values()) sum += v;
    n += t->size();
  }
  if (n == 0) throw ArgumentError("compute_stats: no pixels");
  Stats s;
  s.mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (const Tensor* t : images) {
    for (double v : t->values()) sq += (v - s.mean) * (v - s.mean);
  }
  s.std = std::sqrt(sq / static_cast<double>(n));
  return s;
}

Tensor normalize(const Tensor& image, double mean, double std) {
  if (!(std > 0.0)) throw ArgumentError("normalize: std must be positive, got " + std::to_string(std));
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = (image[i] - mean) / std;
  return out;
}

namespace {

std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

}  // namespace

Tensor reflect_pad(const Tensor& image, std::size_t multiple) {
  if (multiple == 0) throw ArgumentError("reflect_pad: multiple must be positive");
  const std::size_t H = image.dim(0), W = image.dim(1);
  const std::size_t Hp = (H + multiple - 1) / multiple * multiple, Wp = (W + multiple - 1) / multiple * multiple;
  if (Hp == H && Wp == W) return image;
  Tensor out({Hp, Wp});
  for (std::size_t r = 0; r < Hp; ++r) {
    for (std::size_t c = 0; c < Wp; ++c) out.at(r, c) = image.at(reflect_index(r, H), reflect_index(c, W));
  }
  return out;
}

AugmentDraw AugmentDraw::sample(std::uint64_t seed, const AugmentConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto coin = [&] { return unit(rng) < cfg.probability; };
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  AugmentDraw d;
  d.shift = coin();
  d.dy = std::uniform_int_distribution<int>(-cfg.max_shift, cfg.max_shift)(rng);
  d.flip = coin();
  d.scale = coin();
  d.factor = range(cfg.scale_min, cfg.scale_max);
  d.rotate = coin();
  d.angle_rad = range(-cfg.max_rotation_deg, cfg.max_rotation_deg) * std::numbers::pi / 180.0;
  d.intensity = coin();
  d.gain = range(cfg.gain_min, cfg.gain_max);
  d.offset = range(-cfg.max_offset, cfg.max_offset);
  return d;
}

double bilinear(const Tensor& image, double row, double col) {
  const std::size_t H = image.dim(0), W = image.dim(1);
  row = std::clamp(row, 0.0, static_cast<double>(H - 1));
  col = std::clamp(col, 0.0, static_cast<double>(W - 1));
  const auto r0 = static_cast<std::size_t>(std::floor(row)), c0 = static_cast<std::size_t>(std::floor(col));
  const std::size_t r1 = std::min(r0 + 1, H - 1), c1 = std::min(c0 + 1, W - 1);
  const double fy = row - static_cast<double>(r0), fx = col - static_cast<double>(c0);
  const double top = image.at(r0, c0) * (1.0 - fx) + image.at(r0, c1) * fx;
  const double bottom = image.at(r1, c0) * (1.0 - fx) + image.at(r1, c1) * fx;
  return top * (1.0 - fy) + bottom * fy;
}

Augmented apply_augment(const Tensor& image, const std::vector<Mask>& masks, const AugmentDraw& d) {
  const std::size_t H = image.dim(0), W = image.dim(1);
  for (const Mask& m : masks) {
    if (m.rows != H || m.cols != W) throw ShapeError("augment: mask dims differ from image");
  }
  if (d.identity()) return {image, masks};

  const double dy = d.shift ? d.dy : 0.0;
  const double s = d.scale ? d.factor : 1.0;
  const double theta = d.rotate ? d.angle_rad : 0.0;
  const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);
  const double cs = std::cos(theta), sn = std::sin(theta);
  const bool warp = d.scale || d.rotate;

  Augmented out{Tensor({H, W}), std::vector<Mask>(masks.size(), Mask(H, W))};
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      // Forward map: flip, then rotate/scale about the centre, then shift.
      double y = static_cast<double>(r) - dy, x = static_cast<double>(c);
      if (warp) {
        const double u = y - cy, v = x - cx;
        y = cy + (cs * u + sn * v) / s;
        x = cx + (-sn * u + cs * v) / s;
      }
      if (d.flip) x = static_cast<double>(W - 1) - x;
      double value = bilinear(image, y, x);
      if (d.intensity) value = value * d.gain + d.offset;
      out.image.at(r, c) = value;

      const double ry = std::round(y), rx = std::round(x);
      if (ry < 0 || rx < 0 || ry > static_cast<double>(H - 1) || rx > static_cast<double>(W - 1)) continue;
      const auto sy = static_cast<std::size_t>(ry), sx = static_cast<std::size_t>(rx);
      for (std::size_t k = 0; k < masks.size(); ++k) out.masks[k](r, c) = masks[k](sy, sx);
    }
  }
  return out;
}

Tensor flip_horizontal(const Tensor& image) {
  const std::size_t H = image.dim(0), W = image.dim(1);
  Tensor out({H, W});
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) out.at(r, c) = image.at(r, W - 1 - c);
  }
  return out;
}

Mask flip_horizontal(const Mask& mask) {
  Mask out(mask.rows, mask.cols);
  for (std::size_t r = 0; r < mask.rows; ++r) {
    for (std::size_t c = 0; c < mask.cols; ++c) out(r, c) = mask(r, mask.cols - 1 - c);
  }
  return out;
}

}  // namespace hrfseg::preprocess
