#include "hrfseg/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hrfseg/bridge.hpp"
#include "hrfseg/error.hpp"
#include "hrfseg/preprocess.hpp"

namespace hrfseg::prompt {

Pixel argmax_pixel(const Tensor& map, const Mask* exclude) {
  if (map.rank() != 2 || map.size() == 0) throw ArgumentError("argmax_pixel: empty map");
  const std::size_t cols = map.dim(1);
  if (exclude && (exclude->rows != map.dim(0) || exclude->cols != cols)) {
    throw ShapeError("argmax_pixel: exclusion mask dims differ from the map");
  }
  std::size_t best = map.size();
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (exclude && exclude->data[i]) continue;
    if (best == map.size() || map[i] > map[best]) best = i;
  }
  if (best == map.size()) throw ArgumentError("argmax_pixel: every pixel is excluded");
  return {best / cols, best % cols};
}

PromptSpec make_prompt(Pixel pixel, std::size_t rows, std::size_t cols, std::size_t crop, std::size_t box,
                       std::size_t side) {
  if (pixel.row >= rows || pixel.col >= cols) {
    throw ArgumentError("prompt pixel (" + std::to_string(pixel.row) + ", " + std::to_string(pixel.col) +
                        ") outside a " + std::to_string(rows) + "x" + std::to_string(cols) + " image");
  }
  if (crop > std::min(rows, cols)) {
    throw ArgumentError("crop size " + std::to_string(crop) + " exceeds image dimension " +
                        std::to_string(std::min(rows, cols)));
  }
  if (box == 0 || box >= crop) throw ArgumentError("box size must satisfy 0 < box < crop");
  if (side < crop) throw ArgumentError("upsample side " + std::to_string(side) + " is smaller than the crop");

  PromptSpec s;
  s.pixel = pixel;
  s.crop = crop;
  s.box_side = box;
  s.side = side;
  auto origin = [&](std::size_t p, std::size_t extent) {
    const std::size_t half = crop / 2;
    const std::size_t o = p > half ? p - half : 0;
    return std::min(o, extent - crop);
  };
  s.crop_row = origin(pixel.row, rows);
  s.crop_col = origin(pixel.col, cols);

  const double ratio = static_cast<double>(side) / static_cast<double>(crop);
  const auto bs = static_cast<std::size_t>(std::ceil(static_cast<double>(box) * ratio - 1e-9));
  auto start = [&](std::size_t local) {
    const double centre = (static_cast<double>(local) + 0.5) * ratio;
    const double lo = std::round(centre - static_cast<double>(bs) / 2.0);
    return static_cast<std::size_t>(std::clamp(lo, 0.0, static_cast<double>(side - bs)));
  };
  s.box.y0 = start(pixel.row - s.crop_row);
  s.box.x0 = start(pixel.col - s.crop_col);
  s.box.y1 = s.box.y0 + bs;
  s.box.x1 = s.box.x0 + bs;
  return s;
}

Tensor upsample_crop(const Tensor& image, const PromptSpec& spec) {
  const std::size_t c = spec.crop, S = spec.side;
  if (spec.crop_row + c > image_rows(image) || spec.crop_col + c > image_cols(image)) {
    throw ArgumentError("upsample_crop: crop outside the image");
  }
  Tensor crop({c, c});
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) crop.at(i, j) = image.at(spec.crop_row + i, spec.crop_col + j);
  }
  const double ratio = static_cast<double>(c) / static_cast<double>(S);
  Tensor out({S, S});
  for (std::size_t i = 0; i < S; ++i) {
    const double r = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    for (std::size_t j = 0; j < S; ++j) {
      out.at(i, j) = preprocess::bilinear(crop, r, (static_cast<double>(j) + 0.5) * ratio - 0.5);
    }
  }
  return out;
}

namespace {

constexpr std::size_t kRing = 8;
// Seed-to-ring contrast, as a fraction of the crop's range, below which the
// box is taken to sit on texture rather than an object.
constexpr double kMinContrast = 0.1;

MaskCandidate degenerate(std::size_t S) { return {Mask(S, S), 0.0}; }

Mask grow(const Tensor& crop, const std::vector<std::size_t>& seeds, double threshold) {
  const std::size_t S = crop.dim(0);
  Mask m(S, S);
  std::vector<std::size_t> stack;
  for (std::size_t s : seeds) {
    if (crop[s] >= threshold && !m.data[s]) {
      m.data[s] = 1;
      stack.push_back(s);
    }
  }
  while (!stack.empty()) {
    const std::size_t p = stack.back();
    stack.pop_back();
    const std::size_t r = p / S, c = p % S;
    auto visit = [&](std::size_t q) {
      if (!m.data[q] && crop[q] >= threshold) {
        m.data[q] = 1;
        stack.push_back(q);
      }
    };
    if (r > 0) visit(p - S);
    if (r + 1 < S) visit(p + S);
    if (c > 0) visit(p - 1);
    if (c + 1 < S) visit(p + 1);
  }
  return m;
}

}  // namespace

std::vector<MaskCandidate> builtin_segment(const Tensor& crop, const Box& box) {
  if (crop.rank() != 2 || crop.dim(0) != crop.dim(1) || crop.size() == 0) {
    throw ArgumentError("builtin_segment: crop must be square and non-empty");
  }
  const std::size_t S = crop.dim(0);
  if (box.x1 <= box.x0 || box.y1 <= box.y0 || box.x1 > S || box.y1 > S) {
    throw ArgumentError("builtin_segment: box outside the crop");
  }
  const auto [mn, mx] = std::minmax_element(crop.storage().begin(), crop.storage().end());
  const double range = *mx - *mn;
  if (!(range > 0.0)) return {degenerate(S)};

  std::vector<std::size_t> inside;
  std::vector<double> values;
  for (std::size_t y = box.y0; y < box.y1; ++y) {
    for (std::size_t x = box.x0; x < box.x1; ++x) {
      inside.push_back(y * S + x);
      values.push_back(crop[y * S + x]);
    }
  }
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<std::size_t> seeds;
  for (std::size_t k = 0; k < inside.size(); ++k) {
    if (values[k] > median) seeds.push_back(inside[k]);
  }
  // A flat box has nothing above its median; seed with all of it.
  if (seeds.empty()) seeds = inside;
  double seed_mean = 0.0;
  for (std::size_t s : seeds) seed_mean += crop[s];
  seed_mean /= static_cast<double>(seeds.size());

  std::vector<std::size_t> ring;
  const std::size_t ry0 = box.y0 > kRing ? box.y0 - kRing : 0, rx0 = box.x0 > kRing ? box.x0 - kRing : 0;
  const std::size_t ry1 = std::min(S, box.y1 + kRing), rx1 = std::min(S, box.x1 + kRing);
  for (std::size_t y = ry0; y < ry1; ++y) {
    for (std::size_t x = rx0; x < rx1; ++x) {
      const bool in_box = y >= box.y0 && y < box.y1 && x >= box.x0 && x < box.x1;
      if (!in_box) ring.push_back(y * S + x);
    }
  }
  if (ring.empty()) return {degenerate(S)};
  double ring_mean = 0.0;
  for (std::size_t r : ring) ring_mean += crop[r];
  ring_mean /= static_cast<double>(ring.size());

  const double gap = seed_mean - ring_mean;
  if (!(gap > kMinContrast * range)) return {degenerate(S)};
  const double mid = 0.5 * (seed_mean + ring_mean);

  std::vector<MaskCandidate> out;
  for (double t : {mid, mid - 0.1 * gap, mid + 0.1 * gap}) {
    Mask m = grow(crop, seeds, t);
    double fg = 0.0, bg = 0.0;
    std::size_t nfg = 0, nbg = 0;
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      if (m.data[i]) {
        fg += crop[i];
        ++nfg;
      }
    }
    if (nfg == 0) continue;
    for (std::size_t r : ring) {
      if (!m.data[r]) {
        bg += crop[r];
        ++nbg;
      }
    }
    // Contrast of the candidate against the ring pixels it leaves out.
    const double back = nbg ? bg / static_cast<double>(nbg) : ring_mean;
    const double score = std::clamp((fg / static_cast<double>(nfg) - back) / range, 0.0, 1.0);
    out.push_back({std::move(m), score});
  }
  if (out.empty()) return {degenerate(S)};
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  return out;
}

std::unique_ptr<Segmenter> make_segmenter(const std::string& spec) {
  if (spec == "builtin") return std::make_unique<BuiltinSegmenter>();
  if (spec.rfind("bridge:", 0) == 0 && spec.size() > 7) return std::make_unique<bridge::BridgeSegmenter>(spec.substr(7));
  throw ArgumentError("segmenter must be 'builtin' or 'bridge:<url>', got '" + spec + "'");
}

Mask downsample_mask(const Mask& up, std::size_t crop) {
  if (up.rows != up.cols || up.rows < crop || crop == 0) throw ArgumentError("downsample_mask: bad dimensions");
  const std::size_t S = up.rows;
  const double ratio = static_cast<double>(S) / static_cast<double>(crop);
  // Overlap of upsampled cell u with [lo, hi).
  auto spans = [&](std::size_t i) {
    const double lo = static_cast<double>(i) * ratio, hi = static_cast<double>(i + 1) * ratio;
    std::vector<std::pair<std::size_t, double>> w;
    for (auto u = static_cast<std::size_t>(std::floor(lo)); u < S && static_cast<double>(u) < hi; ++u) {
      const double ov = std::min(hi, static_cast<double>(u + 1)) - std::max(lo, static_cast<double>(u));
      if (ov > 0.0) w.emplace_back(u, ov);
    }
    return w;
  };
  std::vector<std::vector<std::pair<std::size_t, double>>> table(crop);
  for (std::size_t i = 0; i < crop; ++i) table[i] = spans(i);
  Mask out(crop, crop);
  const double half = 0.5 * ratio * ratio;
  for (std::size_t i = 0; i < crop; ++i) {
    for (std::size_t j = 0; j < crop; ++j) {
      double cover = 0.0;
      for (const auto& [u, wu] : table[i]) {
        for (const auto& [v, wv] : table[j]) {
          if (up(u, v)) cover += wu * wv;
        }
      }
      out(i, j) = cover >= half - 1e-9 ? 1 : 0;
    }
  }
  return out;
}

Mask segment_at_prompt(const Tensor& image, Pixel pixel, Segmenter& segmenter, std::size_t crop, std::size_t box,
                       std::size_t side) {
  const std::size_t rows = image_rows(image), cols = image_cols(image);
  const PromptSpec spec = make_prompt(pixel, rows, cols, crop, box, side ? side : std::max(crop, segmenter.native_side()));
  const Tensor up = upsample_crop(image, spec);
  std::vector<MaskCandidate> cands = segmenter.segment(up, spec.box);
  Mask full(rows, cols);
  if (cands.empty()) throw SegmenterError(segmenter.name() + " returned no candidates");
  std::size_t best = 0;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    if (cands[k].mask.rows != spec.side || cands[k].mask.cols != spec.side) {
      throw SegmenterError(segmenter.name() + " returned a mask of the wrong size");
    }
    if (cands[k].score > cands[best].score) best = k;
  }
  const Mask small = downsample_mask(cands[best].mask, spec.crop);
  for (std::size_t i = 0; i < spec.crop; ++i) {
    for (std::size_t j = 0; j < spec.crop; ++j) full(spec.crop_row + i, spec.crop_col + j) = small(i, j);
  }
  return full;
}

double dice(const Mask& a, const Mask& b) {
  const std::size_t na = a.count(), nb = b.count();
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(intersection_count(a, b)) / static_cast<double>(na + nb);
}

namespace {

struct FocusRef {
  const synth::Scan* scan;
  Mask mask;
  Pixel centre;
};

std::vector<FocusRef> all_foci(const std::vector<const synth::Scan*>& scans) {
  std::vector<FocusRef> out;
  for (const auto* s : scans) {
    for (std::size_t k = 0; k < s->annotation.count(); ++k) {
      Mask m = s->annotation.focus(k);
      const Pixel c = centroid(m);
      out.push_back({s, std::move(m), c});
    }
  }
  return out;
}

double mean_dice(const std::vector<FocusRef>& foci, Segmenter& seg, std::size_t crop, std::size_t box) {
  if (foci.empty()) throw ArgumentError("no foci to prompt");
  double total = 0.0;
  for (const auto& f : foci) total += dice(segment_at_prompt(f.scan->image, f.centre, seg, crop, box), f.mask);
  return total / static_cast<double>(foci.size());
}

}  // namespace

double centroid_prompt_dice(const std::vector<const synth::Scan*>& scans, Segmenter& segmenter, std::size_t crop,
                            std::size_t box, std::size_t* foci) {
  const auto refs = all_foci(scans);
  if (foci) *foci = refs.size();
  return mean_dice(refs, segmenter, crop, box);
}

GridResult gridsearch_crop_box(const std::vector<const synth::Scan*>& scans, Segmenter& segmenter,
                               std::vector<std::size_t> crops, std::vector<std::size_t> boxes) {
  const auto refs = all_foci(scans);
  GridResult g;
  g.crops = std::move(crops);
  g.boxes = std::move(boxes);
  g.foci = refs.size();
  std::size_t min_dim = std::numeric_limits<std::size_t>::max();
  for (const auto* s : scans) min_dim = std::min({min_dim, image_rows(s->image), image_cols(s->image)});
  double best = -1.0;
  for (std::size_t i = 0; i < g.crops.size(); ++i) {
    std::vector<double> row;
    for (std::size_t j = 0; j < g.boxes.size(); ++j) {
      const std::size_t c = g.crops[i], b = g.boxes[j];
      const bool feasible = c <= min_dim && b > 0 && b < c;
      const double d = feasible ? mean_dice(refs, segmenter, c, b) : std::numeric_limits<double>::quiet_NaN();
      row.push_back(d);
      if (feasible && d > best) {
        best = d;
        g.best_crop = c;
        g.best_box = b;
      }
    }
    g.dice.push_back(std::move(row));
  }
  return g;
}

}  // namespace hrfseg::prompt
