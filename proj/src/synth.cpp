#include "hrfseg/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "hrfseg/error.hpp"
#include "hrfseg/io/binary.hpp"

namespace hrfseg::synth {

namespace {

using Rng = std::mt19937_64;

constexpr std::array<char, 8> kImageMagic = {'H', 'R', 'F', 'I', 'M', 'G', '0', '1'};
constexpr std::array<char, 8> kMaskMagic = {'H', 'R', 'F', 'M', 'S', 'K', '0', '1'};

Rng volume_rng(std::uint64_t seed, std::size_t volume) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(volume), 0x5eedu};
  return Rng(seq);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct Focus {
  double cy, cx, sy, sx, amplitude;
};

// Pixels inside the half-maximum ellipse of a Gaussian blob.
std::vector<std::size_t> half_max_pixels(const Focus& f, std::size_t rows, std::size_t cols) {
  std::vector<std::size_t> out;
  const double limit = 2.0 * std::numbers::ln2;
  const long ry = static_cast<long>(std::ceil(2.0 * f.sy)) + 1, rx = static_cast<long>(std::ceil(2.0 * f.sx)) + 1;
  const long cy = std::lround(f.cy), cx = std::lround(f.cx);
  for (long r = cy - ry; r <= cy + ry; ++r) {
    if (r < 0 || r >= static_cast<long>(rows)) continue;
    for (long c = cx - rx; c <= cx + rx; ++c) {
      if (c < 0 || c >= static_cast<long>(cols)) continue;
      const double dy = (static_cast<double>(r) - f.cy) / f.sy, dx = (static_cast<double>(c) - f.cx) / f.sx;
      if (dy * dy + dx * dx <= limit) out.push_back(static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(c));
    }
  }
  return out;
}

bool collides(const std::vector<std::size_t>& pixels, const std::vector<std::uint16_t>& labels, std::size_t rows,
              std::size_t cols) {
  constexpr long kGap = 2;
  for (std::size_t p : pixels) {
    const long r = static_cast<long>(p / cols), c = static_cast<long>(p % cols);
    for (long dr = -kGap; dr <= kGap; ++dr) {
      for (long dc = -kGap; dc <= kGap; ++dc) {
        const long rr = r + dr, cc = c + dc;
        if (rr < 0 || cc < 0 || rr >= static_cast<long>(rows) || cc >= static_cast<long>(cols)) continue;
        if (labels[static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc)]) return true;
      }
    }
  }
  return false;
}

BandGeometry draw_band(const GenParams& p, Rng& rng) {
  BandGeometry b;
  b.top = uniform(rng, p.band_top_min, p.band_top_max);
  b.amplitude = uniform(rng, 0.0, p.band_amplitude_max);
  b.period = uniform(rng, p.band_period_min, p.band_period_max);
  b.phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  b.height = uniform(rng, p.band_height_min, p.band_height_max);
  return b;
}

Scan render_scan(const GenParams& p, std::size_t volume, std::size_t slice, std::size_t n_foci, Rng& rng,
                 std::vector<std::string>& warnings) {
  Scan scan;
  scan.volume = volume;
  scan.slice = slice;
  scan.band = draw_band(p, rng);
  const std::size_t R = p.rows, C = p.cols;
  Annotation& ann = scan.annotation;
  ann.rows = R;
  ann.cols = C;
  ann.labels.assign(R * C, 0);

  std::vector<double> clean(R * C);
  for (std::size_t c = 0; c < C; ++c) {
    const double top = scan.band.top_at(static_cast<double>(c)), bottom = scan.band.bottom_at(static_cast<double>(c));
    for (std::size_t r = 0; r < R; ++r) {
      const double y = static_cast<double>(r);
      // fraction of the pixel's vertical extent covered by the band
      const double f = std::clamp(std::min(y + 0.5, bottom) - std::max(y - 0.5, top), 0.0, 1.0);
      clean[r * C + c] = p.background + (p.band_intensity - p.background) * f;
    }
  }

  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<Focus> foci;
  for (std::size_t k = 0; k < n_foci; ++k) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < p.max_rejections && !placed; ++attempt) {
      Focus f;
      f.cx = uniform(rng, 4.0, static_cast<double>(C) - 5.0);
      const double top = scan.band.top_at(f.cx) + 5.0, bottom = scan.band.bottom_at(f.cx) - 5.0;
      f.cy = uniform(rng, top, bottom);
      const double s = p.focus_sigma_median * std::exp(p.focus_sigma_spread * unit(rng));
      const double ratio = std::exp(p.focus_anisotropy * unit(rng));
      f.sx = s * ratio;
      f.sy = s / ratio;
      f.amplitude = uniform(rng, p.focus_contrast_min, p.focus_contrast_max);
      const auto pixels = half_max_pixels(f, R, C);
      if (pixels.size() < kMinFocusArea || collides(pixels, ann.labels, R, C)) continue;
      const auto label = static_cast<std::uint16_t>(foci.size() + 1);
      for (std::size_t px : pixels) ann.labels[px] = label;
      ann.areas.push_back(pixels.size());
      foci.push_back(f);
      placed = true;
    }
    if (!placed) {
      warnings.push_back("volume " + std::to_string(volume) + " slice " + std::to_string(slice) +
                         ": focus skipped after " + std::to_string(p.max_rejections) + " rejections");
    }
  }

  for (const Focus& f : foci) {
    const long ry = static_cast<long>(std::ceil(4.0 * f.sy)), rx = static_cast<long>(std::ceil(4.0 * f.sx));
    const long cy = std::lround(f.cy), cx = std::lround(f.cx);
    for (long r = std::max(0L, cy - ry); r <= std::min<long>(static_cast<long>(R) - 1, cy + ry); ++r) {
      for (long c = std::max(0L, cx - rx); c <= std::min<long>(static_cast<long>(C) - 1, cx + rx); ++c) {
        const double dy = (static_cast<double>(r) - f.cy) / f.sy, dx = (static_cast<double>(c) - f.cx) / f.sx;
        clean[static_cast<std::size_t>(r) * C + static_cast<std::size_t>(c)] +=
            f.amplitude * std::exp(-0.5 * (dy * dy + dx * dx));
      }
    }
  }

  scan.image = Tensor({R, C});
  for (std::size_t i = 0; i < R * C; ++i) {
    const double speckle = std::max(0.0, 1.0 + p.speckle * unit(rng));
    const double v = clean[i] * speckle + p.background_noise * unit(rng);
    scan.image[i] = static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0)));
  }
  return scan;
}

}  // namespace

// ---- params --------------------------------------------------------------------

GenParams GenParams::paper() {
  GenParams p;
  p.rows = 496;
  p.cols = 1024;
  p.band_top_min = 120.0;
  p.band_top_max = 200.0;
  p.band_height_min = 180.0;
  p.band_height_max = 260.0;
  p.band_amplitude_max = 25.0;
  p.band_period_min = 800.0;
  p.band_period_max = 2400.0;
  return p;
}

void GenParams::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ArgumentError(std::string("GenParams: ") + what);
  };
  require(volumes > 0 && slices > 0, "volumes and slices must be positive");
  require(rows >= 16 && cols >= 16, "image must be at least 16x16");
  require(band_top_min >= 0 && band_top_min <= band_top_max, "band top range");
  require(band_height_min > 10 && band_height_min <= band_height_max, "band height range");
  require(band_top_max + band_amplitude_max + band_height_max < static_cast<double>(rows), "band must fit the image");
  require(band_period_min > 0 && band_period_min <= band_period_max, "band period range");
  require(band_amplitude_max >= 0 && speckle >= 0 && background_noise >= 0, "noise levels");
  require(foci_per_volume >= 0, "foci_per_volume");
  require(focus_contrast_min > 0 && focus_contrast_min <= focus_contrast_max, "focus contrast range");
  require(focus_sigma_median > 0 && focus_sigma_spread >= 0 && focus_anisotropy >= 0, "focus shape");
  require(max_rejections > 0, "max_rejections");
}

nlohmann::json GenParams::to_json() const {
  return {{"volumes", volumes},
          {"slices", slices},
          {"rows", rows},
          {"cols", cols},
          {"band_top_min", band_top_min},
          {"band_top_max", band_top_max},
          {"band_height_min", band_height_min},
          {"band_height_max", band_height_max},
          {"band_amplitude_max", band_amplitude_max},
          {"band_period_min", band_period_min},
          {"band_period_max", band_period_max},
          {"band_intensity", band_intensity},
          {"background", background},
          {"speckle", speckle},
          {"background_noise", background_noise},
          {"foci_per_volume", foci_per_volume},
          {"focus_contrast_min", focus_contrast_min},
          {"focus_contrast_max", focus_contrast_max},
          {"focus_sigma_median", focus_sigma_median},
          {"focus_sigma_spread", focus_sigma_spread},
          {"focus_anisotropy", focus_anisotropy},
          {"max_rejections", max_rejections},
          {"seed", seed}};
}

GenParams GenParams::from_json(const nlohmann::json& j) {
  GenParams p;
  const nlohmann::json def = p.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!def.contains(key)) throw ArgumentError("GenParams: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("volumes", p.volumes);
  get("slices", p.slices);
  get("rows", p.rows);
  get("cols", p.cols);
  get("band_top_min", p.band_top_min);
  get("band_top_max", p.band_top_max);
  get("band_height_min", p.band_height_min);
  get("band_height_max", p.band_height_max);
  get("band_amplitude_max", p.band_amplitude_max);
  get("band_period_min", p.band_period_min);
  get("band_period_max", p.band_period_max);
  get("band_intensity", p.band_intensity);
  get("background", p.background);
  get("speckle", p.speckle);
  get("background_noise", p.background_noise);
  get("foci_per_volume", p.foci_per_volume);
  get("focus_contrast_min", p.focus_contrast_min);
  get("focus_contrast_max", p.focus_contrast_max);
  get("focus_sigma_median", p.focus_sigma_median);
  get("focus_sigma_spread", p.focus_sigma_spread);
  get("focus_anisotropy", p.focus_anisotropy);
  get("max_rejections", p.max_rejections);
  get("seed", p.seed);
  return p;
}

double BandGeometry::top_at(double col) const {
  return top + amplitude * std::sin(2.0 * std::numbers::pi * col / period + phase);
}

nlohmann::json BandGeometry::to_json() const {
  return {{"top", top}, {"amplitude", amplitude}, {"period", period}, {"phase", phase}, {"height", height}};
}

BandGeometry BandGeometry::from_json(const nlohmann::json& j) {
  return {j.at("top").get<double>(), j.at("amplitude").get<double>(), j.at("period").get<double>(),
          j.at("phase").get<double>(), j.at("height").get<double>()};
}

Mask Annotation::focus(std::size_t k) const {
  Mask m(rows, cols);
  const auto label = static_cast<std::uint16_t>(k + 1);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels[i] == label;
  return m;
}

Mask Annotation::all() const {
  Mask m(rows, cols);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels[i] != 0;
  return m;
}

Mask Scan::retina_mask() const {
  const std::size_t R = image.dim(0), C = image.dim(1);
  Mask m(R, C);
  for (std::size_t c = 0; c < C; ++c) {
    const double top = band.top_at(static_cast<double>(c)), bottom = band.bottom_at(static_cast<double>(c));
    for (std::size_t r = 0; r < R; ++r) {
      const double y = static_cast<double>(r);
      m(r, c) = (y - 0.5 >= top && y + 0.5 <= bottom) ? 1 : 0;
    }
  }
  return m;
}

int stratum_of(std::size_t hrf_count) {
  if (hrf_count == 0) return 0;
  if (hrf_count <= 5) return 1;
  if (hrf_count <= 15) return 2;
  return 3;
}

std::vector<const Scan*> Dataset::scans_in(const std::vector<std::size_t>& volume_ids) const {
  std::vector<const Scan*> out;
  for (const auto& s : scans) {
    if (std::find(volume_ids.begin(), volume_ids.end(), s.volume) != volume_ids.end()) out.push_back(&s);
  }
  return out;
}

// ---- generation ------------------------------------------------------------------

Dataset generate(const GenParams& params) {
  params.validate();
  Dataset data;
  data.params = params;
  for (std::size_t v = 0; v < params.volumes; ++v) {
    Rng rng = volume_rng(params.seed, v);
    const std::size_t n_foci =
        params.foci_per_volume > 0 ? std::poisson_distribution<std::size_t>(params.foci_per_volume)(rng) : 0;
    std::vector<std::size_t> per_slice(params.slices, 0);
    std::uniform_int_distribution<std::size_t> pick_slice(0, params.slices - 1);
    for (std::size_t k = 0; k < n_foci; ++k) ++per_slice[pick_slice(rng)];

    std::size_t placed = 0;
    for (std::size_t s = 0; s < params.slices; ++s) {
      data.scans.push_back(render_scan(params, v, s, per_slice[s], rng, data.warnings));
      placed += data.scans.back().annotation.count();
    }
    data.volumes.push_back(VolumeMeta{v, placed, stratum_of(placed)});
  }
  if (data.volumes.size() >= 5) {
    data.split = split(data.volumes, params.seed);
  } else {
    for (const auto& v : data.volumes) data.split.train.push_back(v.id);
    data.split.warnings.push_back("fewer than 5 volumes; every volume assigned to train");
  }
  return data;
}

Split split(const std::vector<VolumeMeta>& volumes, std::uint64_t seed) {
  if (volumes.size() < 5) throw ArgumentError("split needs at least 5 volumes, got " + std::to_string(volumes.size()));
  Split out;
  std::array<std::vector<std::size_t>, 4> strata;
  for (const auto& v : volumes) strata.at(static_cast<std::size_t>(v.stratum)).push_back(v.id);

  for (std::size_t s = 0; s < strata.size(); ++s) {
    if (strata[s].empty() || strata[s].size() >= 2) continue;
    std::size_t best = s;
    for (std::size_t d = 1; d < strata.size() && best == s; ++d) {
      if (s >= d && !strata[s - d].empty()) best = s - d;
      else if (s + d < strata.size() && !strata[s + d].empty()) best = s + d;
    }
    if (best == s) continue;
    out.warnings.push_back("stratum " + std::to_string(s) + " has " + std::to_string(strata[s].size()) +
                           " volume(s); merged into stratum " + std::to_string(best));
    strata[best].insert(strata[best].end(), strata[s].begin(), strata[s].end());
    strata[s].clear();
  }

  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  for (auto& ids : strata) {
    if (ids.empty()) continue;
    std::sort(ids.begin(), ids.end());
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(ids.size())));
    const std::size_t n_train_all = ids.size() - n_test;
    const auto n_val = static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n_train_all)));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i < n_test) out.test.push_back(ids[i]);
      else if (i < n_test + n_val) out.val.push_back(ids[i]);
      else out.train.push_back(ids[i]);
    }
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// ---- persistence ---------------------------------------------------------------

namespace {

std::string scan_stem(std::size_t volume, std::size_t slice) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%03zu_%03zu", volume, slice);
  return buf;
}

void read_magic(std::istream& is, const std::array<char, 8>& expected, const std::string& where) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != expected) throw FormatError(where + ": bad magic bytes");
}

void expect_eof(std::istream& is, const std::string& where) {
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(where + ": trailing bytes");
}

}  // namespace

void write_image(const std::filesystem::path& path, const Tensor& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os.write(kImageMagic.data(), kImageMagic.size());
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(image.dim(0)));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(image.dim(1)));
  std::vector<float> values(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) values[i] = static_cast<float>(image[i]);
  io::write_array_le<float>(os, values);
}

Tensor read_image(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + where);
  read_magic(is, kImageMagic, where);
  const auto rows = io::read_le<std::uint32_t>(is, where);
  const auto cols = io::read_le<std::uint32_t>(is, where);
  std::vector<float> values(static_cast<std::size_t>(rows) * cols);
  io::read_array_le<float>(is, values, where);
  expect_eof(is, where);
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < values.size(); ++i) t[i] = values[i];
  return t;
}

void write_masks(const std::filesystem::path& path, const Annotation& ann) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os.write(kMaskMagic.data(), kMaskMagic.size());
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ann.rows));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ann.cols));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ann.count()));
  for (std::size_t k = 0; k < ann.count(); ++k) {
    const Mask m = ann.focus(k);
    io::write_array_le<std::uint8_t>(os, m.data);
  }
}

Annotation read_masks(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + where);
  read_magic(is, kMaskMagic, where);
  Annotation ann;
  ann.rows = io::read_le<std::uint32_t>(is, where);
  ann.cols = io::read_le<std::uint32_t>(is, where);
  const auto count = io::read_le<std::uint32_t>(is, where);
  if (count >= 65535) throw FormatError(where + ": too many foci");
  ann.labels.assign(ann.rows * ann.cols, 0);
  std::vector<std::uint8_t> plane(ann.rows * ann.cols);
  for (std::uint32_t k = 0; k < count; ++k) {
    io::read_array_le<std::uint8_t>(is, plane, where);
    std::size_t area = 0;
    for (std::size_t i = 0; i < plane.size(); ++i) {
      if (!plane[i]) continue;
      if (ann.labels[i]) throw FormatError(where + ": overlapping foci");
      ann.labels[i] = static_cast<std::uint16_t>(k + 1);
      ++area;
    }
    ann.areas.push_back(area);
  }
  expect_eof(is, where);
  return ann;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json scans = nlohmann::json::array();
  std::size_t positives = 0, foci = 0;
  for (const auto& s : data.scans) {
    const std::string stem = scan_stem(s.volume, s.slice);
    write_image(dir / (stem + ".img"), s.image);
    write_masks(dir / (stem + ".msk"), s.annotation);
    scans.push_back({{"volume", s.volume},
                     {"slice", s.slice},
                     {"file", stem},
                     {"foci", s.annotation.count()},
                     {"areas", s.annotation.areas},
                     {"band", s.band.to_json()}});
    positives += s.positive();
    foci += s.annotation.count();
  }
  nlohmann::json volumes = nlohmann::json::array();
  for (const auto& v : data.volumes) volumes.push_back({{"id", v.id}, {"hrf_count", v.hrf_count}, {"stratum", v.stratum}});
  const nlohmann::json manifest = {
      {"format_version", kDatasetVersion},
      {"params", data.params.to_json()},
      {"seed", data.params.seed},
      {"counts",
       {{"volumes", data.volumes.size()}, {"scans", data.scans.size()}, {"positive_scans", positives}, {"foci", foci}}},
      {"split",
       {{"train", data.split.train}, {"val", data.split.val}, {"test", data.split.test}, {"warnings", data.split.warnings}}},
      {"volumes", volumes},
      {"scans", scans},
      {"warnings", data.warnings}};
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  os << manifest.dump(1) << '\n';
  if (!os) throw FormatError("failed writing " + (dir / "manifest.json").string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) throw FormatError("cannot open " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  if (m.value("format_version", -1) != kDatasetVersion) {
    throw FormatError(manifest_path.string() + ": unsupported format version");
  }
  Dataset data;
  try {
    data.params = GenParams::from_json(m.at("params"));
    for (const auto& v : m.at("volumes")) {
      data.volumes.push_back({v.at("id").get<std::size_t>(), v.at("hrf_count").get<std::size_t>(), v.at("stratum").get<int>()});
    }
    const auto& sp = m.at("split");
    data.split.train = sp.at("train").get<std::vector<std::size_t>>();
    data.split.val = sp.at("val").get<std::vector<std::size_t>>();
    data.split.test = sp.at("test").get<std::vector<std::size_t>>();
    data.split.warnings = sp.at("warnings").get<std::vector<std::string>>();
    data.warnings = m.at("warnings").get<std::vector<std::string>>();
    for (const auto& e : m.at("scans")) {
      Scan s;
      s.volume = e.at("volume").get<std::size_t>();
      s.slice = e.at("slice").get<std::size_t>();
      s.band = BandGeometry::from_json(e.at("band"));
      const std::string stem = e.at("file").get<std::string>();
      s.image = read_image(dir / (stem + ".img"));
      s.annotation = read_masks(dir / (stem + ".msk"));
      if (s.annotation.count() != e.at("foci").get<std::size_t>() ||
          s.annotation.areas != e.at("areas").get<std::vector<std::size_t>>()) {
        throw FormatError(stem + ".msk: focus count or areas disagree with manifest");
      }
      data.scans.push_back(std::move(s));
    }
    const auto& counts = m.at("counts");
    if (counts.at("scans").get<std::size_t>() != data.scans.size() ||
        counts.at("volumes").get<std::size_t>() != data.volumes.size()) {
      throw FormatError(manifest_path.string() + ": counts disagree with on-disk scans");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  return data;
}

}  // namespace hrfseg::synth
