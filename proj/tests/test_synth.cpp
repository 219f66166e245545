#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "hrfseg/error.hpp"
#include "hrfseg/synth.hpp"

namespace hrfseg::synth {
namespace {

namespace fs = std::filesystem;

GenParams small(std::uint64_t seed = 7) {
  GenParams p;
  p.volumes = 6;
  p.slices = 4;
  p.rows = 96;
  p.cols = 128;
  p.band_top_min = 15;
  p.band_top_max = 25;
  p.band_height_min = 40;
  p.band_height_max = 55;
  p.band_amplitude_max = 5;
  p.seed = seed;
  return p;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("hrfseg_synth_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

TEST(Generate, Deterministic) {
  const Dataset a = generate(small()), b = generate(small());
  ASSERT_EQ(a.scans.size(), b.scans.size());
  for (std::size_t i = 0; i < a.scans.size(); ++i) {
    EXPECT_EQ(a.scans[i].image, b.scans[i].image);
    EXPECT_EQ(a.scans[i].annotation.labels, b.scans[i].annotation.labels);
  }
  const Dataset c = generate(small(8));
  EXPECT_NE(a.scans[0].image, c.scans[0].image);
}

TEST(Generate, ValuesAndFociInvariants) {
  const Dataset d = generate(small());
  EXPECT_EQ(d.scans.size(), 24u);
  for (const auto& s : d.scans) {
    EXPECT_GE(s.image.min(), 0.0);
    EXPECT_LE(s.image.max(), 1.0);
    for (double v : s.image.values()) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
    for (std::size_t k = 0; k < s.annotation.count(); ++k) {
      EXPECT_GE(s.annotation.areas[k], kMinFocusArea);
      EXPECT_EQ(s.annotation.focus(k).count(), s.annotation.areas[k]);
    }
  }
  std::size_t total = 0;
  for (const auto& v : d.volumes) {
    total += v.hrf_count;
    EXPECT_EQ(v.stratum, stratum_of(v.hrf_count));
  }
  EXPECT_GT(total, 0u);
}

TEST(Generate, MedianFocusAreaNearSeventeen) {
  GenParams p;
  p.volumes = 100;
  p.slices = 4;
  p.rows = 128;
  p.cols = 256;
  p.band_top_min = 20;
  p.band_top_max = 30;
  p.band_height_min = 80;
  p.band_height_max = 90;
  p.band_amplitude_max = 5;
  p.speckle = 0;
  std::vector<std::size_t> areas;
  for (const auto& s : generate(p).scans) areas.insert(areas.end(), s.annotation.areas.begin(), s.annotation.areas.end());
  ASSERT_GE(areas.size(), 1000u);
  std::nth_element(areas.begin(), areas.begin() + static_cast<long>(areas.size() / 2), areas.end());
  const std::size_t median = areas[areas.size() / 2];
  EXPECT_GE(median, 14u);
  EXPECT_LE(median, 20u);
}

TEST(Generate, ZeroFociMeansAllNegative) {
  GenParams p = small();
  p.foci_per_volume = 0;
  const Dataset d = generate(p);
  for (const auto& s : d.scans) EXPECT_FALSE(s.positive());
  for (const auto& v : d.volumes) EXPECT_EQ(v.hrf_count, 0u);
}

TEST(Generate, FocusCentersLieInsideBand) {
  const Dataset d = generate(small());
  for (const auto& s : d.scans) {
    const Mask retina = s.retina_mask();
    for (std::size_t k = 0; k < s.annotation.count(); ++k) {
      const Pixel c = centroid(s.annotation.focus(k));
      EXPECT_TRUE(retina(c.row, c.col));
    }
  }
}

TEST(Generate, InvalidParamsRejected) {
  GenParams p = small();
  p.band_top_max = 90;
  EXPECT_THROW(generate(p), ArgumentError);
  EXPECT_THROW(GenParams::from_json({{"nope", 1}}), ArgumentError);
}

TEST(GenParamsJson, RoundTrip) {
  const GenParams p = GenParams::paper();
  EXPECT_EQ(GenParams::from_json(p.to_json()).to_json(), p.to_json());
  EXPECT_EQ(p.rows, 496u);
  EXPECT_EQ(p.cols, 1024u);
}

std::vector<VolumeMeta> volumes_with_counts(const std::vector<std::size_t>& counts) {
  std::vector<VolumeMeta> v;
  for (std::size_t i = 0; i < counts.size(); ++i) v.push_back({i, counts[i], stratum_of(counts[i])});
  return v;
}

TEST(Split, TenVolumesOneStratum) {
  const Split s = split(volumes_with_counts(std::vector<std::size_t>(10, 3)), 1);
  EXPECT_EQ(s.test.size(), 2u);
  EXPECT_EQ(s.val.size(), 2u);
  EXPECT_EQ(s.train.size(), 6u);
}

TEST(Split, PartitionsExactlyAndStratifies) {
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < 40; ++i) counts.push_back((i * 7) % 25);
  const auto vols = volumes_with_counts(counts);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Split s = split(vols, seed);
    std::multiset<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.val.begin(), s.val.end());
    all.insert(s.test.begin(), s.test.end());
    ASSERT_EQ(all.size(), 40u);
    EXPECT_EQ(std::set<std::size_t>(all.begin(), all.end()).size(), 40u);

    std::map<int, std::pair<double, double>> per;  // stratum -> (test, total)
    for (const auto& v : vols) {
      per[v.stratum].second += 1;
      if (std::count(s.test.begin(), s.test.end(), v.id)) per[v.stratum].first += 1;
    }
    for (const auto& [stratum, tt] : per) EXPECT_LE(std::abs(tt.first - 0.2 * tt.second), 1.0) << stratum;
  }
}

TEST(Split, SmallStratumMergedWithWarning) {
  const Split s = split(volumes_with_counts({0, 0, 0, 0, 0, 3, 3, 3, 3, 40}), 3);
  ASSERT_EQ(s.warnings.size(), 1u);
  EXPECT_NE(s.warnings[0].find("merged"), std::string::npos);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), 10u);
}

TEST(Split, NeedsFiveVolumes) { EXPECT_THROW(split(volumes_with_counts({1, 2, 3, 4}), 0), ArgumentError); }

TEST(Split, GeneratedDatasetHasNoLeakage) {
  const Dataset d = generate(GenParams::desk());
  std::set<std::size_t> seen;
  for (const auto* ids : {&d.split.train, &d.split.val, &d.split.test}) {
    for (std::size_t id : *ids) EXPECT_TRUE(seen.insert(id).second);
  }
  EXPECT_EQ(seen.size(), 40u);
}

TEST(Persistence, SaveLoadSaveIsByteIdentical) {
  const fs::path a = scratch("a"), b = scratch("b");
  const Dataset d = generate(small());
  save_dataset(d, a);
  const Dataset loaded = load_dataset(a);
  save_dataset(loaded, b);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(entry.path()), slurp(b / entry.path().filename())) << entry.path();
    ++files;
  }
  EXPECT_EQ(files, 2 * d.scans.size() + 1);
  for (std::size_t i = 0; i < d.scans.size(); ++i) {
    EXPECT_EQ(loaded.scans[i].image, d.scans[i].image);
    EXPECT_EQ(loaded.scans[i].annotation.labels, d.scans[i].annotation.labels);
  }
  EXPECT_EQ(loaded.split.test, d.split.test);
}

TEST(Persistence, CorruptMagicNamesFile) {
  const fs::path dir = scratch("corrupt");
  save_dataset(generate(small()), dir);
  const fs::path victim = dir / "002_001.img";
  {
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  try {
    load_dataset(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("002_001.img"), std::string::npos) << e.what();
  }
}

TEST(Persistence, TruncatedMaskRejected) {
  const fs::path dir = scratch("trunc");
  save_dataset(generate(small()), dir);
  const fs::path victim = dir / "000_000.msk";
  fs::resize_file(victim, fs::file_size(victim) - 1);
  EXPECT_THROW(load_dataset(dir), FormatError);
}

TEST(Persistence, ManifestCountsMatchDisk) {
  const fs::path dir = scratch("counts");
  const Dataset d = generate(small());
  save_dataset(d, dir);
  std::ifstream is(dir / "manifest.json");
  const auto m = nlohmann::json::parse(is);
  std::size_t imgs = 0;
  for (const auto& e : fs::directory_iterator(dir)) imgs += e.path().extension() == ".img";
  EXPECT_EQ(m["counts"]["scans"].get<std::size_t>(), imgs);
  EXPECT_EQ(m["format_version"].get<int>(), kDatasetVersion);
}

}  // namespace
}  // namespace hrfseg::synth
