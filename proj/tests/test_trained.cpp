// Checks that need a trained classifier. They reuse the run directory left
// behind by the acceptance binary (see tests/CMakeLists.txt) and skip when it
// is absent.

#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <random>

#include "hrfseg/io/png.hpp"
#include "hrfseg/iterate.hpp"
#include "hrfseg/lrp.hpp"
#include "hrfseg/synth.hpp"

namespace hrfseg {
namespace {
namespace fs = std::filesystem;

struct TrainedRun : ::testing::Test {
  static void SetUpTestSuite() {
    const char* dir = std::getenv("HRFSEG_TRAINED_RUN");
    if (!dir || !fs::exists(fs::path(dir) / "models" / "cct_binary.ckpt")) return;
    run = dir;
    data = new synth::Dataset(synth::load_dataset(run / "data"));
    model = models::load_model(run / "models" / "cct_binary.ckpt").release();
  }
  static void TearDownTestSuite() {
    delete data;
    delete model;
  }
  void SetUp() override {
    if (!model) GTEST_SKIP() << "no trained run; set HRFSEG_TRAINED_RUN";
  }
  static std::vector<const synth::Scan*> held_out() {
    auto v = data->scans_in(data->split.val);
    const auto t = data->scans_in(data->split.test);
    v.insert(v.end(), t.begin(), t.end());
    return v;
  }
  static Tensor blank() { return Tensor({data->params.rows, data->params.cols}, data->params.background); }

  static inline fs::path run;
  static inline synth::Dataset* data = nullptr;
  static inline models::Model* model = nullptr;
};

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.storage()) m = std::max(m, std::abs(v));
  return m;
}

struct Centroid {
  double row = 0.0, col = 0.0;
};

Centroid mean_position(const Mask& m) {
  Centroid c;
  double n = 0.0;
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t k = 0; k < m.cols; ++k) {
      if (!m(r, k)) continue;
      c.row += static_cast<double>(r);
      c.col += static_cast<double>(k);
      n += 1.0;
    }
  }
  return {c.row / n, c.col / n};
}

TEST_F(TrainedRun, BlankRelevanceIsTenTimesBelowPositives) {
  std::vector<double> peaks;
  for (const auto* s : held_out()) {
    if (s->positive()) peaks.push_back(max_abs(lrp::relevance_map(*model, s->image).map));
  }
  ASSERT_FALSE(peaks.empty());
  std::sort(peaks.begin(), peaks.end());
  const double median = peaks[peaks.size() / 2];
  const double b = max_abs(lrp::relevance_map(*model, blank()).map);
  std::printf("blank max |R| %.4g, median positive max |R| %.4g over %zu scans\n", b, median, peaks.size());
  EXPECT_LE(10.0 * b, median);
}

TEST_F(TrainedRun, RelevancePeakLocatesSingleFocus) {
  std::size_t n = 0, hit = 0;
  for (const auto* s : held_out()) {
    if (s->annotation.count() != 1) continue;
    const Pixel p = prompt::argmax_pixel(lrp::relevance_map(*model, s->image).map);
    const Centroid c = mean_position(s->annotation.focus(0));
    ++n;
    hit += std::hypot(p.row - c.row, p.col - c.col) <= 8.0;
  }
  ASSERT_GT(n, 0u);
  std::printf("relevance peak within 8 px on %zu of %zu single-focus scans\n", hit, n);
  EXPECT_GE(static_cast<double>(hit), 0.8 * static_cast<double>(n));
}

TEST_F(TrainedRun, BlankImageHasNoDetections) {
  prompt::BuiltinSegmenter seg;
  const auto d = iterate::run_iterative(blank(), *model, seg);
  EXPECT_TRUE(d.detections.empty());
  EXPECT_EQ(d.segmenter_calls, 0u);
  ASSERT_EQ(d.scores.size(), 1u);
  EXPECT_LT(d.scores[0], 0.05);
}

TEST_F(TrainedRun, SeparatedFociGetDistinctMasks) {
  prompt::BuiltinSegmenter seg;
  std::size_t n = 0, ok = 0;
  for (const auto* s : held_out()) {
    const std::size_t k = s->annotation.count();
    if (k < 3) continue;
    std::vector<Centroid> cs;
    for (std::size_t i = 0; i < k; ++i) cs.push_back(mean_position(s->annotation.focus(i)));
    bool separated = true;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = i + 1; j < k; ++j) {
        separated = separated && std::hypot(cs[i].row - cs[j].row, cs[i].col - cs[j].col) >= 64.0;
      }
    }
    if (!separated) continue;
    ++n;
    const auto d = iterate::run_iterative(s->image, *model, seg);
    std::vector<bool> claimed(k, false);
    std::size_t distinct = 0;
    for (const auto& det : d.detections) {
      for (std::size_t i = 0; i < k; ++i) {
        if (!claimed[i] && intersection_count(det.mask, s->annotation.focus(i)) > 0) {
          claimed[i] = true;
          ++distinct;
          break;
        }
      }
    }
    ok += distinct >= 2;
  }
  std::printf("%zu of %zu scans with >= 3 well-separated foci got >= 2 masks on distinct foci\n", ok, n);
  ASSERT_GT(n, 0u);
  EXPECT_EQ(ok, n);
}

TEST_F(TrainedRun, PositionalEmbeddingIsUsed) {
  const auto* cct = dynamic_cast<const models::CCTModel*>(model);
  ASSERT_NE(cct, nullptr);
  nn::ParamPtr table;
  for (const auto& p : cct->parameters()) {
    if (p->name.rfind("pos", 0) == 0) table = p;
  }
  ASSERT_TRUE(table);
  const Tensor original = table->value;
  const std::size_t tokens = original.dim(0), dim = original.dim(1);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x({data->params.rows, data->params.cols});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : x.storage()) v = u(rng);
    const Tensor before = cct->logits(cct->prepare(x));
    std::vector<std::size_t> perm(tokens);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t c = 0; c < dim; ++c) table->value.at(t, c) = original.at(perm[t], c);
    }
    const Tensor after = cct->logits(cct->prepare(x));
    table->value = original;
    EXPECT_NE(before, after) << "seed " << seed;
  }
}

TEST_F(TrainedRun, InferOnBlankImageWritesNoMasks) {
  const fs::path dir = fs::temp_directory_path() / "hrfseg_trained_infer";
  fs::remove_all(dir);
  fs::create_directories(dir);
  io::write_png(dir / "blank.png", io::gray_to_rgb(blank()));
  const std::string cmd = std::string(HRFSEG_CLI) + " --out " + dir.string() + " infer --checkpoint " +
                          (run / "models" / "cct_binary.ckpt").string() + " --image " + (dir / "blank.png").string();
  const int status = std::system(cmd.c_str());
  EXPECT_EQ(WEXITSTATUS(status), 0);
  EXPECT_TRUE(fs::exists(dir / "infer" / "blank_overlay.png"));
  EXPECT_FALSE(fs::exists(dir / "infer" / "blank_mask1.png"));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace hrfseg
