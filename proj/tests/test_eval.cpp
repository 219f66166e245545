#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "hrfseg/error.hpp"
#include "hrfseg/eval.hpp"
#include "oracles.hpp"

namespace hrfseg::eval {
namespace {

using testing::pairwise_auroc;
using testing::prefix_ap;
using testing::threshold_dice;

void random_case(std::mt19937_64& rng, std::vector<double>& s, std::vector<int>& y) {
  const std::size_t n = 2 + rng() % 40;
  s.resize(n);
  y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = static_cast<double>(rng() % 7) / 6.0;  // plenty of ties
    y[i] = static_cast<int>(rng() % 2);
  }
  y[0] = 1;
  y[1] = 0;
}

TEST(Classification, MatchesBruteForceOracles) {
  std::mt19937_64 rng(11);
  std::vector<double> s;
  std::vector<int> y;
  for (int rep = 0; rep < 300; ++rep) {
    random_case(rng, s, y);
    EXPECT_DOUBLE_EQ(auroc(s, y), pairwise_auroc(s, y));
    EXPECT_NEAR(average_precision(s, y), prefix_ap(s, y), 1e-12);
  }
}

TEST(Classification, KnownValues) {
  const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
  const std::vector<int> y = {0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auroc(s, y), 0.75);
  EXPECT_NEAR(average_precision(s, y), 5.0 / 6.0, 1e-15);
  EXPECT_DOUBLE_EQ(auroc({0.3, 0.3, 0.3}, {1, 0, 1}), 0.5);
  EXPECT_NEAR(average_precision({0.9, 0.8, 0.7, 0.1}, {0, 0, 0, 1}), 0.25, 1e-15);
  EXPECT_THROW(auroc({0.1, 0.2}, {1, 1}), MetricError);
  EXPECT_THROW(average_precision({0.1, 0.2}, {0, 0}), MetricError);
  EXPECT_THROW(auroc({0.1}, {1, 0}), ArgumentError);
}

TEST(Classification, F1) {
  // TP 2, FP 1, FN 1.
  EXPECT_NEAR(f1_binarized({0.9, 0.8, 0.7, 0.2, 0.1}, {1, 1, 0, 1, 0}), 2.0 / 3.0, 1e-15);
  bool degenerate = false;
  EXPECT_EQ(f1_binarized({0.1, 0.2}, {0, 0}, 0.5, &degenerate), 1.0);
  EXPECT_TRUE(degenerate);
  EXPECT_EQ(f1_binarized({1.0, 2.0}, {0, 1}, 1.5), 1.0);
}

Mask mask_of(std::size_t rows, std::size_t cols, std::initializer_list<std::size_t> on) {
  Mask m(rows, cols);
  for (auto i : on) m.data[i] = 1;
  return m;
}

TEST(PixelMetrics, Examples) {
  const Mask pred = mask_of(2, 3, {0, 1, 2});
  const Mask gt = mask_of(2, 3, {1, 2, 3, 4});
  EXPECT_NEAR(dice(pred, gt), 4.0 / 7.0, 1e-15);
  EXPECT_NEAR(pixel_recall(pred, gt), 0.5, 1e-15);
  EXPECT_NEAR(pixel_precision(pred, gt), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(dice(Mask(2, 3), Mask(2, 3)), 1.0);
  EXPECT_EQ(dice(Mask(2, 3), gt), 0.0);
  EXPECT_THROW(dice(Mask(2, 2), gt), ShapeError);
}

Tensor random_map(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<double> u(-0.2, 1.0);
  Tensor t({rows, cols});
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

Mask random_gt(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  Mask m(rows, cols);
  for (auto& v : m.data) v = rng() % 4 == 0;
  return m;
}

TEST(Threshold, GridIsLogSpacedOverPositiveRange) {
  Tensor a = Tensor::from({-1.0, 0.0, 0.01, 2.0});
  Tensor b = Tensor::from({0.5, 10.0});
  const auto grid = threshold_grid({&a, &b});
  ASSERT_EQ(grid.size(), kThresholdCandidates);
  EXPECT_NEAR(grid.front(), 0.01, 1e-15);
  EXPECT_NEAR(grid.back(), 10.0, 1e-12);
  const double step = std::log(grid[1] / grid[0]);
  for (std::size_t i = 1; i < grid.size(); ++i) EXPECT_NEAR(std::log(grid[i] / grid[i - 1]), step, 1e-9);
  Tensor neg = Tensor::from({-1.0, 0.0});
  EXPECT_TRUE(threshold_grid({&neg}).empty());
}

TEST(Threshold, CurveMatchesDirectThresholding) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor m = random_map(rng, 9, 13);
    const Mask gt = random_gt(rng, 9, 13);
    const auto grid = threshold_grid({&m}, 37);
    const auto curve = dice_curve(m, gt, grid);
    for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_NEAR(curve[k], threshold_dice(m, gt, grid[k]), 1e-12);
  }
}

TEST(Threshold, CalibrationAndOracleAgreeWithExhaustiveSearch) {
  std::mt19937_64 rng(9);
  std::vector<Tensor> maps;
  std::vector<Mask> gts;
  for (int i = 0; i < 8; ++i) {
    maps.push_back(random_map(rng, 10, 12));
    gts.push_back(random_gt(rng, 10, 12));
  }
  std::vector<const Tensor*> mp;
  std::vector<const Mask*> gp;
  for (int i = 0; i < 8; ++i) {
    mp.push_back(&maps[i]);
    gp.push_back(&gts[i]);
  }
  const auto grid = threshold_grid(mp, 50);
  double best = -1.0, best_t = 0.0;
  for (double t : grid) {
    double mean = 0.0;
    for (int i = 0; i < 8; ++i) mean += threshold_dice(maps[i], gts[i], t) / 8.0;
    if (mean >= best - 1e-15) best = mean, best_t = t;
  }
  const Calibration cal = calibrate_global_threshold(mp, gp, grid);
  EXPECT_EQ(cal.threshold, best_t);
  EXPECT_NEAR(cal.dice, best, 1e-12);
  EXPECT_NE(std::find(grid.begin(), grid.end(), cal.threshold), grid.end());
  EXPECT_NEAR(mean_threshold_dice(mp, gp, cal.threshold), cal.dice, 1e-12);

  double oracle = 0.0;
  for (int i = 0; i < 8; ++i) {
    double b = 0.0;
    for (double t : grid) b = std::max(b, threshold_dice(maps[i], gts[i], t));
    oracle += b / 8.0;
  }
  EXPECT_NEAR(oracle_threshold_dice(mp, gp, grid), oracle, 1e-12);
  EXPECT_GE(oracle_threshold_dice(mp, gp, grid), cal.dice);
}

TEST(Threshold, SinglePixelCase) {
  // One hot pixel over a weak background: the best cut isolates it.
  Tensor m({4, 4}, 0.01);
  m.at(2, 1) = 1.0;
  Mask gt(4, 4);
  gt(2, 1) = 1;
  const Calibration cal = calibrate_global_threshold({&m}, {&gt});
  EXPECT_EQ(cal.dice, 1.0);
  EXPECT_GT(cal.threshold, 0.01);
  EXPECT_LE(cal.threshold, 1.0);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TEST(Report, ShapeAndDeterminism) {
  const synth::Dataset ds = synth::generate(testing::tiny_params(4));
  std::vector<const synth::Scan*> scans;
  for (const auto& s : ds.scans) scans.push_back(&s);
  models::CCTModel cct(testing::tiny_cct(), models::HeadKind::Binary, 2);
  std::vector<const Tensor*> imgs;
  for (const auto* s : scans) imgs.push_back(&s->image);
  cct.set_stats(preprocess::compute_stats(imgs));

  std::vector<int> labels;
  for (const auto* s : scans) labels.push_back(s->positive());
  ASSERT_NE(std::count(labels.begin(), labels.end(), 1), 0);
  ASSERT_NE(std::count(labels.begin(), labels.end(), 0), 0);

  prompt::BuiltinSegmenter seg;
  const auto dir = std::filesystem::temp_directory_path() / "hrfseg_report_test";
  std::filesystem::create_directories(dir);
  for (int run = 0; run < 2; ++run) {
    const Report r = build_report({&cct}, scans, scans, seg);
    ASSERT_EQ(r.rows.size(), 1u);
    ASSERT_EQ(r.rows[0].segmentation.size(), 2u);
    EXPECT_LE(r.rows[0].segmentation[0].recall, r.rows[0].segmentation[1].recall);
    EXPECT_EQ(r.rows[0].ablation.segmenter_dice, r.rows[0].segmentation[1].dice_positive);
    write_report_csv(dir / ("r" + std::to_string(run) + ".csv"), r);
    write_report_txt(dir / ("r" + std::to_string(run) + ".txt"), r);
  }
  const std::string csv = slurp(dir / "r0.csv");
  EXPECT_EQ(csv, slurp(dir / "r1.csv"));
  EXPECT_EQ(slurp(dir / "r0.txt"), slurp(dir / "r1.txt"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 + 2 * 4 + 5 + 1);
  EXPECT_EQ(csv.rfind("model,task,block,metric,value\n", 0), 0u);
  EXPECT_NE(csv.find("cct,binary,segmentation@6,recall,"), std::string::npos);
  EXPECT_NE(slurp(dir / "r0.txt").find("[0.90]"), std::string::npos);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace hrfseg::eval
