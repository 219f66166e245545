#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "hrfseg/error.hpp"
#include "hrfseg/iterate.hpp"
#include "hrfseg/prompt.hpp"

namespace hrfseg::iterate {
namespace {

// Positivity rises with the brightest pixel; relevance is the excess over a
// fixed level. Enough to drive the loop without training.
class BrightSpotModel final : public models::Model {
 public:
  BrightSpotModel() : Model(models::ModelKind::Cct, models::HeadKind::Binary) { set_stats({0.0, 1.0}); }
  Tensor logits(const Tensor& x) const override {
    const double mx = *std::max_element(x.storage().begin(), x.storage().end());
    return Tensor::from({40.0 * (mx - 0.6)});
  }
  Tensor accumulate_gradients(const Tensor&, const LossGrad&, nn::Gradients&) const override {
    throw StateError("not trainable");
  }
  models::RelevanceMap relevance(const Tensor& raw, double) const override {
    models::RelevanceMap r{Tensor(raw.shape()), 0.0, 0.0};
    for (std::size_t i = 0; i < raw.size(); ++i) {
      r.map[i] = std::max(raw[i] - 0.5, 0.0);
      r.source += r.map[i];
    }
    return r;
  }
  std::vector<nn::ParamPtr> parameters() const override { return {}; }
  nlohmann::json config() const override { return nlohmann::json::object(); }
  void save(const std::filesystem::path&, const nlohmann::json&) const override {}
};

class FailingSegmenter final : public prompt::Segmenter {
 public:
  explicit FailingSegmenter(int ok_calls) : ok_(ok_calls) {}
  std::vector<prompt::MaskCandidate> segment(const Tensor& crop, const prompt::Box& box) override {
    if (ok_-- <= 0) throw SegmenterError("bridge down");
    return prompt::builtin_segment(crop, box);
  }
  std::size_t native_side() const override { return prompt::kBuiltinSide; }
  std::string name() const override { return "failing"; }

 private:
  int ok_;
};

struct Blob {
  double row, col;
};

Tensor scene(const std::vector<Blob>& blobs) {
  Tensor img({96, 160}, 0.1);
  for (const auto& b : blobs) {
    for (std::size_t r = 0; r < 96; ++r) {
      for (std::size_t c = 0; c < 160; ++c) {
        const double d2 = (r - b.row) * (r - b.row) + (c - b.col) * (c - b.col);
        if (d2 <= 16.0) img.at(r, c) = 0.9;
      }
    }
  }
  return img;
}

Mask disk(const Blob& b, double radius) {
  Mask m(96, 160);
  for (std::size_t r = 0; r < 96; ++r) {
    for (std::size_t c = 0; c < 160; ++c) m(r, c) = (r - b.row) * (r - b.row) + (c - b.col) * (c - b.col) <= radius * radius;
  }
  return m;
}

TEST(Inpaint, Examples) {
  const Tensor img = scene({{40, 40}});
  EXPECT_EQ(inpaint(img, Mask(96, 160)), img);
  const Tensor flat({5, 5}, 0.25);
  Mask some(5, 5);
  some(1, 2) = 1;
  EXPECT_EQ(inpaint(flat, some), flat);
  Mask full(96, 160);
  full.data.assign(full.data.size(), 1);
  const Tensor out = inpaint(img, full);
  for (double v : out.storage()) EXPECT_EQ(v, image_mean(img));
  EXPECT_THROW(inpaint(img, Mask(4, 4)), ShapeError);
}

const std::vector<Blob> kThree = {{30, 30}, {60, 80}, {35, 130}};

TEST(Iterate, FindsSeparatedFociInTurn) {
  BrightSpotModel m;
  prompt::BuiltinSegmenter seg;
  const DetectionSet d = run_iterative(scene(kThree), m, seg);
  ASSERT_EQ(d.detections.size(), 3u);
  EXPECT_FALSE(d.error);
  EXPECT_EQ(d.segmenter_calls, 3u);
  EXPECT_EQ(d.scores.size(), 4u);
  EXPECT_LT(d.scores.back(), 0.05);
  std::vector<bool> hit(3, false);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = i + 1; j < 3; ++j) EXPECT_EQ(intersection_count(d.detections[i].mask, d.detections[j].mask), 0u);
    for (std::size_t b = 0; b < 3; ++b) {
      if (intersection_count(d.detections[i].mask, disk(kThree[b], 3.0)) > 0) hit[b] = true;
    }
  }
  EXPECT_EQ(hit, (std::vector<bool>{true, true, true}));
}

TEST(Iterate, CapAndThreshold) {
  BrightSpotModel m;
  prompt::BuiltinSegmenter seg;
  IterConfig one;
  one.max_iter = 1;
  EXPECT_EQ(run_iterative(scene(kThree), m, seg, one).detections.size(), 1u);
  IterConfig never;
  never.tau = std::numeric_limits<double>::infinity();
  const DetectionSet none = run_iterative(scene(kThree), m, seg, never);
  EXPECT_TRUE(none.detections.empty());
  EXPECT_EQ(none.segmenter_calls, 0u);
}

TEST(Iterate, BlankImageNeverPrompts) {
  BrightSpotModel m;
  prompt::BuiltinSegmenter seg;
  const DetectionSet d = run_iterative(scene({}), m, seg);
  EXPECT_TRUE(d.detections.empty());
  EXPECT_EQ(d.segmenter_calls, 0u);
}

TEST(Iterate, SegmenterFailureKeepsEarlierDetections) {
  BrightSpotModel m;
  FailingSegmenter seg(1);
  const DetectionSet d = run_iterative(scene(kThree), m, seg);
  EXPECT_EQ(d.detections.size(), 1u);
  EXPECT_TRUE(d.error);
  EXPECT_NE(d.error_message.find("bridge down"), std::string::npos);
}

TEST(Iterate, RecallNeverDropsWithMoreIterations) {
  BrightSpotModel m;
  prompt::BuiltinSegmenter seg;
  const Tensor img = scene(kThree);
  Mask gt(96, 160);
  for (const auto& b : kThree) merge_into(gt, disk(b, 3.0));
  std::size_t prev = 0;
  for (std::size_t k = 1; k <= 6; ++k) {
    IterConfig c;
    c.max_iter = k;
    const std::size_t hit = intersection_count(run_iterative(img, m, seg, c).combined(96, 160), gt);
    EXPECT_GE(hit, prev);
    prev = hit;
  }
}

TEST(Iterate, ConfigValidation) {
  IterConfig c;
  c.max_iter = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  EXPECT_THROW(IterConfig::from_json({{"taus", 1}}, IterConfig{}), ArgumentError);
  EXPECT_EQ(IterConfig::from_json({{"max_iter", 3}}, IterConfig{}).max_iter, 3u);
}

}  // namespace
}  // namespace hrfseg::iterate
