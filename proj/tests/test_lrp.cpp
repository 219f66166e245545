#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "hrfseg/error.hpp"
#include "hrfseg/lrp.hpp"
#include "hrfseg/models.hpp"
#include "support.hpp"

namespace hrfseg::lrp {
namespace {

using hrfseg::testing::random_tensor;
using hrfseg::testing::randomize_parameters;

nn::ParamPtr param(const char* name, Tensor v) {
  auto p = std::make_shared<nn::Parameter>();
  p->name = name;
  p->value = std::move(v);
  return p;
}

nn::RelevanceResult run(const nn::Graph& g, const Tensor& x, const Tensor& r_out) {
  nn::Trace t;
  nn::forward(g, x, &t);
  return nn::propagate_relevance(g, t, r_out);
}

void expect_layer_conservation(const nn::RelevanceResult& r, double rel = 1e-6) {
  for (const auto& l : r.layers) {
    EXPECT_NEAR(l.sum_in + l.absorbed, l.sum_out, rel * std::max(1.0, std::abs(l.sum_out))) << l.node;
  }
}

TEST(LinearRule, IdentityPassesRelevanceThrough) {
  nn::Graph g({3});
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  g.add("fc", std::make_unique<nn::Linear>(param("weight", eye), param("bias", Tensor({3}))));
  const Tensor r_out = Tensor::from({0.5, -2.0, 1.5});
  const auto r = run(g, Tensor::from({0.7, -1.2, 2.0}), r_out);
  // Only the epsilon stabilizer separates R_in from R_out: eps / |z| relative.
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(r.input[i], r_out[i], 1e-5 * std::abs(r_out[i]));
}

TEST(LinearRule, Proportionality) {
  nn::Graph g({2});
  g.add("fc", std::make_unique<nn::Linear>(param("weight", Tensor::from({1.0, 1.0}).reshaped({1, 2})),
                                           param("bias", Tensor({1}))));
  const auto r = run(g, Tensor::from({3.0, 1.0}), Tensor::from({4.0}));
  EXPECT_NEAR(r.input[0], 3.0, 1e-6);
  EXPECT_NEAR(r.input[1], 1.0, 1e-6);
}

TEST(LinearRule, RandomLayerConservesWithAbsorption) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    nn::Graph g({5, 7});
    g.add("fc", std::make_unique<nn::Linear>(7, 4, rng));
    randomize_parameters(g, rng);
    const auto r = run(g, random_tensor({5, 7}, rng), random_tensor({5, 4}, rng));
    expect_layer_conservation(r);
  }
}

TEST(ConvRule, RandomLayerConserves) {
  std::mt19937_64 rng(11);
  nn::Graph g({2, 9, 9});
  g.add("conv", std::make_unique<nn::Conv2d>(2, 3, 3, nn::ConvGeometry{2, 1}, rng));
  randomize_parameters(g, rng);
  const auto r = run(g, random_tensor({2, 9, 9}, rng), random_tensor(g.output_shape(), rng));
  expect_layer_conservation(r);
}

TEST(PassThrough, ReluKeepsRelevance) {
  nn::Graph g({4});
  g.add("relu", std::make_unique<nn::Elementwise>(nn::LayerKind::Relu));
  const Tensor r_out = Tensor::from({1.0, 2.0, -3.0, 0.5});
  EXPECT_EQ(run(g, Tensor::from({-1.0, 2.0, 3.0, -0.5}), r_out).input, r_out);
}

TEST(MaxPool, WinnerTakesAll) {
  nn::Graph g({1, 2, 2});
  g.add("pool", std::make_unique<nn::MaxPool2d>(2, 2));
  const auto unique = run(g, Tensor::from({0.1, 0.9, 0.3, 0.2}).reshaped({1, 2, 2}), Tensor::from({5.0}).reshaped({1, 1, 1}));
  EXPECT_EQ(unique.input, Tensor::from({0.0, 5.0, 0.0, 0.0}).reshaped({1, 2, 2}));
  const auto tie = run(g, Tensor({1, 2, 2}, 0.4), Tensor::from({2.0}).reshaped({1, 1, 1}));
  EXPECT_EQ(tie.input, Tensor::from({2.0, 0.0, 0.0, 0.0}).reshaped({1, 2, 2}));
}

TEST(AttentionRule, SingleTokenIsValueThenOutputProjection) {
  std::mt19937_64 rng(3);
  nn::Graph g({1, 4});
  g.add("attn", std::make_unique<nn::Attention>(4, 2, rng));
  randomize_parameters(g, rng);
  const auto& attn = dynamic_cast<const nn::Attention&>(*g.node(0).layer);
  nn::Graph chain({1, 4});
  chain.add("v", std::make_unique<nn::Linear>(attn.wv_, attn.bv_));
  chain.add("o", std::make_unique<nn::Linear>(attn.wo_, attn.bo_));
  const Tensor x = random_tensor({1, 4}, rng), r_out = random_tensor({1, 4}, rng);
  EXPECT_EQ(nn::forward(g, x), nn::forward(chain, x));
  const auto a = run(g, x, r_out), b = run(chain, x, r_out);
  // The mixing step adds one more epsilon stabilizer than the plain chain.
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.input[i], b.input[i], 1e-5 * std::max(1.0, std::abs(b.input[i])));
}

TEST(AttentionRule, UniformAttentionSplitsEvenly) {
  std::mt19937_64 rng(4);
  nn::Graph g({2, 4});
  g.add("attn", std::make_unique<nn::Attention>(4, 1, rng));
  randomize_parameters(g, rng);
  const auto& attn = dynamic_cast<const nn::Attention&>(*g.node(0).layer);
  attn.wq_->value.fill(0.0);
  attn.wk_->value.fill(0.0);
  const Tensor tok = random_tensor({1, 4}, rng);
  Tensor x({2, 4});
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t d = 0; d < 4; ++d) x.at(n, d) = tok[d];
  }
  const auto r = run(g, x, random_tensor({2, 4}, rng));
  double t0 = 0.0, t1 = 0.0;
  for (std::size_t d = 0; d < 4; ++d) {
    t0 += r.input.at(0, d);
    t1 += r.input.at(1, d);
  }
  EXPECT_NEAR(t0, t1, 1e-9);
  EXPECT_NEAR(t0 + t1, r.layers[0].sum_in, 1e-9);
}

TEST(AttentionRule, RandomLayerConserves) {
  std::mt19937_64 rng(5);
  nn::Graph g({3, 6});
  g.add("attn", std::make_unique<nn::Attention>(6, 2, rng));
  randomize_parameters(g, rng);
  expect_layer_conservation(run(g, random_tensor({3, 6}, rng), random_tensor({3, 6}, rng)));
}

TEST(LayerNormRule, ConservesAndStaysFinite) {
  std::mt19937_64 rng(6);
  nn::Graph g({3, 5});
  g.add("ln", std::make_unique<nn::LayerNorm>(5));
  const auto ident = run(g, random_tensor({3, 5}, rng), random_tensor({3, 5}, rng));
  expect_layer_conservation(ident);
  randomize_parameters(g, rng);
  expect_layer_conservation(run(g, random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)));
  const auto flat = run(g, Tensor({3, 5}, 0.25), random_tensor({3, 5}, rng));
  EXPECT_TRUE(flat.input.all_finite());
}

TEST(RelevanceMap, UncalibratedModelRejected) {
  models::CCTModel m(hrfseg::testing::tiny_cct(), models::HeadKind::Binary, 1);
  EXPECT_THROW(relevance_map(m, Tensor({64, 96}, 0.1)), StateError);
}

TEST(RelevanceMap, FullModelsConserve) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    for (auto h : {models::HeadKind::Binary, models::HeadKind::ThreeClass, models::HeadKind::Regression}) {
      models::CCTModel m(hrfseg::testing::tiny_cct(), h, seed);
      m.set_stats({0.2, 0.15});
      const RelevanceMap r = relevance_map(m, random_tensor({60, 90}, rng, 0.2));
      EXPECT_EQ(r.map.shape(), (Shape{60, 90}));
      EXPECT_TRUE(r.map.all_finite());
      EXPECT_LE(conservation_error(r), 1e-4 * std::abs(r.source));
    }
  }
}

TEST(RelevanceMap, MilIsZeroOutsidePatches) {
  std::mt19937_64 rng(7);
  models::MILModel m(models::MILConfig{}, models::HeadKind::Binary, 2);
  m.set_stats({0.2, 0.15});
  Tensor img({192, 256}, 0.06);
  for (std::size_t r = 60; r < 140; ++r) {
    for (std::size_t c = 0; c < 256; ++c) img.at(r, c) = 0.45 + 0.05 * std::normal_distribution<double>()(rng);
  }
  const RelevanceMap rel = relevance_map(m, img);
  const auto patches = m.patches_of(m.prepare(img));
  Mask inside(192, 256);
  for (const auto& a : patches.grid.anchors) {
    for (std::size_t i = 0; i < 64; ++i) {
      for (std::size_t j = 0; j < 64; ++j) inside(a.row + i, a.col + j) = 1;
    }
  }
  std::size_t nonzero_inside = 0;
  for (std::size_t i = 0; i < rel.map.size(); ++i) {
    if (!inside.data[i]) EXPECT_EQ(rel.map[i], 0.0);
    else nonzero_inside += rel.map[i] != 0.0;
  }
  EXPECT_GT(nonzero_inside, 0u);
  EXPECT_LE(conservation_error(rel), 1e-4 * std::abs(rel.source));
}

TEST(Export, RoundTripAsFloat32) {
  std::mt19937_64 rng(8);
  RelevanceMap m{random_tensor({5, 7}, rng), 1.25, -0.5};
  const auto stem = std::filesystem::temp_directory_path() / "hrfseg_rel";
  write_relevance(stem, m, "cct-binary");
  const RelevanceMap back = read_relevance(stem);
  EXPECT_EQ(back.source, 1.25);
  EXPECT_EQ(back.absorbed, -0.5);
  for (std::size_t i = 0; i < m.map.size(); ++i) EXPECT_EQ(back.map[i], static_cast<double>(static_cast<float>(m.map[i])));
  EXPECT_EQ(std::filesystem::file_size(std::filesystem::path(stem) += ".rel"), 5u * 7u * 4u);
  {
    std::ofstream extra(std::filesystem::path(stem) += ".rel", std::ios::app | std::ios::binary);
    extra.put('x');
  }
  EXPECT_THROW(read_relevance(stem), FormatError);
}

}  // namespace
}  // namespace hrfseg::lrp
