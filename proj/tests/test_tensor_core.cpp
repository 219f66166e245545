#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "hrfseg/error.hpp"
#include "hrfseg/nn/checkpoint.hpp"
#include "support.hpp"

namespace hrfseg::nn {
namespace {

using testing::random_tensor;

Graph single(Shape input, std::unique_ptr<Layer> layer) {
  Graph g(std::move(input));
  g.add("layer", std::move(layer));
  return g;
}

TEST(Forward, IdentityLinear) {
  auto w = std::make_shared<Parameter>(Parameter{"weight", Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})});
  auto b = std::make_shared<Parameter>(Parameter{"bias", Tensor({3})});
  Graph g = single({3}, std::make_unique<Linear>(w, b));
  EXPECT_EQ(forward(g, Tensor::from({1, 2, 3})), Tensor::from({1, 2, 3}));
}

TEST(Forward, Relu) {
  Graph g = single({3}, std::make_unique<Elementwise>(LayerKind::Relu));
  EXPECT_EQ(forward(g, Tensor::from({-1, 0, 2})), Tensor::from({0, 0, 2}));
}

TEST(Forward, ShapeMismatchNamesNode) {
  Rng rng(1);
  Graph g({1, 8, 8});
  g.add("stem", std::make_unique<Conv2d>(1, 2, 3, ConvGeometry{1, 1}, rng));
  try {
    forward(g, Tensor({1, 4, 4}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("stem"), std::string::npos);
    EXPECT_NE(msg.find("[1,8,8]"), std::string::npos);
    EXPECT_NE(msg.find("[1,4,4]"), std::string::npos);
  }
}

TEST(Forward, BuildRejectsIncompatibleNode) {
  Rng rng(1);
  Graph g({5, 4});
  EXPECT_THROW(g.add("fc", std::make_unique<Linear>(3, 2, rng)), ShapeError);
}

TEST(Forward, MatchesNestedLoopEvaluator) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Graph g({2, 9, 11});
    g.add("conv", std::make_unique<Conv2d>(2, 3, 3, ConvGeometry{2, 1}, rng));
    g.add("relu", std::make_unique<Elementwise>(LayerKind::Relu));
    g.add("flat", std::make_unique<Reshape>(Shape{3 * 5 * 6}));
    g.add("fc", std::make_unique<Linear>(90, 4, rng));
    testing::randomize_parameters(g, rng);
    const Tensor x = random_tensor({2, 9, 11}, rng);

    const auto params = g.parameters();
    Tensor h = testing::reference_conv2d(x, params[0]->value, params[1]->value, 2, 1);
    for (double& v : h.storage()) v = std::max(v, 0.0);
    const Tensor& w = params[2]->value;
    const Tensor& b = params[3]->value;
    Tensor expected({4});
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 90; ++i) acc += h[i] * w[o * 90 + i];
      expected[o] = acc + b[o];
    }
    const Tensor got = forward(g, x);
    for (std::size_t o = 0; o < 4; ++o) EXPECT_NEAR(got[o], expected[o], 1e-12);
  }
}

TEST(Forward, RepeatedCallsAreBitIdentical) {
  Rng rng(3);
  Graph g({6, 8});
  g.add("attn", std::make_unique<Attention>(8, 2, rng));
  g.add("pool", std::make_unique<SeqPool>(8, rng));
  const Tensor x = random_tensor({6, 8}, rng);
  const Tensor first = forward(g, x);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(forward(g, x), first);
}

TEST(Backward, ScalarLinear) {
  auto w = std::make_shared<Parameter>(Parameter{"weight", Tensor({1, 1}, {3.0})});
  auto b = std::make_shared<Parameter>(Parameter{"bias", Tensor({1})});
  Graph g = single({1}, std::make_unique<Linear>(w, b));
  Trace trace;
  forward(g, Tensor::from({2.0}), &trace);
  Gradients grads;
  backward(g, trace, Tensor::from({1.0}), grads);
  EXPECT_DOUBLE_EQ(grads.of(*w)[0], 2.0);
  EXPECT_DOUBLE_EQ(grads.of(*b)[0], 1.0);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(5);
  Graph g({1, 6, 6});
  g.add("conv", std::make_unique<Conv2d>(1, 2, 3, ConvGeometry{1, 0}, rng));
  g.add("tok", std::make_unique<Tokens>());
  g.add("ln", std::make_unique<LayerNorm>(2));
  Trace trace;
  forward(g, random_tensor({1, 6, 6}, rng), &trace);
  Gradients grads;
  backward(g, trace, Tensor(g.output_shape()), grads);
  for (const auto& p : g.parameters()) {
    for (double v : grads.of(*p).storage()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backward, RequiresRecordedForward) {
  Rng rng(5);
  Graph g = single({3}, std::make_unique<Linear>(3, 2, rng));
  Trace trace;
  Gradients grads;
  EXPECT_THROW(backward(g, trace, Tensor({2}), grads), StateError);
  forward(g, Tensor({3}));  // not recorded
  EXPECT_THROW(backward(g, trace, Tensor({2}), grads), StateError);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Rng rng(2);
  const Tensor x = random_tensor({1, 5, 7}, rng);
  EXPECT_EQ(conv2d(x, Tensor({1, 1, 1, 1}, {1.0}), Tensor({1}), {1, 0}), x);
}

TEST(Conv2d, OnesKernelOnConstantImage) {
  const Tensor x({1, 6, 6}, 2.5);
  const Tensor y = conv2d(x, Tensor({1, 1, 3, 3}, 1.0), Tensor({1}), {1, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 4, 4}));
  for (double v : y.storage()) EXPECT_DOUBLE_EQ(v, 9 * 2.5);
}

TEST(Conv2d, OutputDims) { EXPECT_EQ(conv_out_dim(192, 3, {2, 1}), 96u); }

TEST(Conv2d, RejectsZeroStride) {
  EXPECT_THROW(conv2d(Tensor({1, 4, 4}), Tensor({1, 1, 3, 3}), Tensor({1}), {0, 0}), ArgumentError);
}

TEST(Conv2d, ExactlyEqualsNestedLoopOracle) {
  for (int seed = 0; seed < 40; ++seed) {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> d(1, 3);
    const std::size_t C = d(rng), O = d(rng), k = d(rng) * 2 - 1, s = d(rng), p = d(rng) - 1;
    const Tensor x = random_tensor({C, 8 + d(rng), 9 + d(rng)}, rng);
    const Tensor w = random_tensor({O, C, k, k}, rng);
    const Tensor b = random_tensor({O}, rng);
    EXPECT_EQ(conv2d(x, w, b, {s, p}), testing::reference_conv2d(x, w, b, s, p)) << "seed " << seed;
  }
}

TEST(Attention, SingleTokenIsProjectedValue) {
  Rng rng(9);
  auto layer = std::make_unique<Attention>(4, 2, rng);
  Attention* attn = layer.get();
  Graph g = single({1, 4}, std::move(layer));
  testing::randomize_parameters(g, rng);
  const Tensor x = random_tensor({1, 4}, rng);
  Trace trace;
  const Tensor y = forward(g, x, &trace);
  const Tensor& a = trace.aux(0)[3];
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(a[1], 1.0);
  const Tensor v = linear(x, attn->wv_->value, attn->bv_->value);
  const Tensor expected = linear(v, attn->wo_->value, attn->bo_->value);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], expected[i], 1e-14);
}

TEST(Attention, ZeroProjectionsGiveOutputBias) {
  Rng rng(9);
  auto layer = std::make_unique<Attention>(4, 2, rng);
  Attention* attn = layer.get();
  Graph g = single({3, 4}, std::move(layer));
  for (const auto& p : g.parameters()) p->value.fill(0.0);
  attn->bo_->value = Tensor::from({0.5, -1.0, 2.0, 0.25});
  const Tensor y = forward(g, random_tensor({3, 4}, rng));
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(y.at(n, d), attn->bo_->value[d]);
  }
}

TEST(Attention, TwoTokensHandComputed) {
  Rng rng(1);
  auto layer = std::make_unique<Attention>(2, 1, rng);
  Attention* attn = layer.get();
  Graph g = single({2, 2}, std::move(layer));
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  for (auto* p : {&attn->wq_, &attn->wk_, &attn->wv_, &attn->wo_}) (*p)->value = eye;
  for (auto* p : {&attn->bq_, &attn->bk_, &attn->bv_, &attn->bo_}) (*p)->value.fill(0.0);
  // x1 = (1, 0), x2 = (0, 1): scores [[1/sqrt2, 0], [0, 1/sqrt2]]
  const double e = std::exp(1.0 / std::sqrt(2.0));
  const double hi = e / (e + 1.0), lo = 1.0 / (e + 1.0);
  const Tensor y = forward(g, Tensor({2, 2}, {1, 0, 0, 1}));
  EXPECT_NEAR(y.at(0, 0), hi, 1e-12);
  EXPECT_NEAR(y.at(0, 1), lo, 1e-12);
  EXPECT_NEAR(y.at(1, 0), lo, 1e-12);
  EXPECT_NEAR(y.at(1, 1), hi, 1e-12);
}

TEST(Attention, HeadsMustDivideDim) {
  Rng rng(1);
  EXPECT_THROW(Attention(6, 4, rng), ArgumentError);
}

TEST(Attention, RowsSumToOne) {
  Rng rng(4);
  Graph g = single({7, 6}, std::make_unique<Attention>(6, 3, rng));
  testing::randomize_parameters(g, rng, 2.0);
  Trace trace;
  forward(g, random_tensor({7, 6}, rng, 3.0), &trace);
  const Tensor& a = trace.aux(0)[3];
  for (std::size_t row = 0; row < 3 * 7; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += a[row * 7 + j];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Softmax, AnalyticCase) {
  const Tensor y = softmax_last(Tensor::from({0.0, std::log(3.0)}));
  EXPECT_NEAR(y[0], 0.25, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(LayerNormOp, ConstantVectorGivesBias) {
  auto gamma = std::make_shared<Parameter>(Parameter{"gamma", Tensor({3}, 2.0)});
  auto beta = std::make_shared<Parameter>(Parameter{"beta", Tensor::from({0.1, 0.2, 0.3})});
  Graph g = single({3}, std::make_unique<LayerNorm>(gamma, beta, 1e-5));
  EXPECT_EQ(forward(g, Tensor({3}, 4.2)), beta->value);
}

TEST(SeqPoolOp, SingleTokenUnchanged) {
  Rng rng(2);
  Graph g = single({1, 5}, std::make_unique<SeqPool>(5, rng));
  const Tensor x = random_tensor({1, 5}, rng);
  EXPECT_EQ(forward(g, x), x.reshaped({5}));
}

TEST(SeqPoolOp, EmptyTokenListRejected) {
  Rng rng(2);
  Graph g({0, 5});
  EXPECT_THROW(g.add("pool", std::make_unique<SeqPool>(5, rng)), ArgumentError);
}

TEST(SeqPoolOp, WeightsSumToOne) {
  Rng rng(8);
  Graph g = single({9, 3}, std::make_unique<SeqPool>(3, rng));
  Trace trace;
  forward(g, random_tensor({9, 3}, rng, 4.0), &trace);
  EXPECT_NEAR(trace.aux(0)[0].sum(), 1.0, 1e-9);
}

TEST(GeluOp, TanhApproximationConstants) {
  EXPECT_DOUBLE_EQ(gelu(0.0), 0.0);
  const double x = 1.0;
  EXPECT_DOUBLE_EQ(gelu(x), 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x))));
}

// ---- checkpoints ----------------------------------------------------------

Graph sample_graph(Rng& rng) {
  Graph g({1, 8, 8});
  g.add("conv", std::make_unique<Conv2d>(1, 4, 3, ConvGeometry{2, 1}, rng));
  g.add("relu", std::make_unique<Elementwise>(LayerKind::Relu));
  g.add("pool", std::make_unique<MaxPool2d>(2, 2));
  const int tok = g.add("tok", std::make_unique<Tokens>());
  const int pos = g.add("pos", std::make_unique<PosEmbed>(4, 4, rng), {tok});
  const int ln = g.add("ln", std::make_unique<LayerNorm>(4), {pos});
  const int attn = g.add("attn", std::make_unique<Attention>(4, 2, rng), {ln});
  g.add("res", std::make_unique<Add>(), {pos, attn});
  g.add("seq", std::make_unique<SeqPool>(4, rng));
  g.add("head", std::make_unique<Linear>(4, 1, rng));
  return g;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(11);
  Graph g = sample_graph(rng);
  testing::randomize_parameters(g, rng);
  const auto dir = std::filesystem::temp_directory_path() / "hrfseg_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "a.ckpt", {{"net", &g}}, {{"note", "x"}});
  Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(loaded.meta.at("note"), "x");
  const Graph& g2 = loaded.graph("net");
  save_checkpoint(dir / "b.ckpt", {{"net", &g2}}, {{"note", "x"}});
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));

  const Tensor x = random_tensor({1, 8, 8}, rng);
  EXPECT_EQ(forward(g, x), forward(g2, x));
}

TEST(Checkpoint, CorruptFilesRejected) {
  Rng rng(12);
  Graph g = sample_graph(rng);
  const auto dir = std::filesystem::temp_directory_path() / "hrfseg_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "c.ckpt", {{"net", &g}});
  std::string bytes = slurp(dir / "c.ckpt");

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::ofstream(dir / "bad_magic.ckpt", std::ios::binary) << bad_magic;
  EXPECT_THROW(load_checkpoint(dir / "bad_magic.ckpt"), FormatError);

  std::ofstream(dir / "truncated.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 9);
  EXPECT_THROW(load_checkpoint(dir / "truncated.ckpt"), FormatError);
}

}  // namespace
}  // namespace hrfseg::nn
