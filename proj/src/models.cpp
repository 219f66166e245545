#include "hrfseg/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hrfseg/error.hpp"
#include "hrfseg/nn/checkpoint.hpp"

namespace hrfseg::models {

using nn::Graph;
using nn::LayerKind;

// ---- names and heads -----------------------------------------------------------

std::string_view head_name(HeadKind h) {
  switch (h) {
    case HeadKind::Binary: return "binary";
    case HeadKind::ThreeClass: return "three_class";
    case HeadKind::Regression: return "regression";
  }
  return "?";
}

HeadKind head_from_name(std::string_view name) {
  if (name == "binary") return HeadKind::Binary;
  if (name == "three_class" || name == "3class") return HeadKind::ThreeClass;
  if (name == "regression") return HeadKind::Regression;
  throw ArgumentError("unknown task '" + std::string(name) + "' (binary, three_class, regression)");
}

std::string_view model_name(ModelKind m) { return m == ModelKind::Mil ? "mil" : "cct"; }

ModelKind model_from_name(std::string_view name) {
  if (name == "mil") return ModelKind::Mil;
  if (name == "cct") return ModelKind::Cct;
  throw ArgumentError("unknown model '" + std::string(name) + "' (mil, cct)");
}

std::size_t head_outputs(HeadKind h) { return h == HeadKind::ThreeClass ? 3 : 1; }

double positivity(HeadKind h, std::span<const double> values) {
  switch (h) {
    case HeadKind::Binary: return values[0];
    case HeadKind::ThreeClass: return 1.0 - values[0];
    case HeadKind::Regression: return values[0];
  }
  return 0.0;
}

HeadOutput apply_head(HeadKind h, const Tensor& logits) {
  if (logits.size() != head_outputs(h)) {
    throw ShapeError("head " + std::string(head_name(h)) + " expects " + std::to_string(head_outputs(h)) +
                     " logits, got " + shape_str(logits.shape()));
  }
  HeadOutput out;
  switch (h) {
    case HeadKind::Binary: out.values = {nn::sigmoid(logits[0])}; break;
    case HeadKind::ThreeClass: out.values = nn::softmax_last(logits).storage(); break;
    case HeadKind::Regression: out.values = {kRegressionScale * nn::sigmoid(logits[0])}; break;
  }
  out.positivity = positivity(h, out.values);
  return out;
}

Tensor relevance_seed(HeadKind h, const Tensor& logits) {
  if (h != HeadKind::ThreeClass) return logits;
  const Tensor p = nn::softmax_last(logits);
  const double pos = p[1] + p[2];
  Tensor seed(logits.shape());
  seed[1] = p[1] / pos * logits[1];
  seed[2] = p[2] / pos * logits[2];
  return seed;
}

namespace {

Tensor row_of(const Tensor& m, std::size_t r) {
  const std::size_t n = m.dim(1);
  Tensor out({n});
  std::copy_n(m.data() + r * n, n, out.data());
  return out;
}

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

nlohmann::json stats_json(const preprocess::Stats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

}  // namespace

nlohmann::json Model::header(const nlohmann::json& meta) const {
  nlohmann::json h = meta.is_object() ? meta : nlohmann::json::object();
  h["model_kind"] = model_name(kind_);
  h["head_kind"] = head_name(head_);
  h["config"] = config();
  h["stats"] = stats_json(stats_);
  return h;
}

// ---- CCT -----------------------------------------------------------------------

CCTConfig CCTConfig::desk(std::size_t rows, std::size_t cols) {
  CCTConfig c;
  c.rows = rows;
  c.cols = cols;
  c.conv1_channels = 16;
  c.conv1_stride = 2;
  c.conv2_stride = 2;
  c.dim = 32;
  c.layers = 2;
  c.heads = 2;
  return c;
}

std::size_t CCTConfig::padded_rows() const { return round_up(rows, total_stride()); }
std::size_t CCTConfig::padded_cols() const { return round_up(cols, total_stride()); }

nlohmann::json CCTConfig::to_json() const {
  return {{"rows", rows},     {"cols", cols},     {"kernel", kernel}, {"conv1_channels", conv1_channels},
          {"conv1_stride", conv1_stride}, {"pool1", pool1}, {"conv2_stride", conv2_stride}, {"pool2", pool2},
          {"dim", dim},       {"layers", layers}, {"heads", heads},   {"mlp_ratio", mlp_ratio}};
}

CCTConfig CCTConfig::from_json(const nlohmann::json& j) {
  CCTConfig c;
  const nlohmann::json def = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!def.contains(key)) throw ArgumentError("cct config: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, std::size_t& field) {
    if (j.contains(key)) field = j.at(key).get<std::size_t>();
  };
  get("rows", c.rows);
  get("cols", c.cols);
  get("kernel", c.kernel);
  get("conv1_channels", c.conv1_channels);
  get("conv1_stride", c.conv1_stride);
  get("pool1", c.pool1);
  get("conv2_stride", c.conv2_stride);
  get("pool2", c.pool2);
  get("dim", c.dim);
  get("layers", c.layers);
  get("heads", c.heads);
  get("mlp_ratio", c.mlp_ratio);
  return c;
}

namespace {

// Transformer weights start small, as in the reference CCT.
constexpr double kTransformerInit = 0.02;

Graph build_cct(const CCTConfig& c, HeadKind head, nn::Rng& rng) {
  if (c.kernel % 2 == 0) throw ArgumentError("cct: kernel must be odd");
  if (c.dim % c.heads != 0) throw ArgumentError("cct: dim must be divisible by heads");
  const std::size_t pad = c.kernel / 2;
  Graph g({1, c.padded_rows(), c.padded_cols()});
  g.add("conv1", std::make_unique<nn::Conv2d>(1, c.conv1_channels, c.kernel, nn::ConvGeometry{c.conv1_stride, pad}, rng));
  g.add("relu1", std::make_unique<nn::Elementwise>(LayerKind::Relu));
  g.add("pool1", std::make_unique<nn::MaxPool2d>(c.pool1, c.pool1));
  g.add("conv2", std::make_unique<nn::Conv2d>(c.conv1_channels, c.dim, c.kernel, nn::ConvGeometry{c.conv2_stride, pad}, rng));
  g.add("relu2", std::make_unique<nn::Elementwise>(LayerKind::Relu));
  g.add("pool2", std::make_unique<nn::MaxPool2d>(c.pool2, c.pool2));
  g.add("tokens", std::make_unique<nn::Tokens>());
  const std::size_t n_tokens = g.output_shape()[0];
  int x = g.add("pos", std::make_unique<nn::PosEmbed>(n_tokens, c.dim, rng));
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "block" + std::to_string(l);
    const int n1 = g.add(p + ".ln1", std::make_unique<nn::LayerNorm>(c.dim), {x});
    const int at = g.add(p + ".attn", std::make_unique<nn::Attention>(c.dim, c.heads, rng, kTransformerInit), {n1});
    x = g.add(p + ".res1", std::make_unique<nn::Add>(), {x, at});
    const int n2 = g.add(p + ".ln2", std::make_unique<nn::LayerNorm>(c.dim), {x});
    const int f1 = g.add(p + ".fc1", std::make_unique<nn::Linear>(c.dim, c.dim * c.mlp_ratio, rng, kTransformerInit), {n2});
    const int ge = g.add(p + ".gelu", std::make_unique<nn::Elementwise>(LayerKind::Gelu), {f1});
    const int f2 = g.add(p + ".fc2", std::make_unique<nn::Linear>(c.dim * c.mlp_ratio, c.dim, rng, kTransformerInit), {ge});
    x = g.add(p + ".res2", std::make_unique<nn::Add>(), {x, f2});
  }
  // No final LayerNorm before seqpool. A focus mostly scales a token's features
  // rather than turning them, and a per-token norm would hide exactly that.
  g.add("seqpool", std::make_unique<nn::SeqPool>(c.dim, rng, kTransformerInit), {x});
  g.add("classifier", std::make_unique<nn::Linear>(c.dim, head_outputs(head), rng, kTransformerInit));
  return g;
}

}  // namespace

CCTModel::CCTModel(const CCTConfig& cfg, HeadKind head, std::uint64_t seed)
    : Model(ModelKind::Cct, head), cfg_(cfg), graph_([&] {
        nn::Rng rng(seed);
        return build_cct(cfg, head, rng);
      }()) {}

Tensor CCTModel::network_input(const Tensor& normalized) const {
  const Tensor padded = preprocess::reflect_pad(normalized, cfg_.total_stride());
  return padded.reshaped({1, padded.dim(0), padded.dim(1)});
}

Tensor CCTModel::logits(const Tensor& normalized) const { return nn::forward(graph_, network_input(normalized)); }

Tensor CCTModel::accumulate_gradients(const Tensor& normalized, const LossGrad& loss_grad, nn::Gradients& grads) const {
  nn::Trace trace;
  Tensor out = nn::forward(graph_, network_input(normalized), &trace);
  nn::backward(graph_, trace, loss_grad(out), grads);
  return out;
}

RelevanceMap CCTModel::relevance(const Tensor& raw, double eps) const {
  const std::size_t H = raw.dim(0), W = raw.dim(1);
  nn::Trace trace;
  const Tensor out = nn::forward(graph_, network_input(prepare(raw)), &trace);
  const Tensor seed = relevance_seed(head(), out);
  const nn::RelevanceResult r = nn::propagate_relevance(graph_, trace, seed, eps);
  RelevanceMap m;
  m.source = seed.sum();
  m.absorbed = r.absorbed;
  m.map = Tensor({H, W});
  const std::size_t Wp = r.input.dim(2);
  for (std::size_t y = 0; y < r.input.dim(1); ++y) {
    for (std::size_t x = 0; x < Wp; ++x) {
      const double v = r.input[y * Wp + x];
      if (y < H && x < W) {
        m.map.at(y, x) = v;
      } else {
        m.absorbed += v;  // relevance landing on reflected padding
      }
    }
  }
  return m;
}

void CCTModel::save(const std::filesystem::path& path, const nlohmann::json& meta) const {
  nn::save_checkpoint(path, {{"cct", &graph_}}, header(meta));
}

// ---- MIL -----------------------------------------------------------------------

nlohmann::json MILConfig::to_json() const {
  return {{"patch", patch}, {"patch_rows", patch_rows}, {"width_divisor", width_divisor}, {"embed", embed},
          {"attention_hidden", attention_hidden}};
}

MILConfig MILConfig::from_json(const nlohmann::json& j) {
  MILConfig c;
  const nlohmann::json def = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!def.contains(key)) throw ArgumentError("mil config: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, std::size_t& field) {
    if (j.contains(key)) field = j.at(key).get<std::size_t>();
  };
  get("patch", c.patch);
  get("patch_rows", c.patch_rows);
  get("width_divisor", c.width_divisor);
  get("embed", c.embed);
  get("attention_hidden", c.attention_hidden);
  return c;
}

namespace {

// AlexNet topology (64-192-384-256-256 channels, divided by width_divisor)
// followed by two fully connected layers.
Graph build_encoder(const MILConfig& c, nn::Rng& rng) {
  const std::size_t d = std::max<std::size_t>(1, c.width_divisor);
  const std::size_t c1 = 64 / d, c2 = 192 / d, c3 = 384 / d, c4 = 256 / d, c5 = 256 / d;
  Graph g({1, c.patch, c.patch});
  g.add("conv1", std::make_unique<nn::Conv2d>(1, c1, 11, nn::ConvGeometry{4, 2}, rng));
  g.add("relu1", std::make_unique<nn::Elementwise>(LayerKind::Relu));
  g.add("pool1", std::make_unique<nn::MaxPool2d>(3, 2));
  g.add("conv2", std::make_unique<nn::Conv2d>(c1, c2, 5, nn::ConvGeometry{1, 2}, rng));
  g.add("relu2", std::make_unique<nn::Elementwise>(LayerKind::Relu));
  g.add("pool2", std::make_unique<nn::MaxPool2d>(3, 2));
  g.add("conv3", std::make_unique<nn::Conv2d>(c2, c3, 3, nn::ConvGeometry{1, 1}, rng));
  g.add("relu3", std::make_unique<nn::Elementwise>(LayerKind::Relu));
  g.add("conv4", std::make_unique<nn::Conv2d>(c3, c4, 3, nn::ConvGeometry{1, 1}, rng));
  g.add("relu4", std::make_unique<nn::Elementwise>(LayerKind::Relu));
  g.add("conv5", std::make_unique<nn::Conv2d>(c4, c5, 3, nn::ConvGeometry{1, 1}, rng));
  g.add("relu5", std::make_unique<nn::Elementwise>(LayerKind::Relu));
  g.add("pool5", std::make_unique<nn::MaxPool2d>(3, 2));
  g.add("flatten", std::make_unique<nn::Reshape>(Shape{shape_numel(g.output_shape())}));
  g.add("fc1", std::make_unique<nn::Linear>(g.output_shape()[0], c.embed, rng));
  g.add("relu6", std::make_unique<nn::Elementwise>(LayerKind::Relu));
  g.add("fc2", std::make_unique<nn::Linear>(c.embed, c.embed, rng));
  g.add("relu7", std::make_unique<nn::Elementwise>(LayerKind::Relu));
  return g;
}

}  // namespace

MILModel::MILModel(const MILConfig& cfg, HeadKind head, std::uint64_t seed)
    : Model(ModelKind::Mil, head), cfg_(cfg), encoder_({1, cfg.patch, cfg.patch}) {
  nn::Rng rng(seed);
  encoder_ = build_encoder(cfg, rng);
  nn::AttentionPool pool(cfg.embed, cfg.attention_hidden, rng);
  nn::Linear cls(cfg.embed, head_outputs(head), rng);
  pool_v_ = pool.parameters()[0];
  pool_w_ = pool.parameters()[1];
  cls_w_ = cls.weight();
  cls_b_ = cls.bias();
  head_graph(1);  // settles parameter names
}

Graph MILModel::head_graph(std::size_t bag) const {
  Graph g({bag, cfg_.embed});
  g.add("pool", std::make_unique<nn::AttentionPool>(pool_v_, pool_w_));
  g.add("classifier", std::make_unique<nn::Linear>(cls_w_, cls_b_));
  return g;
}

std::vector<nn::ParamPtr> MILModel::parameters() const {
  std::vector<nn::ParamPtr> out = encoder_.parameters();
  for (const auto& p : {pool_v_, pool_w_, cls_w_, cls_b_}) out.push_back(p);
  return out;
}

preprocess::Patches MILModel::patches_of(const Tensor& normalized) const {
  return preprocess::extract_patch_rows(normalized, preprocess::locate_retina(normalized), cfg_.patch, cfg_.patch_rows);
}

namespace {

std::vector<std::size_t> sorted_positions(const std::vector<std::size_t>& order) {
  std::vector<std::size_t> pos(order.size());
  std::iota(pos.begin(), pos.end(), 0);
  std::sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) { return order[a] < order[b]; });
  for (std::size_t i = 1; i < pos.size(); ++i) {
    if (order[pos[i]] == order[pos[i - 1]]) throw ArgumentError("mil: duplicate patch index in bag order");
  }
  return pos;
}

}  // namespace

BagResult MILModel::forward_bag(const std::vector<Tensor>& patches, std::vector<std::size_t> order) const {
  if (patches.empty()) throw ArgumentError("mil: empty bag");
  if (order.empty()) {
    order.resize(patches.size());
    std::iota(order.begin(), order.end(), 0);
  }
  if (order.size() != patches.size()) throw ArgumentError("mil: order size differs from bag size");
  const std::vector<std::size_t> pos = sorted_positions(order);
  const std::size_t K = patches.size(), E = cfg_.embed, P = cfg_.patch;

  BagResult r;
  r.embeddings = Tensor({K, E});
  for (std::size_t i = 0; i < K; ++i) {
    const Tensor h = nn::forward(encoder_, patches[pos[i]].reshaped({1, P, P}));
    std::copy_n(h.data(), E, r.embeddings.data() + i * E);
  }
  const Graph head = head_graph(K);
  nn::Trace trace;
  r.logits = nn::forward(head, r.embeddings, &trace);
  r.pooled = trace.output(0);
  const Tensor& a = trace.aux(0)[1];
  r.weights.assign(K, 0.0);
  for (std::size_t i = 0; i < K; ++i) r.weights[pos[i]] = a[i];
  return r;
}

Tensor MILModel::logits(const Tensor& normalized) const { return forward_bag(patches_of(normalized).tiles).logits; }

Tensor MILModel::accumulate_gradients(const Tensor& normalized, const LossGrad& loss_grad, nn::Gradients& grads) const {
  const preprocess::Patches patches = patches_of(normalized);
  const std::size_t K = patches.tiles.size(), E = cfg_.embed, P = cfg_.patch;
  std::vector<nn::Trace> traces(K);
  Tensor H({K, E});
  for (std::size_t k = 0; k < K; ++k) {
    const Tensor h = nn::forward(encoder_, patches.tiles[k].reshaped({1, P, P}), &traces[k]);
    std::copy_n(h.data(), E, H.data() + k * E);
  }
  const Graph head = head_graph(K);
  nn::Trace head_trace;
  Tensor out = nn::forward(head, H, &head_trace);
  const Tensor dH = nn::backward(head, head_trace, loss_grad(out), grads, true);
  for (std::size_t k = 0; k < K; ++k) nn::backward(encoder_, traces[k], row_of(dH, k), grads);
  return out;
}

RelevanceMap MILModel::relevance(const Tensor& raw, double eps) const {
  const Tensor normalized = prepare(raw);
  const preprocess::Patches patches = patches_of(normalized);
  const std::size_t K = patches.tiles.size(), E = cfg_.embed, P = cfg_.patch;
  std::vector<nn::Trace> traces(K);
  Tensor H({K, E});
  for (std::size_t k = 0; k < K; ++k) {
    const Tensor h = nn::forward(encoder_, patches.tiles[k].reshaped({1, P, P}), &traces[k]);
    std::copy_n(h.data(), E, H.data() + k * E);
  }
  const Graph head = head_graph(K);
  nn::Trace head_trace;
  const Tensor out = nn::forward(head, H, &head_trace);
  const Tensor seed = relevance_seed(this->head(), out);
  const nn::RelevanceResult rh = nn::propagate_relevance(head, head_trace, seed, eps);

  RelevanceMap m;
  m.source = seed.sum();
  m.absorbed = rh.absorbed;
  m.map = Tensor({raw.dim(0), raw.dim(1)});
  for (std::size_t k = 0; k < K; ++k) {
    const nn::RelevanceResult rp = nn::propagate_relevance(encoder_, traces[k], row_of(rh.input, k), eps);
    m.absorbed += rp.absorbed;
    const Pixel a = patches.grid.anchors[k];
    for (std::size_t y = 0; y < P; ++y) {
      for (std::size_t x = 0; x < P; ++x) m.map.at(a.row + y, a.col + x) += rp.input[y * P + x];
    }
  }
  return m;
}

void MILModel::save(const std::filesystem::path& path, const nlohmann::json& meta) const {
  const Graph head = head_graph(1);
  nn::save_checkpoint(path, {{"encoder", &encoder_}, {"head", &head}}, header(meta));
}

// ---- loading -------------------------------------------------------------------

std::unique_ptr<Model> load_model(const std::filesystem::path& path) {
  nn::Checkpoint ck = nn::load_checkpoint(path);
  const auto& meta = ck.meta;
  if (!meta.contains("model_kind") || !meta.contains("head_kind") || !meta.contains("config")) {
    throw FormatError(path.string() + ": checkpoint header lacks model_kind/head_kind/config");
  }
  const ModelKind mk = model_from_name(meta.at("model_kind").get<std::string>());
  const HeadKind hk = head_from_name(meta.at("head_kind").get<std::string>());
  std::unique_ptr<Model> model;
  try {
    if (mk == ModelKind::Cct) {
      auto m = std::make_unique<CCTModel>(CCTConfig::from_json(meta.at("config")), hk, 0);
      nn::copy_parameters(ck.graph("cct"), m->graph());
      model = std::move(m);
    } else {
      auto m = std::make_unique<MILModel>(MILConfig::from_json(meta.at("config")), hk, 0);
      nn::copy_parameters(ck.graph("encoder"), m->encoder());
      nn::copy_parameters(ck.graph("head"), m->head_graph(1));
      model = std::move(m);
    }
  } catch (const ShapeError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (meta.contains("stats")) {
    model->set_stats({meta["stats"].at("mean").get<double>(), meta["stats"].at("std").get<double>()});
  }
  return model;
}

}  // namespace hrfseg::models
