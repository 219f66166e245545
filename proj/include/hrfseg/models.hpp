#pragma once

// Image-level predictors: attention-MIL over retina patches and a compact
// convolutional transformer over the whole B-scan, each with one of three
// heads. Graphs end in raw logits; heads are applied outside the graph.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfseg/nn/layers.hpp"
#include "hrfseg/preprocess.hpp"
#include "hrfseg/tensor.hpp"

namespace hrfseg::models {

enum class HeadKind { Binary, ThreeClass, Regression };
enum class ModelKind { Mil, Cct };

std::string_view head_name(HeadKind h);
HeadKind head_from_name(std::string_view name);
std::string_view model_name(ModelKind m);
ModelKind model_from_name(std::string_view name);
std::size_t head_outputs(HeadKind h);

inline constexpr double kRegressionScale = 10.0;

struct HeadOutput {
  std::vector<double> values;  // Binary: p; ThreeClass: 3 probs; Regression: count in [0, 10]
  double positivity = 0.0;     // p, 1 - P(class 0), or the count
};

HeadOutput apply_head(HeadKind h, const Tensor& logits);
double positivity(HeadKind h, std::span<const double> values);

// Relevance placed on the logits before propagation: the logit itself for
// Binary/Regression; for ThreeClass the two positive-class logits weighted by
// their share of p1 + p2.
Tensor relevance_seed(HeadKind h, const Tensor& logits);

struct CCTConfig {
  std::size_t rows = 192;
  std::size_t cols = 512;
  std::size_t kernel = 3;
  std::size_t conv1_channels = 64;
  std::size_t conv1_stride = 1;
  std::size_t pool1 = 2;
  std::size_t conv2_stride = 1;
  std::size_t pool2 = 4;
  std::size_t dim = 128;  // conv2 channels = token width
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;

  // Reference configuration (total stride 8).
  static CCTConfig standard(std::size_t rows = 192, std::size_t cols = 512) {
    CCTConfig c;
    c.rows = rows;
    c.cols = cols;
    return c;
  }
  // Narrow, stride-32 variant that trains in minutes on one core.
  static CCTConfig desk(std::size_t rows = 192, std::size_t cols = 512);

  std::size_t total_stride() const { return conv1_stride * pool1 * conv2_stride * pool2; }
  std::size_t padded_rows() const;
  std::size_t padded_cols() const;
  std::size_t token_rows() const { return padded_rows() / total_stride(); }
  std::size_t token_cols() const { return padded_cols() / total_stride(); }
  std::size_t tokens() const { return token_rows() * token_cols(); }

  nlohmann::json to_json() const;
  static CCTConfig from_json(const nlohmann::json& j);
};

struct MILConfig {
  std::size_t patch = 64;
  std::size_t patch_rows = 3;
  std::size_t width_divisor = 4;  // AlexNet channel counts divided by this
  std::size_t embed = 256;
  std::size_t attention_hidden = 128;

  nlohmann::json to_json() const;
  static MILConfig from_json(const nlohmann::json& j);
};

struct RelevanceMap {
  Tensor map;            // [rows, cols] of the input image
  double source = 0.0;   // sum of the seed relevance
  double absorbed = 0.0; // relevance absorbed by biases, stabilizers and padding
};

class Model {
 public:
  virtual ~Model() = default;

  ModelKind kind() const { return kind_; }
  HeadKind head() const { return head_; }
  const preprocess::Stats& stats() const { return stats_; }
  void set_stats(const preprocess::Stats& s) {
    stats_ = s;
    calibrated_ = true;
  }
  // True once statistics came from training data or a checkpoint.
  bool calibrated() const { return calibrated_; }

  Tensor prepare(const Tensor& raw) const { return preprocess::normalize(raw, stats_); }
  HeadOutput predict(const Tensor& raw) const { return apply_head(head_, logits(prepare(raw))); }

  virtual Tensor logits(const Tensor& normalized) const = 0;

  // Records a forward pass, asks `loss_grad` for dL/dlogits, and accumulates
  // parameter gradients. Returns the logits.
  using LossGrad = std::function<Tensor(const Tensor& logits)>;
  virtual Tensor accumulate_gradients(const Tensor& normalized, const LossGrad& loss_grad,
                                      nn::Gradients& grads) const = 0;

  virtual RelevanceMap relevance(const Tensor& raw, double eps = 1e-6) const = 0;
  virtual std::vector<nn::ParamPtr> parameters() const = 0;
  virtual nlohmann::json config() const = 0;
  virtual void save(const std::filesystem::path& path, const nlohmann::json& meta = nlohmann::json::object()) const = 0;

 protected:
  Model(ModelKind k, HeadKind h) : kind_(k), head_(h) {}
  nlohmann::json header(const nlohmann::json& meta) const;

 private:
  ModelKind kind_;
  HeadKind head_;
  preprocess::Stats stats_;
  bool calibrated_ = false;
};

class CCTModel final : public Model {
 public:
  CCTModel(const CCTConfig& cfg, HeadKind head, std::uint64_t seed);

  const CCTConfig& cct_config() const { return cfg_; }
  const nn::Graph& graph() const { return graph_; }
  // [1, padded rows, padded cols] network input from a normalized image.
  Tensor network_input(const Tensor& normalized) const;

  Tensor logits(const Tensor& normalized) const override;
  Tensor accumulate_gradients(const Tensor& normalized, const LossGrad& loss_grad,
                              nn::Gradients& grads) const override;
  RelevanceMap relevance(const Tensor& raw, double eps = 1e-6) const override;
  std::vector<nn::ParamPtr> parameters() const override { return graph_.parameters(); }
  nlohmann::json config() const override { return cfg_.to_json(); }
  void save(const std::filesystem::path& path, const nlohmann::json& meta = nlohmann::json::object()) const override;

 private:
  CCTConfig cfg_;
  nn::Graph graph_;
};

struct BagResult {
  Tensor logits;
  std::vector<double> weights;  // a_k, in the caller's patch order
  Tensor embeddings;            // h_k [K, embed], in sorted-index order
  Tensor pooled;                // z [embed]
};

class MILModel final : public Model {
 public:
  MILModel(const MILConfig& cfg, HeadKind head, std::uint64_t seed);

  const MILConfig& mil_config() const { return cfg_; }
  const nn::Graph& encoder() const { return encoder_; }
  // Pooling + classifier graph for a bag of K instances (parameters shared).
  nn::Graph head_graph(std::size_t bag) const;

  // `order` gives each patch's original index; accumulation runs in index
  // order so a permuted bag yields bit-identical logits. Defaults to 0..K-1.
  BagResult forward_bag(const std::vector<Tensor>& patches, std::vector<std::size_t> order = {}) const;
  preprocess::Patches patches_of(const Tensor& normalized) const;

  Tensor logits(const Tensor& normalized) const override;
  Tensor accumulate_gradients(const Tensor& normalized, const LossGrad& loss_grad,
                              nn::Gradients& grads) const override;
  RelevanceMap relevance(const Tensor& raw, double eps = 1e-6) const override;
  std::vector<nn::ParamPtr> parameters() const override;
  nlohmann::json config() const override { return cfg_.to_json(); }
  void save(const std::filesystem::path& path, const nlohmann::json& meta = nlohmann::json::object()) const override;

 private:
  MILConfig cfg_;
  nn::Graph encoder_;
  nn::ParamPtr pool_v_, pool_w_, cls_w_, cls_b_;
};

// Reads a checkpoint written by Model::save. Throws FormatError when the
// header lacks model_kind / head_kind or the graphs do not match the config.
std::unique_ptr<Model> load_model(const std::filesystem::path& path);

}  // namespace hrfseg::models
