#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfseg/nn/ops.hpp"
#include "hrfseg/tensor.hpp"

namespace hrfseg::nn {

enum class LayerKind {
  Conv2d,
  Linear,
  Relu,
  Gelu,
  Tanh,
  MaxPool2d,
  LayerNorm,
  Softmax,
  Attention,
  SeqPool,
  AttentionPool,
  Sigmoid,
  Reshape,
  Tokens,
  Add,
  PosEmbed,
};

std::string_view kind_name(LayerKind kind);
LayerKind kind_from_name(std::string_view name);

// Learnable tensor. Layers hold these through shared_ptr so that copies of a
// graph share storage.
struct Parameter {
  std::string name;
  Tensor value;
};
using ParamPtr = std::shared_ptr<Parameter>;

// Parameter-gradient map keyed by parameter identity.
class Gradients {
 public:
  Tensor& of(const Parameter& p);
  const Tensor* find(const Parameter& p) const;
  bool contains(const Parameter& p) const { return find(p) != nullptr; }
  void clear() { grads_.clear(); }
  // this += other, parameter by parameter.
  void accumulate(const Gradients& other);
  void scale(double factor);

 private:
  std::unordered_map<const Parameter*, Tensor> grads_;
};

using Inputs = std::span<const Tensor* const>;

// Per-layer relevance bookkeeping. `absorbed` is the relevance that the
// epsilon rule routed into biases, constant additive terms and the
// stabilizer, so that sum(inputs) + absorbed == sum(output) exactly up to
// rounding.
struct RelevanceStep {
  double absorbed = 0.0;
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual std::size_t arity() const { return 1; }
  // Throws ShapeError when the inputs violate the layer's shape rule.
  virtual Shape output_shape(std::span<const Shape> inputs) const = 0;
  virtual Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const = 0;
  // grad_inputs entries may be null when that input gradient is not needed.
  virtual void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux,
                        const Tensor& grad_output, std::span<Tensor* const> grad_inputs,
                        Gradients& grads) const = 0;
  // Writes (overwrites) relevance for each input.
  virtual void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux,
                         const Tensor& relevance_out, std::span<Tensor* const> relevance_in, double eps,
                         RelevanceStep& step) const = 0;

  virtual std::vector<ParamPtr> parameters() const { return {}; }
  virtual nlohmann::json attributes() const { return nlohmann::json::object(); }
};

using Rng = std::mt19937_64;

// ---- concrete layers -------------------------------------------------------

class Conv2d final : public Layer {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, ConvGeometry geo, Rng& rng);
  Conv2d(ParamPtr weight, ParamPtr bias, ConvGeometry geo);
  LayerKind kind() const override { return LayerKind::Conv2d; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
  std::vector<ParamPtr> parameters() const override { return {weight_, bias_}; }
  nlohmann::json attributes() const override;
  const ParamPtr& weight() const { return weight_; }
  const ParamPtr& bias() const { return bias_; }

 private:
  ParamPtr weight_, bias_;
  ConvGeometry geo_;
};

class Linear final : public Layer {
 public:
  // stddev <= 0 means He init, sqrt(2 / in_features).
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng, double stddev = 0.0);
  Linear(ParamPtr weight, ParamPtr bias);
  LayerKind kind() const override { return LayerKind::Linear; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
  std::vector<ParamPtr> parameters() const override { return {weight_, bias_}; }
  const ParamPtr& weight() const { return weight_; }
  const ParamPtr& bias() const { return bias_; }

 private:
  ParamPtr weight_, bias_;
};

// Elementwise activations. Relevance passes through unchanged.
class Elementwise final : public Layer {
 public:
  explicit Elementwise(LayerKind kind);
  LayerKind kind() const override { return kind_; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;

 private:
  LayerKind kind_;
};

class MaxPool2d final : public Layer {
 public:
  MaxPool2d(std::size_t kernel, std::size_t stride);
  LayerKind kind() const override { return LayerKind::MaxPool2d; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
  nlohmann::json attributes() const override;

 private:
  std::size_t kernel_, stride_;
};

class LayerNorm final : public Layer {
 public:
  explicit LayerNorm(std::size_t features, double eps = 1e-5);
  LayerNorm(ParamPtr gamma, ParamPtr beta, double eps);
  LayerKind kind() const override { return LayerKind::LayerNorm; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  // Mean and variance are held constant; the layer is then the linear map
  // y_i = gamma_i / sigma * (x_i - mean(x)) + beta_i and the epsilon rule is
  // applied to that map.
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
  std::vector<ParamPtr> parameters() const override { return {gamma_, beta_}; }
  nlohmann::json attributes() const override;

 private:
  ParamPtr gamma_, beta_;
  double eps_;
};

class Softmax final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::Softmax; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
};

// Multi-head self-attention over tokens [N, D]:
// softmax(Q K^T / sqrt(D/heads)) V per head, concatenated, output-projected.
class Attention final : public Layer {
 public:
  // stddev <= 0 means sqrt(1 / dim).
  Attention(std::size_t dim, std::size_t heads, Rng& rng, double stddev = 0.0);
  Attention(std::size_t heads, ParamPtr wq, ParamPtr bq, ParamPtr wk, ParamPtr bk, ParamPtr wv, ParamPtr bv,
            ParamPtr wo, ParamPtr bo);
  LayerKind kind() const override { return LayerKind::Attention; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  // aux: Q, K, V, A [heads, N, N], context [N, D]
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  // Attention weights are treated as a constant mixing matrix. Relevance
  // flows output projection -> mixing -> value projection; Q/K get none.
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
  std::vector<ParamPtr> parameters() const override { return {wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_}; }
  nlohmann::json attributes() const override;
  std::size_t heads() const { return heads_; }
  ParamPtr wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;

 private:
  std::size_t heads_;
};

// Sequence pooling: a = softmax(tokens . u) over N tokens, output sum_n a_n tokens_n.
class SeqPool final : public Layer {
 public:
  SeqPool(std::size_t dim, Rng& rng, double stddev = 0.0);
  explicit SeqPool(ParamPtr u);
  LayerKind kind() const override { return LayerKind::SeqPool; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
  std::vector<ParamPtr> parameters() const override { return {u_}; }

 private:
  ParamPtr u_;
};

// Attention-MIL pooling over instance embeddings h [K, M]:
// a = softmax_k(w^T tanh(V h_k)), output sum_k a_k h_k.
class AttentionPool final : public Layer {
 public:
  AttentionPool(std::size_t embed_dim, std::size_t hidden_dim, Rng& rng);
  AttentionPool(ParamPtr v, ParamPtr w);
  LayerKind kind() const override { return LayerKind::AttentionPool; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  // aux: tanh activations [K, L], weights a [K]
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
  std::vector<ParamPtr> parameters() const override { return {v_, w_}; }

 private:
  ParamPtr v_, w_;
};

class Reshape final : public Layer {
 public:
  explicit Reshape(Shape target);
  LayerKind kind() const override { return LayerKind::Reshape; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
  nlohmann::json attributes() const override;

 private:
  Shape target_;
};

// Feature map [C, H, W] -> token sequence [H*W, C] (row-major over positions).
class Tokens final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::Tokens; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
};

// Residual sum of two same-shaped inputs; relevance split by contribution.
class Add final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::Add; }
  std::size_t arity() const override { return 2; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
};

// Learned positional embedding added to tokens; relevance on the embedding is
// absorbed like a bias.
class PosEmbed final : public Layer {
 public:
  PosEmbed(std::size_t tokens, std::size_t dim, Rng& rng);
  explicit PosEmbed(ParamPtr table);
  LayerKind kind() const override { return LayerKind::PosEmbed; }
  Shape output_shape(std::span<const Shape> inputs) const override;
  Tensor forward(Inputs inputs, std::vector<Tensor>& aux) const override;
  void backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& grad_output,
                std::span<Tensor* const> grad_inputs, Gradients& grads) const override;
  void relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                 std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const override;
  std::vector<ParamPtr> parameters() const override { return {table_}; }
  const ParamPtr& table() const { return table_; }

 private:
  ParamPtr table_;
};

// ---- graph -----------------------------------------------------------------

inline constexpr int kGraphInput = -1;

struct Node {
  std::string name;
  std::unique_ptr<Layer> layer;
  std::vector<int> inputs;  // node ids, kGraphInput for the graph input
  Shape shape;              // output shape, fixed at construction
};

// Topologically ordered DAG of layers with a single input and a single
// output (the last node). Parameters are shared between copies.
class Graph {
 public:
  explicit Graph(Shape input_shape);
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  // Appends a node fed by `inputs` (defaults to the previous node). Throws
  // ShapeError naming the node when the shape rule fails.
  int add(std::string name, std::unique_ptr<Layer> layer, std::vector<int> inputs);
  int add(std::string name, std::unique_ptr<Layer> layer);

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const;
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  int last() const { return static_cast<int>(nodes_.size()) - 1; }

  // All parameters in declaration order.
  std::vector<ParamPtr> parameters() const;

  nlohmann::json topology() const;
  // Rebuilds a graph from topology(); parameter tensors are zero-filled with
  // the recorded shapes.
  static Graph from_topology(const nlohmann::json& topology);

 private:
  Shape input_shape_;
  std::vector<Node> nodes_;
};

// Recorded activations of one forward pass through one graph.
class Trace {
 public:
  bool recorded() const { return graph_ != nullptr; }
  const Tensor& input() const { return input_; }
  const Tensor& output(std::size_t node) const { return outputs_.at(node); }
  const std::vector<Tensor>& aux(std::size_t node) const { return aux_.at(node); }
  const Graph* graph() const { return graph_; }

 private:
  friend Tensor forward(const Graph&, const Tensor&, Trace*);
  const Graph* graph_ = nullptr;
  Tensor input_;
  std::vector<Tensor> outputs_;
  std::vector<std::vector<Tensor>> aux_;
};

// Runs the graph. When `record` is non-null it receives every activation
// needed by backward() and propagate_relevance().
Tensor forward(const Graph& graph, const Tensor& input, Trace* record = nullptr);

// Accumulates parameter gradients for an upstream gradient on the output.
// Returns dL/dinput when `input_grad` is set, otherwise an empty tensor.
Tensor backward(const Graph& graph, const Trace& trace, const Tensor& upstream, Gradients& grads,
                bool input_grad = false);

struct LayerRelevance {
  std::string node;
  double sum_in = 0.0;
  double absorbed = 0.0;
  double sum_out = 0.0;
};

struct RelevanceResult {
  Tensor input;           // relevance on the graph input
  double absorbed = 0.0;  // total over all layers
  std::vector<LayerRelevance> layers;
};

// Epsilon-rule relevance propagation from the graph output to its input.
RelevanceResult propagate_relevance(const Graph& graph, const Trace& trace, const Tensor& relevance_out,
                                    double eps = 1e-6);

}  // namespace hrfseg::nn
