#include <utility>

#include "hrfseg/error.hpp"
#include "hrfseg/nn/layers.hpp"

namespace hrfseg::nn {

Graph::Graph(Shape input_shape) : input_shape_(std::move(input_shape)) {}

int Graph::add(std::string name, std::unique_ptr<Layer> layer) {
  return add(std::move(name), std::move(layer), {last() >= 0 ? last() : kGraphInput});
}

int Graph::add(std::string name, std::unique_ptr<Layer> layer, std::vector<int> inputs) {
  if (inputs.size() != layer->arity()) {
    throw ShapeError("node '" + name + "': " + std::string(kind_name(layer->kind())) + " takes " +
                     std::to_string(layer->arity()) + " inputs, got " + std::to_string(inputs.size()));
  }
  std::vector<Shape> shapes;
  for (int id : inputs) {
    if (id != kGraphInput && (id < 0 || id >= static_cast<int>(nodes_.size()))) {
      throw ArgumentError("node '" + name + "': input id " + std::to_string(id) + " is not an earlier node");
    }
    shapes.push_back(id == kGraphInput ? input_shape_ : nodes_[static_cast<std::size_t>(id)].shape);
  }
  Shape out;
  try {
    out = layer->output_shape(shapes);
  } catch (const ShapeError& e) {
    throw ShapeError("node '" + name + "': " + e.what());
  }
  // Shared parameters re-added under the same node name keep their name.
  for (const auto& p : layer->parameters()) {
    if (p->name.rfind(name + ".", 0) != 0) p->name = name + "." + p->name;
  }
  nodes_.push_back(Node{std::move(name), std::move(layer), std::move(inputs), std::move(out)});
  return last();
}

const Shape& Graph::output_shape() const { return nodes_.empty() ? input_shape_ : nodes_.back().shape; }

std::vector<ParamPtr> Graph::parameters() const {
  std::vector<ParamPtr> out;
  for (const auto& n : nodes_) {
    for (auto& p : n.layer->parameters()) out.push_back(std::move(p));
  }
  return out;
}

nlohmann::json Graph::topology() const {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : nodes_) {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : n.layer->parameters()) params.push_back({{"name", p->name}, {"shape", p->value.shape()}});
    nodes.push_back({{"name", n.name},
                     {"kind", kind_name(n.layer->kind())},
                     {"inputs", n.inputs},
                     {"attrs", n.layer->attributes()},
                     {"params", params}});
  }
  return {{"input_shape", input_shape_}, {"nodes", nodes}};
}

namespace {

std::vector<ParamPtr> params_from(const nlohmann::json& node) {
  std::vector<ParamPtr> out;
  const std::string prefix = node.at("name").get<std::string>() + ".";
  for (const auto& p : node.at("params")) {
    std::string name = p.at("name").get<std::string>();
    if (name.rfind(prefix, 0) == 0) name = name.substr(prefix.size());
    out.push_back(std::make_shared<Parameter>(Parameter{name, Tensor(p.at("shape").get<Shape>())}));
  }
  return out;
}

std::unique_ptr<Layer> layer_from(const nlohmann::json& node) {
  const LayerKind kind = kind_from_name(node.at("kind").get<std::string>());
  const auto& attrs = node.at("attrs");
  auto p = params_from(node);
  auto expect = [&](std::size_t n) {
    if (p.size() != n) throw FormatError("node '" + node.at("name").get<std::string>() + "': wrong parameter count");
  };
  switch (kind) {
    case LayerKind::Conv2d:
      expect(2);
      return std::make_unique<Conv2d>(p[0], p[1],
                                      ConvGeometry{attrs.at("stride").get<std::size_t>(),
                                                   attrs.at("padding").get<std::size_t>()});
    case LayerKind::Linear: expect(2); return std::make_unique<Linear>(p[0], p[1]);
    case LayerKind::Relu:
    case LayerKind::Gelu:
    case LayerKind::Tanh:
    case LayerKind::Sigmoid: expect(0); return std::make_unique<Elementwise>(kind);
    case LayerKind::MaxPool2d:
      expect(0);
      return std::make_unique<MaxPool2d>(attrs.at("kernel").get<std::size_t>(), attrs.at("stride").get<std::size_t>());
    case LayerKind::LayerNorm: expect(2); return std::make_unique<LayerNorm>(p[0], p[1], attrs.at("eps").get<double>());
    case LayerKind::Softmax: expect(0); return std::make_unique<Softmax>();
    case LayerKind::Attention:
      expect(8);
      return std::make_unique<Attention>(attrs.at("heads").get<std::size_t>(), p[0], p[1], p[2], p[3], p[4], p[5],
                                         p[6], p[7]);
    case LayerKind::SeqPool: expect(1); return std::make_unique<SeqPool>(p[0]);
    case LayerKind::AttentionPool: expect(2); return std::make_unique<AttentionPool>(p[0], p[1]);
    case LayerKind::Reshape: expect(0); return std::make_unique<Reshape>(attrs.at("shape").get<Shape>());
    case LayerKind::Tokens: expect(0); return std::make_unique<Tokens>();
    case LayerKind::Add: expect(0); return std::make_unique<Add>();
    case LayerKind::PosEmbed: expect(1); return std::make_unique<PosEmbed>(p[0]);
  }
  throw FormatError("unsupported layer kind");
}

}  // namespace

Graph Graph::from_topology(const nlohmann::json& topology) {
  try {
    Graph g(topology.at("input_shape").get<Shape>());
    for (const auto& node : topology.at("nodes")) {
      g.add(node.at("name").get<std::string>(), layer_from(node), node.at("inputs").get<std::vector<int>>());
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed graph topology: ") + e.what());
  }
}

// ---- execution -------------------------------------------------------------------

Tensor forward(const Graph& graph, const Tensor& input, Trace* record) {
  if (input.shape() != graph.input_shape()) {
    const std::string consumer = graph.size() ? graph.node(0).name : std::string("<output>");
    throw ShapeError("node '" + consumer + "': expected input " + shape_str(graph.input_shape()) + ", got " +
                     shape_str(input.shape()));
  }
  if (graph.size() == 0) return input;
  std::vector<Tensor> outputs(graph.size());
  std::vector<std::vector<Tensor>> aux(graph.size());
  std::vector<const Tensor*> args;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const Node& n = graph.node(i);
    args.clear();
    for (int id : n.inputs) args.push_back(id == kGraphInput ? &input : &outputs[static_cast<std::size_t>(id)]);
    outputs[i] = n.layer->forward(args, aux[i]);
  }
  Tensor result = outputs.back();
  if (record) {
    record->graph_ = &graph;
    record->input_ = input;
    record->outputs_ = std::move(outputs);
    record->aux_ = std::move(aux);
  }
  return result;
}

namespace {

void require_trace(const Graph& graph, const Trace& trace, const char* what) {
  if (!trace.recorded() || trace.graph() != &graph) {
    throw StateError(std::string(what) + " requires a recorded forward pass of this graph");
  }
}

}  // namespace

Tensor backward(const Graph& graph, const Trace& trace, const Tensor& upstream, Gradients& grads, bool input_grad) {
  require_trace(graph, trace, "backward");
  if (upstream.shape() != graph.output_shape()) {
    throw ShapeError("backward: upstream gradient " + shape_str(upstream.shape()) + " vs output " +
                     shape_str(graph.output_shape()));
  }
  const std::size_t count = graph.size();
  std::vector<Tensor> node_grads(count);
  node_grads[count - 1] = upstream;
  Tensor in_grad;
  if (input_grad) in_grad = Tensor(graph.input_shape());

  std::vector<const Tensor*> args;
  std::vector<Tensor*> targets;
  for (std::size_t i = count; i-- > 0;) {
    const Node& n = graph.node(i);
    if (node_grads[i].empty() && shape_numel(n.shape) != 0) {
      // Not on any path to the output, but parameters still get a (zero) entry.
      for (const auto& p : n.layer->parameters()) grads.of(*p);
      continue;
    }
    args.clear();
    targets.clear();
    for (int id : n.inputs) {
      if (id == kGraphInput) {
        args.push_back(&trace.input());
        targets.push_back(input_grad ? &in_grad : nullptr);
      } else {
        const auto idx = static_cast<std::size_t>(id);
        args.push_back(&trace.output(idx));
        if (node_grads[idx].empty()) node_grads[idx] = Tensor(graph.node(idx).shape);
        targets.push_back(&node_grads[idx]);
      }
    }
    n.layer->backward(args, trace.output(i), trace.aux(i), node_grads[i], targets, grads);
    node_grads[i] = Tensor();
  }
  return in_grad;
}

RelevanceResult propagate_relevance(const Graph& graph, const Trace& trace, const Tensor& relevance_out, double eps) {
  require_trace(graph, trace, "relevance propagation");
  if (relevance_out.shape() != graph.output_shape()) {
    throw ShapeError("relevance: seed " + shape_str(relevance_out.shape()) + " vs output " +
                     shape_str(graph.output_shape()));
  }
  const std::size_t count = graph.size();
  RelevanceResult result;
  result.input = Tensor(graph.input_shape());
  std::vector<Tensor> node_rel(count);
  node_rel[count - 1] = relevance_out;

  std::vector<const Tensor*> args;
  std::vector<Tensor> scratch;
  std::vector<Tensor*> targets;
  for (std::size_t i = count; i-- > 0;) {
    const Node& n = graph.node(i);
    if (node_rel[i].empty()) continue;
    args.clear();
    for (int id : n.inputs) {
      args.push_back(id == kGraphInput ? &trace.input() : &trace.output(static_cast<std::size_t>(id)));
    }
    scratch.assign(n.inputs.size(), Tensor());
    targets.clear();
    for (auto& s : scratch) targets.push_back(&s);
    RelevanceStep step;
    n.layer->relevance(args, trace.output(i), trace.aux(i), node_rel[i], targets, eps, step);

    LayerRelevance rec{n.name, 0.0, step.absorbed, node_rel[i].sum()};
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      rec.sum_in += scratch[k].sum();
      const int id = n.inputs[k];
      Tensor& dst = id == kGraphInput ? result.input : node_rel[static_cast<std::size_t>(id)];
      if (dst.empty()) {
        dst = std::move(scratch[k]);
      } else {
        add_inplace(dst, scratch[k]);
      }
    }
    result.absorbed += step.absorbed;
    result.layers.push_back(std::move(rec));
    node_rel[i] = Tensor();
  }
  return result;
}

}  // namespace hrfseg::nn
