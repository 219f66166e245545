#include "hrfseg/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "hrfseg/error.hpp"

namespace hrfseg::nn {

namespace {

ParamPtr make_param(std::string name, Shape shape) {
  return std::make_shared<Parameter>(Parameter{std::move(name), Tensor(std::move(shape))});
}

ParamPtr normal_param(std::string name, Shape shape, double stddev, Rng& rng) {
  auto p = make_param(std::move(name), std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : p->value.storage()) v = dist(rng);
  return p;
}

void require_one(std::span<const Shape> inputs, std::string_view what) {
  if (inputs.size() != 1) throw ShapeError(std::string(what) + ": expects exactly one input");
}

// s_k = R_k / stab(z_k); returns s and accumulates sum_k s_k * (stab(z_k) - z_k + offset_k).
Tensor epsilon_ratio(const Tensor& relevance_out, const Tensor& z, double eps, double& absorbed,
                     const Tensor* bias = nullptr, std::size_t bias_stride = 0, std::size_t bias_period = 1) {
  Tensor s(z.shape());
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double denom = stabilize(z[i], eps);
    s[i] = relevance_out[i] / denom;
    double offset = denom - z[i];
    if (bias) offset += (*bias)[bias_stride == 0 ? i % bias_period : (i / bias_stride) % bias_period];
    acc += s[i] * offset;
  }
  absorbed += acc;
  return s;
}

void multiply_inplace(Tensor& a, const Tensor& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
}

}  // namespace

std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Linear: return "linear";
    case LayerKind::Relu: return "relu";
    case LayerKind::Gelu: return "gelu";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::MaxPool2d: return "maxpool2d";
    case LayerKind::LayerNorm: return "layernorm";
    case LayerKind::Softmax: return "softmax";
    case LayerKind::Attention: return "attention";
    case LayerKind::SeqPool: return "seqpool";
    case LayerKind::AttentionPool: return "attention_pool";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::Reshape: return "reshape";
    case LayerKind::Tokens: return "tokens";
    case LayerKind::Add: return "add";
    case LayerKind::PosEmbed: return "pos_embed";
  }
  return "unknown";
}

LayerKind kind_from_name(std::string_view name) {
  for (int k = 0; k <= static_cast<int>(LayerKind::PosEmbed); ++k) {
    if (kind_name(static_cast<LayerKind>(k)) == name) return static_cast<LayerKind>(k);
  }
  throw FormatError("unknown layer kind '" + std::string(name) + "'");
}

// ---- Gradients ---------------------------------------------------------------

Tensor& Gradients::of(const Parameter& p) {
  auto it = grads_.find(&p);
  if (it == grads_.end()) it = grads_.emplace(&p, Tensor(p.value.shape())).first;
  return it->second;
}

const Tensor* Gradients::find(const Parameter& p) const {
  auto it = grads_.find(&p);
  return it == grads_.end() ? nullptr : &it->second;
}

void Gradients::accumulate(const Gradients& other) {
  for (const auto& [param, grad] : other.grads_) {
    auto it = grads_.find(param);
    if (it == grads_.end()) {
      grads_.emplace(param, grad);
    } else {
      add_inplace(it->second, grad);
    }
  }
}

void Gradients::scale(double factor) {
  for (auto& [param, grad] : grads_) {
    for (double& v : grad.storage()) v *= factor;
  }
}

// ---- Conv2d ------------------------------------------------------------------

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, ConvGeometry geo, Rng& rng)
    : weight_(normal_param("weight", {out_channels, in_channels, kernel, kernel},
                           std::sqrt(2.0 / static_cast<double>(in_channels * kernel * kernel)), rng)),
      bias_(make_param("bias", {out_channels})),
      geo_(geo) {
  if (geo.stride == 0) throw ArgumentError("conv2d: stride must be positive");
}

Conv2d::Conv2d(ParamPtr weight, ParamPtr bias, ConvGeometry geo)
    : weight_(std::move(weight)), bias_(std::move(bias)), geo_(geo) {
  if (geo.stride == 0) throw ArgumentError("conv2d: stride must be positive");
}

Shape Conv2d::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "conv2d");
  const Shape& in = inputs[0];
  const Shape& w = weight_->value.shape();
  if (in.size() != 3 || in[0] != w[1]) {
    throw ShapeError("conv2d expects [" + std::to_string(w[1]) + ",H,W], got " + shape_str(in));
  }
  return {w[0], conv_out_dim(in[1], w[2], geo_), conv_out_dim(in[2], w[3], geo_)};
}

Tensor Conv2d::forward(Inputs inputs, std::vector<Tensor>&) const {
  return conv2d(*inputs[0], weight_->value, bias_->value, geo_);
}

void Conv2d::backward(Inputs inputs, const Tensor&, const std::vector<Tensor>&, const Tensor& grad_output,
                      std::span<Tensor* const> grad_inputs, Gradients& grads) const {
  conv2d_param_grad(grad_output, *inputs[0], geo_, grads.of(*weight_), grads.of(*bias_));
  if (grad_inputs[0]) {
    add_inplace(*grad_inputs[0], conv2d_input_grad(grad_output, weight_->value, inputs[0]->shape(), geo_));
  }
}

void Conv2d::relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>&, const Tensor& relevance_out,
                       std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const {
  const std::size_t plane = output.dim(1) * output.dim(2);
  Tensor s = epsilon_ratio(relevance_out, output, eps, step.absorbed, &bias_->value, plane, output.dim(0));
  Tensor r = conv2d_input_grad(s, weight_->value, inputs[0]->shape(), geo_);
  multiply_inplace(r, *inputs[0]);
  *relevance_in[0] = std::move(r);
}

nlohmann::json Conv2d::attributes() const { return {{"stride", geo_.stride}, {"padding", geo_.padding}}; }

// ---- Linear ------------------------------------------------------------------

Linear::Linear(std::size_t in_features, std::size_t out_features, Rng& rng, double stddev)
    : weight_(normal_param("weight", {out_features, in_features},
                           stddev > 0.0 ? stddev : std::sqrt(2.0 / static_cast<double>(in_features)), rng)),
      bias_(make_param("bias", {out_features})) {}

Linear::Linear(ParamPtr weight, ParamPtr bias) : weight_(std::move(weight)), bias_(std::move(bias)) {}

Shape Linear::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "linear");
  const Shape& in = inputs[0];
  if (in.empty() || in.back() != weight_->value.dim(1)) {
    throw ShapeError("linear expects last dim " + std::to_string(weight_->value.dim(1)) + ", got " + shape_str(in));
  }
  Shape out = in;
  out.back() = weight_->value.dim(0);
  return out;
}

Tensor Linear::forward(Inputs inputs, std::vector<Tensor>&) const {
  return linear(*inputs[0], weight_->value, bias_->value);
}

void Linear::backward(Inputs inputs, const Tensor&, const std::vector<Tensor>&, const Tensor& grad_output,
                      std::span<Tensor* const> grad_inputs, Gradients& grads) const {
  linear_param_grad(grad_output, *inputs[0], grads.of(*weight_), grads.of(*bias_));
  if (grad_inputs[0]) add_inplace(*grad_inputs[0], linear_input_grad(grad_output, weight_->value, inputs[0]->shape()));
}

void Linear::relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>&, const Tensor& relevance_out,
                       std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const {
  Tensor s = epsilon_ratio(relevance_out, output, eps, step.absorbed, &bias_->value, 0, output.shape().back());
  Tensor r = linear_input_grad(s, weight_->value, inputs[0]->shape());
  multiply_inplace(r, *inputs[0]);
  *relevance_in[0] = std::move(r);
}

// ---- Elementwise -----------------------------------------------------------------

Elementwise::Elementwise(LayerKind kind) : kind_(kind) {
  if (kind != LayerKind::Relu && kind != LayerKind::Gelu && kind != LayerKind::Tanh && kind != LayerKind::Sigmoid) {
    throw ArgumentError("not an elementwise activation: " + std::string(kind_name(kind)));
  }
}

Shape Elementwise::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, kind_name(kind_));
  return inputs[0];
}

Tensor Elementwise::forward(Inputs inputs, std::vector<Tensor>&) const {
  Tensor y = *inputs[0];
  for (double& v : y.storage()) {
    switch (kind_) {
      case LayerKind::Relu: v = v > 0.0 ? v : 0.0; break;
      case LayerKind::Gelu: v = gelu(v); break;
      case LayerKind::Tanh: v = std::tanh(v); break;
      default: v = sigmoid(v); break;
    }
  }
  return y;
}

void Elementwise::backward(Inputs inputs, const Tensor& output, const std::vector<Tensor>&, const Tensor& grad_output,
                           std::span<Tensor* const> grad_inputs, Gradients&) const {
  if (!grad_inputs[0]) return;
  Tensor& g = *grad_inputs[0];
  const Tensor& x = *inputs[0];
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = 0.0;
    switch (kind_) {
      case LayerKind::Relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
      case LayerKind::Gelu: d = gelu_grad(x[i]); break;
      case LayerKind::Tanh: d = 1.0 - output[i] * output[i]; break;
      default: d = output[i] * (1.0 - output[i]); break;
    }
    g[i] += d * grad_output[i];
  }
}

void Elementwise::relevance(Inputs, const Tensor&, const std::vector<Tensor>&, const Tensor& relevance_out,
                            std::span<Tensor* const> relevance_in, double, RelevanceStep&) const {
  *relevance_in[0] = relevance_out;
}

// ---- MaxPool2d ---------------------------------------------------------------

MaxPool2d::MaxPool2d(std::size_t kernel, std::size_t stride) : kernel_(kernel), stride_(stride) {
  if (kernel == 0 || stride == 0) throw ArgumentError("maxpool2d: kernel and stride must be positive");
}

Shape MaxPool2d::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "maxpool2d");
  const Shape& in = inputs[0];
  if (in.size() != 3 || in[1] < kernel_ || in[2] < kernel_) {
    throw ShapeError("maxpool2d(" + std::to_string(kernel_) + ") expects [C,H,W] with H,W >= kernel, got " +
                     shape_str(in));
  }
  return {in[0], (in[1] - kernel_) / stride_ + 1, (in[2] - kernel_) / stride_ + 1};
}

Tensor MaxPool2d::forward(Inputs inputs, std::vector<Tensor>& aux) const {
  const Tensor& x = *inputs[0];
  const Shape shape = output_shape(std::span<const Shape>(&x.shape(), 1));
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), Ho = shape[1], Wo = shape[2];
  Tensor y(shape);
  Tensor winners(shape);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (c * H + oy * stride_) * W + ox * stride_;
        for (std::size_t ky = 0; ky < kernel_; ++ky) {
          const std::size_t row = (c * H + oy * stride_ + ky) * W + ox * stride_;
          for (std::size_t kx = 0; kx < kernel_; ++kx) {
            // strict '>' keeps the first row-major maximum on ties
            if (x[row + kx] > x[best]) best = row + kx;
          }
        }
        const std::size_t o = (c * Ho + oy) * Wo + ox;
        y[o] = x[best];
        winners[o] = static_cast<double>(best);
      }
    }
  }
  aux.push_back(std::move(winners));
  return y;
}

void MaxPool2d::backward(Inputs, const Tensor&, const std::vector<Tensor>& aux, const Tensor& grad_output,
                         std::span<Tensor* const> grad_inputs, Gradients&) const {
  if (!grad_inputs[0]) return;
  const Tensor& winners = aux[0];
  for (std::size_t o = 0; o < winners.size(); ++o) {
    (*grad_inputs[0])[static_cast<std::size_t>(winners[o])] += grad_output[o];
  }
}

void MaxPool2d::relevance(Inputs inputs, const Tensor&, const std::vector<Tensor>& aux, const Tensor& relevance_out,
                          std::span<Tensor* const> relevance_in, double, RelevanceStep&) const {
  Tensor r(inputs[0]->shape());
  const Tensor& winners = aux[0];
  for (std::size_t o = 0; o < winners.size(); ++o) r[static_cast<std::size_t>(winners[o])] += relevance_out[o];
  *relevance_in[0] = std::move(r);
}

nlohmann::json MaxPool2d::attributes() const { return {{"kernel", kernel_}, {"stride", stride_}}; }

// ---- LayerNorm -------------------------------------------------------------------

LayerNorm::LayerNorm(std::size_t features, double eps)
    : gamma_(make_param("gamma", {features})), beta_(make_param("beta", {features})), eps_(eps) {
  gamma_->value.fill(1.0);
}

LayerNorm::LayerNorm(ParamPtr gamma, ParamPtr beta, double eps)
    : gamma_(std::move(gamma)), beta_(std::move(beta)), eps_(eps) {}

Shape LayerNorm::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "layernorm");
  if (inputs[0].empty() || inputs[0].back() != gamma_->value.size()) {
    throw ShapeError("layernorm expects last dim " + std::to_string(gamma_->value.size()) + ", got " +
                     shape_str(inputs[0]));
  }
  return inputs[0];
}

Tensor LayerNorm::forward(Inputs inputs, std::vector<Tensor>& aux) const {
  const Tensor& x = *inputs[0];
  const std::size_t D = gamma_->value.size(), rows = x.size() / D;
  Tensor y(x.shape());
  Tensor mean({rows}), rstd({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * D;
    double m = 0.0;
    for (std::size_t i = 0; i < D; ++i) m += xr[i];
    m /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t i = 0; i < D; ++i) var += (xr[i] - m) * (xr[i] - m);
    var /= static_cast<double>(D);
    const double rs = 1.0 / std::sqrt(var + eps_);
    mean[r] = m;
    rstd[r] = rs;
    double* yr = y.data() + r * D;
    for (std::size_t i = 0; i < D; ++i) yr[i] = gamma_->value[i] * ((xr[i] - m) * rs) + beta_->value[i];
  }
  aux.push_back(std::move(mean));
  aux.push_back(std::move(rstd));
  return y;
}

void LayerNorm::backward(Inputs inputs, const Tensor&, const std::vector<Tensor>& aux, const Tensor& grad_output,
                         std::span<Tensor* const> grad_inputs, Gradients& grads) const {
  const Tensor& x = *inputs[0];
  const std::size_t D = gamma_->value.size(), rows = x.size() / D;
  Tensor& dgamma = grads.of(*gamma_);
  Tensor& dbeta = grads.of(*beta_);
  std::vector<double> xhat(D), dxhat(D);
  for (std::size_t r = 0; r < rows; ++r) {
    const double m = aux[0][r], rs = aux[1][r];
    const double* xr = x.data() + r * D;
    const double* gr = grad_output.data() + r * D;
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      xhat[i] = (xr[i] - m) * rs;
      dgamma[i] += gr[i] * xhat[i];
      dbeta[i] += gr[i];
      dxhat[i] = gr[i] * gamma_->value[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * xhat[i];
    }
    if (!grad_inputs[0]) continue;
    mean_dxhat /= static_cast<double>(D);
    mean_dxhat_xhat /= static_cast<double>(D);
    double* dst = grad_inputs[0]->data() + r * D;
    for (std::size_t i = 0; i < D; ++i) dst[i] += rs * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
  }
}

void LayerNorm::relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux,
                          const Tensor& relevance_out, std::span<Tensor* const> relevance_in, double eps,
                          RelevanceStep& step) const {
  const Tensor& x = *inputs[0];
  const std::size_t D = gamma_->value.size(), rows = x.size() / D;
  Tensor s = epsilon_ratio(relevance_out, output, eps, step.absorbed, &beta_->value, 0, D);
  Tensor r(x.shape());
  for (std::size_t row = 0; row < rows; ++row) {
    const double rs = aux[1][row];
    const double* sr = s.data() + row * D;
    double centered = 0.0;
    for (std::size_t i = 0; i < D; ++i) centered += gamma_->value[i] * sr[i];
    centered /= static_cast<double>(D);
    const double* xr = x.data() + row * D;
    double* rr = r.data() + row * D;
    for (std::size_t j = 0; j < D; ++j) rr[j] = xr[j] * rs * (gamma_->value[j] * sr[j] - centered);
  }
  *relevance_in[0] = std::move(r);
}

nlohmann::json LayerNorm::attributes() const { return {{"eps", eps_}}; }

// ---- Softmax -----------------------------------------------------------------

Shape Softmax::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "softmax");
  if (inputs[0].empty() || inputs[0].back() == 0) throw ShapeError("softmax over an empty axis");
  return inputs[0];
}

Tensor Softmax::forward(Inputs inputs, std::vector<Tensor>&) const { return softmax_last(*inputs[0]); }

void Softmax::backward(Inputs, const Tensor& output, const std::vector<Tensor>&, const Tensor& grad_output,
                       std::span<Tensor* const> grad_inputs, Gradients&) const {
  if (!grad_inputs[0]) return;
  const std::size_t n = output.shape().back();
  for (std::size_t r = 0; r < output.size() / n; ++r) {
    const double* p = output.data() + r * n;
    const double* g = grad_output.data() + r * n;
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += p[i] * g[i];
    double* dst = grad_inputs[0]->data() + r * n;
    for (std::size_t i = 0; i < n; ++i) dst[i] += p[i] * (g[i] - dot);
  }
}

void Softmax::relevance(Inputs, const Tensor&, const std::vector<Tensor>&, const Tensor& relevance_out,
                        std::span<Tensor* const> relevance_in, double, RelevanceStep&) const {
  *relevance_in[0] = relevance_out;
}

// ---- Attention -----------------------------------------------------------------

Attention::Attention(std::size_t dim, std::size_t heads, Rng& rng, double stddev) : heads_(heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ArgumentError("attention: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                        " heads");
  }
  const double sd = stddev > 0.0 ? stddev : std::sqrt(1.0 / static_cast<double>(dim));
  wq_ = normal_param("wq", {dim, dim}, sd, rng);
  bq_ = make_param("bq", {dim});
  wk_ = normal_param("wk", {dim, dim}, sd, rng);
  bk_ = make_param("bk", {dim});
  wv_ = normal_param("wv", {dim, dim}, sd, rng);
  bv_ = make_param("bv", {dim});
  wo_ = normal_param("wo", {dim, dim}, sd, rng);
  bo_ = make_param("bo", {dim});
}

Attention::Attention(std::size_t heads, ParamPtr wq, ParamPtr bq, ParamPtr wk, ParamPtr bk, ParamPtr wv, ParamPtr bv,
                     ParamPtr wo, ParamPtr bo)
    : wq_(std::move(wq)),
      bq_(std::move(bq)),
      wk_(std::move(wk)),
      bk_(std::move(bk)),
      wv_(std::move(wv)),
      bv_(std::move(bv)),
      wo_(std::move(wo)),
      bo_(std::move(bo)),
      heads_(heads) {
  const std::size_t dim = wq_->value.dim(0);
  if (heads == 0 || dim % heads != 0) {
    throw ArgumentError("attention: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                        " heads");
  }
}

Shape Attention::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "attention");
  const std::size_t D = wq_->value.dim(0);
  if (inputs[0].size() != 2 || inputs[0][1] != D || inputs[0][0] == 0) {
    throw ShapeError("attention expects [N," + std::to_string(D) + "] tokens, got " + shape_str(inputs[0]));
  }
  return inputs[0];
}

Tensor Attention::forward(Inputs inputs, std::vector<Tensor>& aux) const {
  const Tensor& x = *inputs[0];
  const std::size_t N = x.dim(0), D = x.dim(1), dh = D / heads_;
  Tensor q = linear(x, wq_->value, bq_->value);
  Tensor k = linear(x, wk_->value, bk_->value);
  Tensor v = linear(x, wv_->value, bv_->value);
  Tensor attn({heads_, N, N});
  Tensor ctx({N, D});
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads_; ++h) {
    const std::size_t off = h * dh;
    double* a = attn.data() + h * N * N;
    for (std::size_t i = 0; i < N; ++i) {
      const double* qi = q.data() + i * D + off;
      double* row = a + i * N;
      for (std::size_t j = 0; j < N; ++j) {
        const double* kj = k.data() + j * D + off;
        double acc = 0.0;
        for (std::size_t t = 0; t < dh; ++t) acc += qi[t] * kj[t];
        row[j] = acc * scale;
      }
      softmax_inplace(row, N);
      double* ci = ctx.data() + i * D + off;
      for (std::size_t j = 0; j < N; ++j) {
        const double aij = row[j];
        const double* vj = v.data() + j * D + off;
        for (std::size_t t = 0; t < dh; ++t) ci[t] += aij * vj[t];
      }
    }
  }
  Tensor y = linear(ctx, wo_->value, bo_->value);
  aux.push_back(std::move(q));
  aux.push_back(std::move(k));
  aux.push_back(std::move(v));
  aux.push_back(std::move(attn));
  aux.push_back(std::move(ctx));
  return y;
}

void Attention::backward(Inputs inputs, const Tensor&, const std::vector<Tensor>& aux, const Tensor& grad_output,
                         std::span<Tensor* const> grad_inputs, Gradients& grads) const {
  const Tensor& x = *inputs[0];
  const Tensor &q = aux[0], &k = aux[1], &v = aux[2], &attn = aux[3], &ctx = aux[4];
  const std::size_t N = x.dim(0), D = x.dim(1), dh = D / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  linear_param_grad(grad_output, ctx, grads.of(*wo_), grads.of(*bo_));
  Tensor dctx = linear_input_grad(grad_output, wo_->value, ctx.shape());

  Tensor dq({N, D}), dk({N, D}), dv({N, D});
  std::vector<double> da(N);
  for (std::size_t h = 0; h < heads_; ++h) {
    const std::size_t off = h * dh;
    const double* a = attn.data() + h * N * N;
    for (std::size_t i = 0; i < N; ++i) {
      const double* row = a + i * N;
      const double* dci = dctx.data() + i * D + off;
      double dot = 0.0;
      for (std::size_t j = 0; j < N; ++j) {
        const double* vj = v.data() + j * D + off;
        double acc = 0.0;
        for (std::size_t t = 0; t < dh; ++t) acc += dci[t] * vj[t];
        da[j] = acc;
        dot += acc * row[j];
        double* dvj = dv.data() + j * D + off;
        for (std::size_t t = 0; t < dh; ++t) dvj[t] += row[j] * dci[t];
      }
      const double* qi = q.data() + i * D + off;
      double* dqi = dq.data() + i * D + off;
      for (std::size_t j = 0; j < N; ++j) {
        const double ds = row[j] * (da[j] - dot) * scale;
        if (ds == 0.0) continue;
        const double* kj = k.data() + j * D + off;
        double* dkj = dk.data() + j * D + off;
        for (std::size_t t = 0; t < dh; ++t) {
          dqi[t] += ds * kj[t];
          dkj[t] += ds * qi[t];
        }
      }
    }
  }
  linear_param_grad(dq, x, grads.of(*wq_), grads.of(*bq_));
  linear_param_grad(dk, x, grads.of(*wk_), grads.of(*bk_));
  linear_param_grad(dv, x, grads.of(*wv_), grads.of(*bv_));
  if (grad_inputs[0]) {
    add_inplace(*grad_inputs[0], linear_input_grad(dq, wq_->value, x.shape()));
    add_inplace(*grad_inputs[0], linear_input_grad(dk, wk_->value, x.shape()));
    add_inplace(*grad_inputs[0], linear_input_grad(dv, wv_->value, x.shape()));
  }
}

void Attention::relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux,
                          const Tensor& relevance_out, std::span<Tensor* const> relevance_in, double eps,
                          RelevanceStep& step) const {
  const Tensor& x = *inputs[0];
  const Tensor &v = aux[2], &attn = aux[3], &ctx = aux[4];
  const std::size_t N = x.dim(0), D = x.dim(1), dh = D / heads_;

  // output projection
  Tensor s_out = epsilon_ratio(relevance_out, output, eps, step.absorbed, &bo_->value, 0, D);
  Tensor r_ctx = linear_input_grad(s_out, wo_->value, ctx.shape());
  multiply_inplace(r_ctx, ctx);

  // constant mixing ctx[i] = sum_j A[i,j] v[j]
  Tensor s_ctx = epsilon_ratio(r_ctx, ctx, eps, step.absorbed);
  Tensor r_v({N, D});
  for (std::size_t h = 0; h < heads_; ++h) {
    const std::size_t off = h * dh;
    const double* a = attn.data() + h * N * N;
    for (std::size_t i = 0; i < N; ++i) {
      const double* si = s_ctx.data() + i * D + off;
      for (std::size_t j = 0; j < N; ++j) {
        const double aij = a[i * N + j];
        double* rj = r_v.data() + j * D + off;
        for (std::size_t t = 0; t < dh; ++t) rj[t] += aij * si[t];
      }
    }
  }
  multiply_inplace(r_v, v);

  // value projection
  Tensor s_v = epsilon_ratio(r_v, v, eps, step.absorbed, &bv_->value, 0, D);
  Tensor r_x = linear_input_grad(s_v, wv_->value, x.shape());
  multiply_inplace(r_x, x);
  *relevance_in[0] = std::move(r_x);
}

nlohmann::json Attention::attributes() const { return {{"heads", heads_}}; }

// ---- SeqPool -------------------------------------------------------------------

SeqPool::SeqPool(std::size_t dim, Rng& rng, double stddev)
    : u_(normal_param("u", {dim}, stddev > 0.0 ? stddev : std::sqrt(1.0 / static_cast<double>(dim)), rng)) {}

SeqPool::SeqPool(ParamPtr u) : u_(std::move(u)) {}

Shape SeqPool::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "seqpool");
  const std::size_t D = u_->value.size();
  if (inputs[0].size() != 2 || inputs[0][1] != D) {
    throw ShapeError("seqpool expects [N," + std::to_string(D) + "], got " + shape_str(inputs[0]));
  }
  if (inputs[0][0] == 0) throw ArgumentError("seqpool: empty token list");
  return {D};
}

Tensor SeqPool::forward(Inputs inputs, std::vector<Tensor>& aux) const {
  const Tensor& x = *inputs[0];
  if (x.rank() != 2 || x.dim(0) == 0) throw ArgumentError("seqpool: empty token list");
  const std::size_t N = x.dim(0), D = x.dim(1);
  Tensor a({N});
  for (std::size_t n = 0; n < N; ++n) {
    double acc = 0.0;
    for (std::size_t d = 0; d < D; ++d) acc += x[n * D + d] * u_->value[d];
    a[n] = acc;
  }
  softmax_inplace(a.data(), N);
  Tensor y({D});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t d = 0; d < D; ++d) y[d] += a[n] * x[n * D + d];
  }
  aux.push_back(std::move(a));
  return y;
}

void SeqPool::backward(Inputs inputs, const Tensor&, const std::vector<Tensor>& aux, const Tensor& grad_output,
                       std::span<Tensor* const> grad_inputs, Gradients& grads) const {
  const Tensor& x = *inputs[0];
  const Tensor& a = aux[0];
  const std::size_t N = x.dim(0), D = x.dim(1);
  std::vector<double> da(N);
  double dot = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    double acc = 0.0;
    for (std::size_t d = 0; d < D; ++d) acc += grad_output[d] * x[n * D + d];
    da[n] = acc;
    dot += a[n] * acc;
  }
  Tensor& du = grads.of(*u_);
  for (std::size_t n = 0; n < N; ++n) {
    const double ds = a[n] * (da[n] - dot);
    for (std::size_t d = 0; d < D; ++d) du[d] += ds * x[n * D + d];
    if (grad_inputs[0]) {
      double* dst = grad_inputs[0]->data() + n * D;
      for (std::size_t d = 0; d < D; ++d) dst[d] += a[n] * grad_output[d] + ds * u_->value[d];
    }
  }
}

void SeqPool::relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux,
                        const Tensor& relevance_out, std::span<Tensor* const> relevance_in, double eps,
                        RelevanceStep& step) const {
  const Tensor& x = *inputs[0];
  const Tensor& a = aux[0];
  const std::size_t N = x.dim(0), D = x.dim(1);
  Tensor s = epsilon_ratio(relevance_out, output, eps, step.absorbed);
  Tensor r(x.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t d = 0; d < D; ++d) r[n * D + d] = a[n] * x[n * D + d] * s[d];
  }
  *relevance_in[0] = std::move(r);
}

// ---- AttentionPool -------------------------------------------------------------

AttentionPool::AttentionPool(std::size_t embed_dim, std::size_t hidden_dim, Rng& rng)
    : v_(normal_param("V", {hidden_dim, embed_dim}, std::sqrt(1.0 / static_cast<double>(embed_dim)), rng)),
      w_(normal_param("w", {hidden_dim}, std::sqrt(1.0 / static_cast<double>(hidden_dim)), rng)) {}

AttentionPool::AttentionPool(ParamPtr v, ParamPtr w) : v_(std::move(v)), w_(std::move(w)) {}

Shape AttentionPool::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "attention_pool");
  const std::size_t M = v_->value.dim(1);
  if (inputs[0].size() != 2 || inputs[0][1] != M) {
    throw ShapeError("attention_pool expects [K," + std::to_string(M) + "], got " + shape_str(inputs[0]));
  }
  if (inputs[0][0] == 0) throw ArgumentError("attention_pool: empty bag");
  return {M};
}

Tensor AttentionPool::forward(Inputs inputs, std::vector<Tensor>& aux) const {
  const Tensor& h = *inputs[0];
  if (h.rank() != 2 || h.dim(0) == 0) throw ArgumentError("attention_pool: empty bag");
  const std::size_t K = h.dim(0), M = h.dim(1), L = v_->value.dim(0);
  Tensor t({K, L});
  Tensor a({K});
  for (std::size_t k = 0; k < K; ++k) {
    const double* hk = h.data() + k * M;
    double score = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      const double* vl = v_->value.data() + l * M;
      double acc = 0.0;
      for (std::size_t m = 0; m < M; ++m) acc += vl[m] * hk[m];
      const double th = std::tanh(acc);
      t[k * L + l] = th;
      score += w_->value[l] * th;
    }
    a[k] = score;
  }
  softmax_inplace(a.data(), K);
  Tensor z({M});
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t m = 0; m < M; ++m) z[m] += a[k] * h[k * M + m];
  }
  aux.push_back(std::move(t));
  aux.push_back(std::move(a));
  return z;
}

void AttentionPool::backward(Inputs inputs, const Tensor&, const std::vector<Tensor>& aux, const Tensor& grad_output,
                             std::span<Tensor* const> grad_inputs, Gradients& grads) const {
  const Tensor& h = *inputs[0];
  const Tensor &t = aux[0], &a = aux[1];
  const std::size_t K = h.dim(0), M = h.dim(1), L = v_->value.dim(0);
  std::vector<double> da(K);
  double dot = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double acc = 0.0;
    for (std::size_t m = 0; m < M; ++m) acc += grad_output[m] * h[k * M + m];
    da[k] = acc;
    dot += a[k] * acc;
  }
  Tensor& dV = grads.of(*v_);
  Tensor& dw = grads.of(*w_);
  std::vector<double> dpre(L);
  for (std::size_t k = 0; k < K; ++k) {
    const double ds = a[k] * (da[k] - dot);
    for (std::size_t l = 0; l < L; ++l) {
      const double th = t[k * L + l];
      dw[l] += ds * th;
      dpre[l] = ds * w_->value[l] * (1.0 - th * th);
    }
    const double* hk = h.data() + k * M;
    for (std::size_t l = 0; l < L; ++l) {
      double* dvl = dV.data() + l * M;
      for (std::size_t m = 0; m < M; ++m) dvl[m] += dpre[l] * hk[m];
    }
    if (grad_inputs[0]) {
      double* dst = grad_inputs[0]->data() + k * M;
      for (std::size_t m = 0; m < M; ++m) dst[m] += a[k] * grad_output[m];
      for (std::size_t l = 0; l < L; ++l) {
        const double* vl = v_->value.data() + l * M;
        for (std::size_t m = 0; m < M; ++m) dst[m] += dpre[l] * vl[m];
      }
    }
  }
}

void AttentionPool::relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>& aux,
                              const Tensor& relevance_out, std::span<Tensor* const> relevance_in, double eps,
                              RelevanceStep& step) const {
  const Tensor& h = *inputs[0];
  const Tensor& a = aux[1];
  const std::size_t K = h.dim(0), M = h.dim(1);
  Tensor s = epsilon_ratio(relevance_out, output, eps, step.absorbed);
  Tensor r(h.shape());
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t m = 0; m < M; ++m) r[k * M + m] = a[k] * h[k * M + m] * s[m];
  }
  *relevance_in[0] = std::move(r);
}

// ---- Reshape / Tokens ----------------------------------------------------------

Reshape::Reshape(Shape target) : target_(std::move(target)) {}

Shape Reshape::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "reshape");
  if (shape_numel(inputs[0]) != shape_numel(target_)) {
    throw ShapeError("reshape " + shape_str(inputs[0]) + " -> " + shape_str(target_) + " changes element count");
  }
  return target_;
}

Tensor Reshape::forward(Inputs inputs, std::vector<Tensor>&) const { return inputs[0]->reshaped(target_); }

void Reshape::backward(Inputs inputs, const Tensor&, const std::vector<Tensor>&, const Tensor& grad_output,
                       std::span<Tensor* const> grad_inputs, Gradients&) const {
  if (grad_inputs[0]) add_inplace(*grad_inputs[0], grad_output.reshaped(inputs[0]->shape()));
}

void Reshape::relevance(Inputs inputs, const Tensor&, const std::vector<Tensor>&, const Tensor& relevance_out,
                        std::span<Tensor* const> relevance_in, double, RelevanceStep&) const {
  *relevance_in[0] = relevance_out.reshaped(inputs[0]->shape());
}

nlohmann::json Reshape::attributes() const { return {{"shape", target_}}; }

namespace {

Tensor chw_to_tokens(const Tensor& x) {
  const std::size_t C = x.dim(0), P = x.dim(1) * x.dim(2);
  Tensor t({P, C});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < P; ++p) t[p * C + c] = x[c * P + p];
  }
  return t;
}

Tensor tokens_to_chw(const Tensor& t, const Shape& shape) {
  const std::size_t C = shape[0], P = shape[1] * shape[2];
  Tensor x(shape);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < P; ++p) x[c * P + p] = t[p * C + c];
  }
  return x;
}

}  // namespace

Shape Tokens::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "tokens");
  if (inputs[0].size() != 3) throw ShapeError("tokens expects [C,H,W], got " + shape_str(inputs[0]));
  return {inputs[0][1] * inputs[0][2], inputs[0][0]};
}

Tensor Tokens::forward(Inputs inputs, std::vector<Tensor>&) const { return chw_to_tokens(*inputs[0]); }

void Tokens::backward(Inputs inputs, const Tensor&, const std::vector<Tensor>&, const Tensor& grad_output,
                      std::span<Tensor* const> grad_inputs, Gradients&) const {
  if (grad_inputs[0]) add_inplace(*grad_inputs[0], tokens_to_chw(grad_output, inputs[0]->shape()));
}

void Tokens::relevance(Inputs inputs, const Tensor&, const std::vector<Tensor>&, const Tensor& relevance_out,
                       std::span<Tensor* const> relevance_in, double, RelevanceStep&) const {
  *relevance_in[0] = tokens_to_chw(relevance_out, inputs[0]->shape());
}

// ---- Add -----------------------------------------------------------------------

Shape Add::output_shape(std::span<const Shape> inputs) const {
  if (inputs.size() != 2 || inputs[0] != inputs[1]) {
    throw ShapeError("add expects two equal shapes, got " + (inputs.empty() ? std::string("none") : shape_str(inputs[0])) +
                     (inputs.size() > 1 ? " and " + shape_str(inputs[1]) : std::string()));
  }
  return inputs[0];
}

Tensor Add::forward(Inputs inputs, std::vector<Tensor>&) const {
  Tensor y = *inputs[0];
  add_inplace(y, *inputs[1]);
  return y;
}

void Add::backward(Inputs, const Tensor&, const std::vector<Tensor>&, const Tensor& grad_output,
                   std::span<Tensor* const> grad_inputs, Gradients&) const {
  for (Tensor* g : grad_inputs) {
    if (g) add_inplace(*g, grad_output);
  }
}

void Add::relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>&, const Tensor& relevance_out,
                    std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const {
  Tensor s = epsilon_ratio(relevance_out, output, eps, step.absorbed);
  for (std::size_t k = 0; k < 2; ++k) {
    Tensor r = s;
    multiply_inplace(r, *inputs[k]);
    *relevance_in[k] = std::move(r);
  }
}

// ---- PosEmbed ------------------------------------------------------------------

PosEmbed::PosEmbed(std::size_t tokens, std::size_t dim, Rng& rng)
    : table_(normal_param("table", {tokens, dim}, 0.02, rng)) {}

PosEmbed::PosEmbed(ParamPtr table) : table_(std::move(table)) {}

Shape PosEmbed::output_shape(std::span<const Shape> inputs) const {
  require_one(inputs, "pos_embed");
  if (inputs[0] != table_->value.shape()) {
    throw ShapeError("pos_embed expects " + shape_str(table_->value.shape()) + ", got " + shape_str(inputs[0]));
  }
  return inputs[0];
}

Tensor PosEmbed::forward(Inputs inputs, std::vector<Tensor>&) const {
  Tensor y = *inputs[0];
  add_inplace(y, table_->value);
  return y;
}

void PosEmbed::backward(Inputs, const Tensor&, const std::vector<Tensor>&, const Tensor& grad_output,
                        std::span<Tensor* const> grad_inputs, Gradients& grads) const {
  add_inplace(grads.of(*table_), grad_output);
  if (grad_inputs[0]) add_inplace(*grad_inputs[0], grad_output);
}

void PosEmbed::relevance(Inputs inputs, const Tensor& output, const std::vector<Tensor>&, const Tensor& relevance_out,
                         std::span<Tensor* const> relevance_in, double eps, RelevanceStep& step) const {
  Tensor s = epsilon_ratio(relevance_out, output, eps, step.absorbed, &table_->value, 1, table_->value.size());
  multiply_inplace(s, *inputs[0]);
  *relevance_in[0] = std::move(s);
}

}  // namespace hrfseg::nn
