#include "hrfseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "hrfseg/error.hpp"

namespace hrfseg::train {

TrainConfig TrainConfig::desk(ModelKind m) {
  TrainConfig c;
  if (m == ModelKind::Mil) {
    c.steps = 300;
    c.batch = 4;
    c.max_lr = 3e-4;
  }
  return c;
}

TrainConfig TrainConfig::paper(ModelKind m) {
  TrainConfig c;
  c.steps = 50000;
  c.batch = m == ModelKind::Mil ? 64 : 16;
  c.max_lr = m == ModelKind::Mil ? 1e-6 : 1e-5;
  return c;
}

void TrainConfig::validate() const {
  if (steps == 0) throw ArgumentError("train: steps must be > 0");
  if (batch == 0) throw ArgumentError("train: batch must be > 0");
  if (!(max_lr > 0.0)) throw ArgumentError("train: max_lr must be > 0");
  if (weight_decay < 0.0) throw ArgumentError("train: weight_decay must be >= 0");
  if (warmup < 0.0 || warmup >= 1.0) throw ArgumentError("train: warmup must be in [0, 1)");
  if (!(div_initial >= 1.0) || !(div_final >= 1.0)) throw ArgumentError("train: div factors must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch", batch},
          {"max_lr", max_lr},
          {"weight_decay", weight_decay},
          {"warmup", warmup},
          {"div_initial", div_initial},
          {"div_final", div_final},
          {"augment", augment},
          {"log_every", log_every},
          {"checkpoint_every", checkpoint_every},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  const nlohmann::json def = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!def.contains(key)) throw ArgumentError("train config: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("steps", c.steps);
  get("batch", c.batch);
  get("max_lr", c.max_lr);
  get("weight_decay", c.weight_decay);
  get("warmup", c.warmup);
  get("div_initial", c.div_initial);
  get("div_final", c.div_final);
  get("augment", c.augment);
  get("log_every", c.log_every);
  get("checkpoint_every", c.checkpoint_every);
  get("seed", c.seed);
  return c;
}

double onecycle_lr(std::size_t step, std::size_t steps, double max_lr, double warmup, double div_initial,
                   double div_final) {
  if (step >= steps) {
    throw ArgumentError("onecycle_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(steps) + ")");
  }
  const auto peak = static_cast<std::size_t>(std::floor(warmup * static_cast<double>(steps)));
  const double lo = max_lr / div_initial, end = max_lr / div_final;
  auto cosine = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (step < peak) return cosine(lo, max_lr, static_cast<double>(step) / static_cast<double>(peak));
  if (step == peak || steps - 1 == peak) return max_lr;
  return cosine(max_lr, end, static_cast<double>(step - peak) / static_cast<double>(steps - 1 - peak));
}

void adamw_step(const std::vector<nn::ParamPtr>& params, const nn::Gradients& grads, AdamState& state, double lr,
                const AdamConfig& cfg) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (const auto& p : params) {
    Tensor& value = p->value;
    const Tensor* g = grads.find(*p);
    if (g && g->shape() != value.shape()) throw ShapeError("adamw: gradient shape differs for " + p->name);
    auto [mit, m_new] = state.m.try_emplace(p.get(), value.shape());
    auto [vit, v_new] = state.v.try_emplace(p.get(), value.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      value[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * value[i]);
    }
  }
}

double make_label(std::size_t focus_count, HeadKind task) {
  switch (task) {
    case HeadKind::Binary: return focus_count > 0 ? 1.0 : 0.0;
    case HeadKind::ThreeClass: return focus_count == 0 ? 0.0 : (focus_count == 1 ? 1.0 : 2.0);
    case HeadKind::Regression: return static_cast<double>(std::min(focus_count, kMaxCount));
  }
  return 0.0;
}

double loss_and_grad(HeadKind task, const Tensor& logits, double target, Tensor& grad) {
  grad = Tensor(logits.shape());
  switch (task) {
    case HeadKind::Binary: {
      const double z = logits[0];
      grad[0] = nn::sigmoid(z) - target;
      // softplus(z) - target * z, evaluated stably
      return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - target * z;
    }
    case HeadKind::ThreeClass: {
      const Tensor p = nn::softmax_last(logits);
      const auto cls = static_cast<std::size_t>(target);
      for (std::size_t i = 0; i < 3; ++i) grad[i] = p[i] - (i == cls ? 1.0 : 0.0);
      const double mx = std::max({logits[0], logits[1], logits[2]});
      double lse = 0.0;
      for (std::size_t i = 0; i < 3; ++i) lse += std::exp(logits[i] - mx);
      return mx + std::log(lse) - logits[cls];
    }
    case HeadKind::Regression: {
      const double s = nn::sigmoid(logits[0]);
      const double diff = models::kRegressionScale * s - target;
      grad[0] = 2.0 * diff * models::kRegressionScale * s * (1.0 - s);
      return diff * diff;
    }
  }
  return 0.0;
}

void write_loss_csv(std::ostream& os, const std::vector<LogEntry>& log) {
  os << "step,loss,lr\n";
  for (const auto& e : log) {
    std::ostringstream line;
    line.precision(17);
    line << e.step << ',' << e.loss << ',' << e.lr << '\n';
    os << line.str();
  }
}

BalancedSampler::BalancedSampler(const std::vector<Example>& examples, std::uint64_t seed) : rng_(seed) {
  for (std::size_t i = 0; i < examples.size(); ++i) (examples[i].focus_count > 0 ? pos_ : neg_).push_back(i);
  if (pos_.empty() || neg_.empty()) {
    throw ArgumentError("training needs at least one positive and one negative B-scan (have " +
                        std::to_string(pos_.size()) + " positive, " + std::to_string(neg_.size()) + " negative)");
  }
}

std::size_t BalancedSampler::next() {
  last_positive_ = count_++ % 2 == 0;
  const auto& pool = last_positive_ ? pos_ : neg_;
  return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng_)];
}

TrainResult train(models::Model& model, const std::vector<Example>& examples, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  std::vector<const Tensor*> images;
  for (const auto& e : examples) images.push_back(e.image);
  TrainResult result;
  result.stats = preprocess::compute_stats(images);
  model.set_stats(result.stats);

  BalancedSampler sampler(examples, config.seed);
  std::mt19937_64 aug_rng(config.seed ^ 0xa5a5a5a5a5a5a5a5ull);
  const auto params = model.parameters();
  AdamState adam;
  AdamConfig adam_cfg;
  adam_cfg.weight_decay = config.weight_decay;

  nn::Gradients grads;
  for (std::size_t step = 0; step < config.steps; ++step) {
    grads.clear();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const Example& ex = examples[sampler.next()];
      const std::uint64_t aug_seed = aug_rng();
      Tensor input = model.prepare(*ex.image);
      if (config.augment) input = preprocess::augment(input, {}, aug_seed).image;
      const double target = make_label(ex.focus_count, model.head());
      double loss = 0.0;
      model.accumulate_gradients(input, [&](const Tensor& logits) {
        Tensor g;
        loss = loss_and_grad(model.head(), logits, target, g);
        return g;
      }, grads);
      batch_loss += loss;
    }
    batch_loss /= static_cast<double>(config.batch);
    if (!std::isfinite(batch_loss)) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss is " +
                            std::to_string(batch_loss));
    }
    grads.scale(1.0 / static_cast<double>(config.batch));
    const double lr = onecycle_lr(step, config);
    adamw_step(params, grads, adam, lr, adam_cfg);

    if ((config.log_every > 0 && step % config.log_every == 0) || step + 1 == config.steps) {
      result.log.push_back({step, batch_loss, lr});
      if (hooks.on_log) hooks.on_log(result.log.back());
    }
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(step + 1);
    }
  }
  return result;
}

}  // namespace hrfseg::train
