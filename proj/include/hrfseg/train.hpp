#pragma once

// AdamW + OneCycle training with balanced positive/negative sampling.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfseg/models.hpp"
#include "hrfseg/nn/layers.hpp"
#include "hrfseg/preprocess.hpp"

namespace hrfseg::train {

using models::HeadKind;
using models::ModelKind;

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 8;
  double max_lr = 1e-3;
  double weight_decay = 0.01;
  double warmup = 0.3;
  double div_initial = 25.0;
  double div_final = 1e4;
  bool augment = true;
  std::size_t log_every = 50;
  std::size_t checkpoint_every = 0;  // 0 disables intermediate checkpoints
  std::uint64_t seed = 0;

  static TrainConfig desk(ModelKind m);
  static TrainConfig paper(ModelKind m);

  void validate() const;
  nlohmann::json to_json() const;
  // Keys present in `j` override `base`; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
};

// Cosine warm-up from max_lr/div_initial to max_lr at floor(warmup*steps),
// then cosine decay to max_lr/div_final at the last step.
double onecycle_lr(std::size_t step, std::size_t steps, double max_lr, double warmup = 0.3, double div_initial = 25.0,
                   double div_final = 1e4);
inline double onecycle_lr(std::size_t step, const TrainConfig& c) {
  return onecycle_lr(step, c.steps, c.max_lr, c.warmup, c.div_initial, c.div_final);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::size_t t = 0;
  std::unordered_map<const nn::Parameter*, Tensor> m, v;
};

// One decoupled-weight-decay Adam step:
// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
// Parameters absent from `grads` are treated as having zero gradient.
void adamw_step(const std::vector<nn::ParamPtr>& params, const nn::Gradients& grads, AdamState& state, double lr,
                const AdamConfig& cfg = {});

inline constexpr std::size_t kMaxCount = 10;

// Binary {0,1}; ThreeClass {0, 1, 2 for >1}; Regression min(count, 10).
double make_label(std::size_t focus_count, HeadKind task);

// Task loss and dL/dlogits for one sample: BCE on the logit, cross-entropy on
// the three logits, squared error on 10*sigmoid(logit).
double loss_and_grad(HeadKind task, const Tensor& logits, double target, Tensor& grad);

struct Example {
  const Tensor* image = nullptr;  // raw [rows, cols]
  std::size_t focus_count = 0;
};

struct LogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<LogEntry> log;
  preprocess::Stats stats;
};

void write_loss_csv(std::ostream& os, const std::vector<LogEntry>& log);

// Deterministic 1:1 sampler: sample i of the run is positive when i is even.
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<Example>& examples, std::uint64_t seed);
  std::size_t next();
  bool last_positive() const { return last_positive_; }

 private:
  std::vector<std::size_t> pos_, neg_;
  std::mt19937_64 rng_;
  std::size_t count_ = 0;
  bool last_positive_ = false;
};

struct TrainHooks {
  std::function<void(const LogEntry&)> on_log;
  std::function<void(std::size_t step)> on_checkpoint;
};

// Sets the model's normalization statistics from `examples`, then runs
// config.steps optimizer steps. Throws DivergenceError on a non-finite loss.
TrainResult train(models::Model& model, const std::vector<Example>& examples, const TrainConfig& config,
                  const TrainHooks& hooks = {});

}  // namespace hrfseg::train
