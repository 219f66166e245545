#pragma once

// Test-only helpers: random tensors, a central finite-difference gradient
// checker, and independent reference evaluators.

#include <algorithm>
#include <cmath>
#include <random>

#include "hrfseg/nn/layers.hpp"
#include "hrfseg/tensor.hpp"

namespace hrfseg::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (double& v : t.storage()) v = dist(rng);
  return t;
}

inline void randomize_parameters(const nn::Graph& g, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> dist(0.0, scale);
  for (const auto& p : g.parameters()) {
    for (double& v : p->value.storage()) v = dist(rng);
  }
}

// |a - b| / max(|a|, |b|, floor). The floor covers gradients that vanish
// analytically (key biases under softmax), where central differences leave
// ~1e-10 of rounding noise.
inline double rel_error(double a, double b, double floor = 1e-5) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double projected_loss(const nn::Graph& g, const Tensor& x, const Tensor& proj) {
  const Tensor y = nn::forward(g, x);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * proj[i];
  return s;
}

struct FdReport {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Compares backward() against central differences (step h) for every
// parameter entry and every input entry, using the loss sum(proj * output).
inline FdReport finite_difference_check(const nn::Graph& g, Tensor x, std::mt19937_64& rng, double h = 1e-5) {
  const Tensor proj = random_tensor(g.output_shape(), rng);
  nn::Trace trace;
  nn::forward(g, x, &trace);
  nn::Gradients grads;
  const Tensor dx = nn::backward(g, trace, proj, grads, true);

  FdReport report;
  for (const auto& p : g.parameters()) {
    const Tensor& analytic = grads.of(*p);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = projected_loss(g, x, proj);
      p->value[i] = orig - h;
      const double down = projected_loss(g, x, proj);
      p->value[i] = orig;
      report.max_rel = std::max(report.max_rel, rel_error(analytic[i], (up - down) / (2 * h)));
      ++report.checked;
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = projected_loss(g, x, proj);
    x[i] = orig - h;
    const double down = projected_loss(g, x, proj);
    x[i] = orig;
    report.max_rel = std::max(report.max_rel, rel_error(dx[i], (up - down) / (2 * h)));
    ++report.checked;
  }
  return report;
}

// Straightforward quadruple loop; bias added after the (c, ky, kx) sum.
inline Tensor reference_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                               std::size_t pad) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), O = w.dim(0), k = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor y({O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
              acc += w[((o * C + c) * k + ky) * k + kx] * x.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
          }
        }
        y.at(o, oy, ox) = acc + b[o];
      }
    }
  }
  return y;
}

}  // namespace hrfseg::testing
