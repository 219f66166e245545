#include "hrfseg/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "hrfseg/error.hpp"

namespace hrfseg::nn {

namespace {

// Output columns ox whose input column ox*s + k - p lies in [0, width).
struct ColumnRange {
  std::size_t lo;
  std::size_t hi;  // exclusive
};

ColumnRange valid_outputs(std::size_t out, std::size_t in, std::size_t k, ConvGeometry geo) {
  const long s = static_cast<long>(geo.stride);
  const long off = static_cast<long>(k) - static_cast<long>(geo.padding);
  long lo = 0;
  if (off < 0) lo = (-off + s - 1) / s;
  long hi_incl = (static_cast<long>(in) - 1 - off);
  if (hi_incl < 0) return {0, 0};
  hi_incl /= s;
  long hi = std::min<long>(hi_incl + 1, static_cast<long>(out));
  if (lo >= hi) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

void check_conv(const Tensor& input, const Tensor& weight, ConvGeometry geo) {
  if (geo.stride == 0) throw ArgumentError("conv2d: stride must be positive");
  if (input.rank() != 3 || weight.rank() != 4 || weight.dim(1) != input.dim(0) || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t k = weight.dim(2);
  if (k > input.dim(1) + 2 * geo.padding || k > input.dim(2) + 2 * geo.padding) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " exceeds padded input " + shape_str(input.shape()));
  }
}

}  // namespace

std::size_t conv_out_dim(std::size_t in, std::size_t kernel, ConvGeometry geo) {
  if (geo.stride == 0) throw ArgumentError("conv2d: stride must be positive");
  if (kernel > in + 2 * geo.padding) throw ShapeError("kernel larger than padded input");
  return (in + 2 * geo.padding - kernel) / geo.stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvGeometry geo) {
  check_conv(input, weight, geo);
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t O = weight.dim(0), k = weight.dim(2);
  const std::size_t Ho = conv_out_dim(H, k, geo), Wo = conv_out_dim(W, k, geo);
  Tensor out({O, Ho, Wo});
  std::vector<ColumnRange> cols(k), rows(k);
  for (std::size_t t = 0; t < k; ++t) {
    cols[t] = valid_outputs(Wo, W, t, geo);
    rows[t] = valid_outputs(Ho, H, t, geo);
  }
  const std::size_t s = geo.stride;
  const double* in = input.data();
  for (std::size_t o = 0; o < O; ++o) {
    double* acc = out.data() + o * Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = in + c * H * W;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double w = weight[((o * C + c) * k + ky) * k + kx];
          const auto [xlo, xhi] = cols[kx];
          for (std::size_t oy = rows[ky].lo; oy < rows[ky].hi; ++oy) {
            const double* src = plane + (oy * s + ky - geo.padding) * W;
            double* dst = acc + oy * Wo;
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] += w * src[ox * s + kx - geo.padding];
          }
        }
      }
    }
    const double b = bias[o];
    for (std::size_t i = 0; i < Ho * Wo; ++i) acc[i] += b;
  }
  return out;
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape, ConvGeometry geo) {
  const std::size_t C = input_shape[0], H = input_shape[1], W = input_shape[2];
  const std::size_t O = weight.dim(0), k = weight.dim(2);
  const std::size_t Ho = grad_out.dim(1), Wo = grad_out.dim(2);
  Tensor gin(input_shape);
  std::vector<ColumnRange> cols(k), rows(k);
  for (std::size_t t = 0; t < k; ++t) {
    cols[t] = valid_outputs(Wo, W, t, geo);
    rows[t] = valid_outputs(Ho, H, t, geo);
  }
  const std::size_t s = geo.stride;
  for (std::size_t o = 0; o < O; ++o) {
    const double* g = grad_out.data() + o * Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
      double* plane = gin.data() + c * H * W;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double w = weight[((o * C + c) * k + ky) * k + kx];
          const auto [xlo, xhi] = cols[kx];
          for (std::size_t oy = rows[ky].lo; oy < rows[ky].hi; ++oy) {
            double* dst = plane + (oy * s + ky - geo.padding) * W;
            const double* src = g + oy * Wo;
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * s + kx - geo.padding] += w * src[ox];
          }
        }
      }
    }
  }
  return gin;
}

void conv2d_param_grad(const Tensor& grad_out, const Tensor& input, ConvGeometry geo, Tensor& dweight,
                       Tensor& dbias) {
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t O = dweight.dim(0), k = dweight.dim(2);
  const std::size_t Ho = grad_out.dim(1), Wo = grad_out.dim(2);
  std::vector<ColumnRange> cols(k), rows(k);
  for (std::size_t t = 0; t < k; ++t) {
    cols[t] = valid_outputs(Wo, W, t, geo);
    rows[t] = valid_outputs(Ho, H, t, geo);
  }
  const std::size_t s = geo.stride;
  for (std::size_t o = 0; o < O; ++o) {
    const double* g = grad_out.data() + o * Ho * Wo;
    double gb = 0.0;
    for (std::size_t i = 0; i < Ho * Wo; ++i) gb += g[i];
    dbias[o] += gb;
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = input.data() + c * H * W;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto [xlo, xhi] = cols[kx];
          double acc = 0.0;
          for (std::size_t oy = rows[ky].lo; oy < rows[ky].hi; ++oy) {
            const double* src = plane + (oy * s + ky - geo.padding) * W;
            const double* gr = g + oy * Wo;
            for (std::size_t ox = xlo; ox < xhi; ++ox) acc += gr[ox] * src[ox * s + kx - geo.padding];
          }
          dweight[((o * C + c) * k + ky) * k + kx] += acc;
        }
      }
    }
  }
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t in = weight.dim(1), out = weight.dim(0);
  if (x.rank() == 0 || x.shape().back() != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  const std::size_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = out;
  Tensor y(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * in;
    double* yr = y.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = weight.data() + o * in;
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      yr[o] = acc + bias[o];
    }
  }
  return y;
}

Tensor linear_input_grad(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape) {
  const std::size_t in = weight.dim(1), out = weight.dim(0);
  const std::size_t rows = grad_out.size() / out;
  Tensor gin(input_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gr = grad_out.data() + r * out;
    double* dst = gin.data() + r * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = gr[o];
      const double* wr = weight.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) dst[i] += g * wr[i];
    }
  }
  return gin;
}

void linear_param_grad(const Tensor& grad_out, const Tensor& x, Tensor& dweight, Tensor& dbias) {
  const std::size_t in = dweight.dim(1), out = dweight.dim(0);
  const std::size_t rows = grad_out.size() / out;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gr = grad_out.data() + r * out;
    const double* xr = x.data() + r * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = gr[o];
      dbias[o] += g;
      double* dw = dweight.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) dw[i] += g * xr[i];
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor c({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double* cr = c.data() + i * m;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a[i * k + t];
      const double* br = b.data() + t * m;
      for (std::size_t j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  if (b.dim(1) != k) throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor c({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* br = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += ar[t] * br[t];
      c[i * m + j] = acc;
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.dim(0), n = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul_tn: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor c({n, m});
  for (std::size_t t = 0; t < k; ++t) {
    const double* ar = a.data() + t * n;
    const double* br = b.data() + t * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ar[i];
      double* cr = c.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
  return c;
}

void softmax_inplace(double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    row[i] = std::exp(row[i] - mx);
    total += row[i];
  }
  for (std::size_t i = 0; i < n; ++i) row[i] /= total;
}

Tensor softmax_last(const Tensor& x) {
  Tensor y = x;
  const std::size_t n = x.shape().back();
  for (std::size_t r = 0; r < x.size() / n; ++r) softmax_inplace(y.data() + r * n, n);
  return y;
}

double gelu(double x) {
  const double t = std::tanh(kGeluC0 * (x + kGeluC1 * x * x * x));
  return 0.5 * x * (1.0 + t);
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC0 * (x + kGeluC1 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace hrfseg::nn
