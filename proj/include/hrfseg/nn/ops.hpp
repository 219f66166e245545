#pragma once

// Raw numeric kernels shared by the layer implementations. All kernels use a
// fixed accumulation order so repeated calls are bit-identical.

#include <cstddef>

#include "hrfseg/tensor.hpp"

namespace hrfseg::nn {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_out_dim(std::size_t in, std::size_t kernel, ConvGeometry geo);

// Cross-correlation of input [C,H,W] with weight [O,C,k,k] plus bias [O].
// Each output accumulates in (channel, ky, kx) order starting from zero; the
// bias is added last.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, ConvGeometry geo);

// Transposed pass: dL/dinput for an upstream gradient of the output shape.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape, ConvGeometry geo);

// Accumulates dL/dweight and dL/dbias.
void conv2d_param_grad(const Tensor& grad_out, const Tensor& input, ConvGeometry geo, Tensor& dweight,
                       Tensor& dbias);

// Row-wise affine map over the last axis: y[..., o] = sum_i x[..., i] w[o, i] + b[o].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor linear_input_grad(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape);
void linear_param_grad(const Tensor& grad_out, const Tensor& x, Tensor& dweight, Tensor& dbias);

// [n,k] x [k,m]
Tensor matmul(const Tensor& a, const Tensor& b);
// [n,k] x [m,k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// [k,n]^T x [k,m]
Tensor matmul_tn(const Tensor& a, const Tensor& b);

// Softmax over the last axis.
Tensor softmax_last(const Tensor& x);
void softmax_inplace(double* row, std::size_t n);

// tanh-approximation GELU.
inline constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC1 = 0.044715;
double gelu(double x);
double gelu_grad(double x);

double sigmoid(double x);

// Epsilon-rule stabilizer: z + eps * sign(z), with sign(0) = +1.
inline double stabilize(double z, double eps) { return z >= 0.0 ? z + eps : z - eps; }

}  // namespace hrfseg::nn
