#pragma once

#include <cstddef>

#include "trustmae/autograd.hpp"

// Differentiable primitives. Every op records its backward pass on the
// tape when gradients are enabled; all of them are covered by grad_check.
namespace tmae::ops {

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
// Subgradient 0 at x == 0.
Var abs(const Var& a);

Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope = 0.2);
Var tanh(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);

// a[n,k] · b[k,m]
Var matmul(const Var& a, const Var& b);
// x[n,in] · W[in,out] + b[out]
Var linear(const Var& x, const Var& w, const Var& b);

// x[n,c_in,h,w], kernel[c_out,c_in,kh,kw], optional bias[c_out].
Var conv2d(const Var& x, const Var& kernel, const Var* bias, int stride, int padding);
// x[n,c_in,h,w], kernel[c_in,c_out,kh,kw], optional bias[c_out].
// Output spatial size (h-1)*stride - 2*padding + kh.
Var conv_transpose2d(const Var& x, const Var& kernel, const Var* bias, int stride, int padding);

std::size_t conv_output_size(std::size_t in, std::size_t k, int stride, int padding);

// Per-channel batch normalization of x[n,c,h,w]. In training mode batch
// statistics are used and the running estimates are updated in place.
struct BatchNormState {
    Tensor* running_mean = nullptr;
    Tensor* running_var = nullptr;
    double momentum = 0.1;
    double eps = 1e-5;
};
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState state, bool training);

// Row-wise softmax of x[n,m] with max subtraction. A rank-1 input is
// treated as a single row.
Var softmax(const Var& x);

// Keeps the k largest entries of each row (ties toward the lower index),
// zeroes the rest and renormalizes the row to sum 1.
Var topk_renormalize(const Var& w, std::size_t k);

// D[i,j] = sqrt(|z_i - m_j|^2 + 1e-12)
Var pairwise_distance(const Var& z, const Var& m);

// [n,c,h,w] <-> [n*h*w, c]
Var nchw_to_rows(const Var& x);
Var rows_to_nchw(const Var& rows, std::size_t n, std::size_t h, std::size_t w);

// Bilinear resize (align_corners = false) of x[c,h,w] or x[n,c,h,w].
Var bilinear_upsample(const Var& x, std::size_t out_h, std::size_t out_w);

// Mean over a window x window neighbourhood clipped at the borders.
Var box_filter(const Var& x, std::size_t window);

inline constexpr double kDistanceEps = 1e-12;

}  // namespace tmae::ops
