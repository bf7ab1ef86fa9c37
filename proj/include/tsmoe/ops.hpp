// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "tsmoe/autodiff.hpp"

// Differentiable tensor operations. Matrices are row-major; a rank-1 tensor
// used as a bias broadcasts across rows.
namespace tsmoe::ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_bias(Var x, Var bias);

Var sum(Var a);
Var mean(Var a);
/// Sum of a elementwise-weighted by a constant tensor of the same size.
Var weighted_sum(Var a, const Tensor& weights);
Var square_norm(Var a);

/// Exact (erf-based) GELU.
Var gelu(Var a);
double gelu_value(double x);

/// Row-wise layer normalization with learned gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

Var softmax_rows(Var logits);

Var gather_rows(Var x, std::vector<std::size_t> rows);
/// Copy of x with the listed rows overwritten by a single learned row vector.
Var replace_rows(Var x, std::vector<std::size_t> rows, Var row_value);

} // namespace tsmoe::ops
