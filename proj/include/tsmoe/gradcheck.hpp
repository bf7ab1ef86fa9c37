// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "tsmoe/params.hpp"

namespace tsmoe {

using ScalarFunction = std::function<double(const Tensor&)>;

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), one coordinate at a time.
/// Throws NumericalError if f is not finite at a probe point.
Tensor finite_difference_gradient(const ScalarFunction& f, const Tensor& x, double eps);

/// Builds a scalar loss on `graph` from bound parameters.
using LossBuilder = std::function<Var(Graph& graph, const ParamVars& params)>;

struct ExcludedCoordinate {
    std::string name;
    std::size_t index = 0;
};

struct GradCheckReport {
    double max_relative_error = 0.0;        // over resolved coordinates
    double strict_max_relative_error = 0.0; // over every compared coordinate
    std::string worst_name;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    std::size_t unresolved = 0; // compared coordinates below finite-difference resolution
    std::vector<ExcludedCoordinate> excluded;
    double tolerance = 0.0;

    bool passed() const noexcept { return max_relative_error < tolerance; }
};

/// |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b) noexcept;

/// Smallest |analytic - numeric| a central difference can resolve:
/// 64 * machine epsilon * max(|f(x+eps)|, |f(x-eps)|, 1) / eps.
double finite_difference_resolution(double f_up, double f_down, double eps) noexcept;

/// Compares backward() against central differences for every coordinate of
/// every parameter. A coordinate whose perturbation changes a recorded
/// discrete selection (TopK, argmax) sits at a kink and is reported as
/// excluded instead of compared. A coordinate whose relative error exceeds
/// the tolerance while its absolute error is within finite-difference
/// resolution counts as unresolved rather than failed.
GradCheckReport gradient_check(const LossBuilder& loss, const ParamStore& params, double eps, double tol);

} // namespace tsmoe
