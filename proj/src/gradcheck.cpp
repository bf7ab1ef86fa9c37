// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "tsmoe/errors.hpp"

namespace tsmoe {

ParamVars bind_parameters(Graph& graph, const ParamStore& params) {
    ParamVars vars;
    for (const auto& [name, value] : params) vars.emplace(name, graph.parameter(name, value));
    return vars;
}

std::size_t parameter_count(const ParamStore& params) {
    std::size_t n = 0;
    for (const auto& [name, value] : params) n += value.size();
    return n;
}

double relative_error(double a, double b) noexcept {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

double finite_difference_resolution(double f_up, double f_down, double eps) noexcept {
    return 64.0 * std::numeric_limits<double>::epsilon() * std::max({std::abs(f_up), std::abs(f_down), 1.0}) / eps;
}

Tensor finite_difference_gradient(const ScalarFunction& f, const Tensor& x, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite difference step must be positive");
    Tensor grad(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + eps;
        const double up = f(probe);
        probe[i] = x[i] - eps;
        const double down = f(probe);
        probe[i] = x[i];
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericalError("function not finite at probe of coordinate " + std::to_string(i));
        }
        grad[i] = (up - down) / (2.0 * eps);
    }
    return grad;
}

namespace {

struct Probe {
    double value;
    std::uint64_t digest;
};

Probe evaluate(const LossBuilder& loss, const ParamStore& params) {
    Graph graph;
    const ParamVars vars = bind_parameters(graph, params);
    const Var out = loss(graph, vars);
    return {out.value().item(), graph.selection_digest()};
}

} // namespace

GradCheckReport gradient_check(const LossBuilder& loss, const ParamStore& params, double eps, double tol) {
    if (!(eps > 0.0) || !(tol > 0.0)) throw std::invalid_argument("gradient_check needs eps > 0 and tol > 0");
    GradCheckReport report;
    report.tolerance = tol;

    GradientMap analytic;
    std::uint64_t base_digest = 0;
    {
        Graph graph;
        const ParamVars vars = bind_parameters(graph, params);
        const Var out = loss(graph, vars);
        base_digest = graph.selection_digest();
        analytic = graph.backward(out);
    }

    ParamStore probe = params;
    for (const auto& [name, value] : params) {
        Tensor& slot = probe.at(name);
        const Tensor& grad = analytic.at(name);
        for (std::size_t i = 0; i < value.size(); ++i) {
            slot[i] = value[i] + eps;
            const Probe up = evaluate(loss, probe);
            slot[i] = value[i] - eps;
            const Probe down = evaluate(loss, probe);
            slot[i] = value[i];
            if (up.digest != base_digest || down.digest != base_digest) {
                report.excluded.push_back({name, i});
                continue;
            }
            if (!std::isfinite(up.value) || !std::isfinite(down.value)) {
                throw NumericalError("loss not finite while probing " + name);
            }
            const double numeric = (up.value - down.value) / (2.0 * eps);
            const double err = relative_error(grad[i], numeric);
            ++report.checked;
            report.strict_max_relative_error = std::max(report.strict_max_relative_error, err);
            if (err >= tol && std::abs(grad[i] - numeric) <= finite_difference_resolution(up.value, down.value, eps)) {
                ++report.unresolved;
                continue;
            }
            if (err >= report.max_relative_error || report.worst_name.empty()) {
                report.max_relative_error = err;
                report.worst_name = name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

} // namespace tsmoe
