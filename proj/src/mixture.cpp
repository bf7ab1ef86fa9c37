// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace tsmoe {
namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double log_sum_exp(std::span<const double> v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double total = 0.0;
    for (double x : v) total += std::exp(x - mx);
    return mx + std::log(total);
}

} // namespace

double softplus(double x) noexcept { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

MixtureParams decode_mixture(std::span<const double> raw_step, std::size_t components) {
    if (raw_step.size() != kRawPerComponent * components) throw std::invalid_argument("decode_mixture: bad raw width");
    MixtureParams m;
    m.weights.resize(components);
    m.means.resize(components);
    m.scales.resize(components);
    const double lse = log_sum_exp(raw_step.subspan(0, components));
    for (std::size_t c = 0; c < components; ++c) {
        m.weights[c] = std::exp(raw_step[c] - lse);
        m.means[c] = raw_step[components + c];
        m.scales[c] = softplus(raw_step[2 * components + c]) + kScaleFloor;
    }
    return m;
}

std::vector<MixtureParams> decode_patch(std::span<const double> raw_row, std::size_t patch_size,
                                        std::size_t components) {
    const std::size_t stride = kRawPerComponent * components;
    if (raw_row.size() != patch_size * stride) throw std::invalid_argument("decode_patch: bad raw width");
    std::vector<MixtureParams> out;
    out.reserve(patch_size);
    for (std::size_t p = 0; p < patch_size; ++p) out.push_back(decode_mixture(raw_row.subspan(p * stride, stride), components));
    return out;
}

double mixture_log_prob(const MixtureParams& params, double x) {
    const std::size_t c_count = params.components();
    if (c_count == 0) throw std::invalid_argument("mixture has no components");
    std::vector<double> terms(c_count);
    for (std::size_t c = 0; c < c_count; ++c) {
        const double z = (x - params.means[c]) / params.scales[c];
        terms[c] = std::log(params.weights[c]) - 0.5 * z * z - std::log(params.scales[c]) - kHalfLog2Pi;
    }
    return log_sum_exp(terms);
}

double mixture_mean(const MixtureParams& params) {
    double m = 0.0;
    for (std::size_t c = 0; c < params.components(); ++c) m += params.weights[c] * params.means[c];
    return m;
}

double mixture_variance(const MixtureParams& params) {
    const double mu = mixture_mean(params);
    double v = 0.0;
    for (std::size_t c = 0; c < params.components(); ++c) {
        const double d = params.means[c] - mu;
        v += params.weights[c] * (params.scales[c] * params.scales[c] + d * d);
    }
    return v;
}

double sample_mixture_once(const MixtureParams& params, Rng& rng) {
    const double u = uniform01(rng);
    std::size_t chosen = params.components() - 1;
    double cumulative = 0.0;
    for (std::size_t c = 0; c < params.components(); ++c) {
        cumulative += params.weights[c];
        if (u < cumulative) {
            chosen = c;
            break;
        }
    }
    return params.means[chosen] + params.scales[chosen] * standard_normal(rng);
}

std::vector<double> sample_mixture(const MixtureParams& params, Rng& rng, std::size_t n_samples) {
    if (n_samples == 0) throw std::invalid_argument("sample_mixture needs n_samples >= 1");
    std::vector<double> out(n_samples);
    for (double& v : out) v = sample_mixture_once(params, rng);
    return out;
}

Var mixture_nll(Var raw, const Tensor& targets, const Tensor& mask, std::size_t components) {
    const Tensor& rv = raw.value();
    const std::size_t rows = targets.rows();
    const std::size_t patch = targets.cols();
    const std::size_t stride = kRawPerComponent * components;
    if (rv.rows() != rows || rv.cols() != patch * stride || !mask.same_shape(targets)) {
        throw std::invalid_argument("mixture_nll: head " + shape_string(rv.shape()) + " vs targets " +
                                    shape_string(targets.shape()));
    }
    double count = 0.0;
    for (double m : mask.values()) count += m != 0.0 ? 1.0 : 0.0;
    if (count == 0.0) throw std::invalid_argument("mixture_nll: no loss-eligible positions");

    // Per-entry derivatives of the summed log-likelihood w.r.t. the raw row.
    Tensor dlogp(rv.shape(), 0.0);
    std::vector<double> logw(components), ell(components), sig(components), z(components);
    double total = 0.0;
    for (std::size_t t = 0; t < rows; ++t) {
        auto rrow = rv.row(t);
        auto drow = dlogp.row(t);
        for (std::size_t p = 0; p < patch; ++p) {
            if (mask.at(t, p) == 0.0) continue;
            const double x = targets.at(t, p);
            const auto step = rrow.subspan(p * stride, stride);
            const double lse_w = log_sum_exp(step.subspan(0, components));
            for (std::size_t c = 0; c < components; ++c) {
                logw[c] = step[c] - lse_w;
                sig[c] = softplus(step[2 * components + c]) + kScaleFloor;
                z[c] = (x - step[components + c]) / sig[c];
                ell[c] = logw[c] - 0.5 * z[c] * z[c] - std::log(sig[c]) - kHalfLog2Pi;
            }
            const double lp = log_sum_exp(ell);
            total += lp;
            const std::size_t base = p * stride;
            for (std::size_t c = 0; c < components; ++c) {
                const double gamma = std::exp(ell[c] - lp);
                const double w = std::exp(logw[c]);
                drow[base + c] = gamma - w;
                drow[base + components + c] = gamma * z[c] / sig[c];
                drow[base + 2 * components + c] =
                    gamma * (z[c] * z[c] - 1.0) / sig[c] * sigmoid(step[2 * components + c]);
            }
        }
    }
    const double value = -total / count;
    return raw.graph()->record(Tensor::scalar(value), {raw},
                               [raw, dlogp = std::move(dlogp), count](Graph& g, const Tensor& grad) {
                                   Tensor* gr = g.grad_buffer(raw);
                                   if (!gr) return;
                                   const double f = -grad[0] / count;
                                   gr->matrix() += f * dlogp.matrix();
                               });
}

} // namespace tsmoe
