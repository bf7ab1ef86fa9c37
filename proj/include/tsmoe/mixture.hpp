// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tsmoe/autodiff.hpp"
#include "tsmoe/rng.hpp"

namespace tsmoe {

inline constexpr double kScaleFloor = 1e-4;

/// Gaussian mixture for one predicted time step.
struct MixtureParams {
    std::vector<double> weights;
    std::vector<double> means;
    std::vector<double> scales;

    std::size_t components() const noexcept { return weights.size(); }
};

double softplus(double x) noexcept;

/// Raw head layout per time step: C weight logits, C means, C pre-softplus scales.
inline constexpr std::size_t kRawPerComponent = 3;

MixtureParams decode_mixture(std::span<const double> raw_step, std::size_t components);
/// All steps of one predicted patch from one head output row.
std::vector<MixtureParams> decode_patch(std::span<const double> raw_row, std::size_t patch_size,
                                        std::size_t components);

/// log sum_c w_c N(x; mean_c, scale_c), evaluated with log-sum-exp.
double mixture_log_prob(const MixtureParams& params, double x);
double mixture_mean(const MixtureParams& params);
double mixture_variance(const MixtureParams& params);

/// Ancestral sampling: component from the weights, then a Gaussian draw.
std::vector<double> sample_mixture(const MixtureParams& params, Rng& rng, std::size_t n_samples);
double sample_mixture_once(const MixtureParams& params, Rng& rng);

/// Mean negative log-likelihood over the entries where `mask` is nonzero.
/// `raw` is T x (P * 3C), `targets` and `mask` are T x P.
Var mixture_nll(Var raw, const Tensor& targets, const Tensor& mask, std::size_t components);

} // namespace tsmoe
