// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tsmoe/data.hpp"
#include "tsmoe/model.hpp"

namespace tsmoe {

struct ForecastOptions {
    std::size_t horizon = 16;
    std::size_t n_samples = 100;
    std::uint64_t seed = 0;
    std::vector<double> quantile_levels = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    NormalizerKind normalizer = NormalizerKind::MeanStd;
    std::size_t max_context_patches = 0; // 0 keeps the whole context
};

struct QuantileSummary {
    std::map<double, std::vector<double>> quantiles; // level -> horizon vector
    std::vector<double> point;                        // median
};

struct ForecastResult {
    std::string series_id;
    Tensor samples; // n_samples x horizon, original units
    std::map<double, std::vector<double>> quantiles;
    std::vector<double> point;
    Normalizer normalizer;
    std::size_t patches_consumed = 0;
    std::size_t autoregressive_steps = 0; // per path
    std::size_t forward_passes = 0;
};

/// Empirical quantiles per step by linear interpolation of order statistics
/// (position (n - 1) * level); the point forecast is the median.
QuantileSummary summarize(const Tensor& samples, const std::vector<double>& levels);

/// Samples `n` paths autoregressively: each path feeds its own sampled patches
/// back as context. Path i draws from its own stream derived from (seed, i).
ForecastResult forecast(const Model& model, std::span<const double> context, const ForecastOptions& options,
                        const std::string& series_id = "");

/// One JSON object per line: {id, horizon, point, quantiles}.
void write_forecasts_jsonl(const std::vector<ForecastResult>& results, const std::filesystem::path& path);

} // namespace tsmoe
