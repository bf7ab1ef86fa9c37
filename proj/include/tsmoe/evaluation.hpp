// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsmoe/data.hpp"
#include "tsmoe/tensor.hpp"

namespace tsmoe {

/// Repeats the last full season: forecast[t] = context[T - s + (t mod s)].
std::vector<double> seasonal_naive(std::span<const double> context, std::size_t season, std::size_t horizon);

double mean_absolute_error(std::span<const double> forecast, std::span<const double> actual);

/// A metric value or the reason it could not be computed.
struct MetricValue {
    double value = 0.0;
    std::optional<std::string> skipped;
    bool ok() const noexcept { return !skipped.has_value(); }
};

/// MAE of the forecast scaled by the in-sample MAE of the lag-s naive forecast.
/// A zero denominator is reported as skipped ("zero scale").
MetricValue mase(std::span<const double> forecast, std::span<const double> actual, std::span<const double> insample,
                 std::size_t season);

/// Energy form: mean |x_i - y| - mean over pairs |x_i - x_j| / 2.
double crps_empirical(std::span<const double> samples, double actual);

/// CRPS averaged over the horizon; `samples` is n x h.
double crps_mean(const Tensor& samples, std::span<const double> actual);

/// exp(mean ln(metric / naive)); throws std::invalid_argument on non-positive inputs.
double aggregate_geomean(std::span<const double> metric, std::span<const double> naive);

struct EvalDataset {
    std::string name;
    std::vector<TimeSeriesRecord> records;
    std::size_t season = 1;
};

struct Protocol {
    std::size_t horizon = 16;
    std::size_t windows = 3;
    std::size_t context_length = 128; // values of history fed to the forecaster; 0 = all
    std::size_t n_samples = 100;
    std::uint64_t seed = 0;
};

/// Produces n x h sample paths (n = 1 for point forecasters) from the frozen context.
using Forecaster = std::function<Tensor(std::span<const double> context, std::size_t horizon, std::uint64_t seed)>;

/// Deterministic seasonal-naive forecaster with the given season.
Forecaster seasonal_naive_forecaster(std::size_t season);

struct SeriesMetrics {
    std::string dataset;
    std::string id;
    std::size_t windows = 0;
    double mae = 0.0;
    double crps = 0.0;
    MetricValue mase;
    std::optional<std::string> skipped;
};

struct DatasetMetrics {
    std::string name;
    std::size_t season = 1;
    std::size_t series = 0;
    std::size_t skipped = 0;
    double mae = 0.0;
    double crps = 0.0;
    MetricValue mase;
    double naive_mae = 0.0;
    double naive_crps = 0.0;
    MetricValue naive_mase;
};

struct Aggregate {
    double mae_vs_naive = 0.0;
    double crps_vs_naive = 0.0;
    MetricValue mase_vs_naive;
};

struct EvalReport {
    std::string model_name;
    Protocol protocol;
    std::vector<SeriesMetrics> series;
    std::vector<SeriesMetrics> naive_series;
    std::vector<DatasetMetrics> datasets;
    Aggregate aggregate;

    std::string to_json() const;
    std::string to_table() const;
};

/// Origins of the `windows` non-overlapping windows at the tail of a length-T series.
std::vector<std::size_t> rolling_origins(std::size_t length, std::size_t horizon, std::size_t windows);

/// Runs the forecaster and seasonal naive under the same rolling-window protocol.
/// Series too short for the protocol are skipped with a reason.
EvalReport run_benchmark(const Forecaster& forecaster, const std::string& model_name,
                         const std::vector<EvalDataset>& datasets, const Protocol& protocol);

} // namespace tsmoe
