// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "tsmoe/config.hpp"
#include "tsmoe/evaluation.hpp"
#include "tsmoe/training.hpp"

namespace tsmoe {

struct FitGateOptions {
    std::string checkpoint; // source model, recorded in the centroid file
    std::vector<std::size_t> layers; // empty = every layer
    std::size_t n_clusters = 8;
    std::size_t iterations = 100;
    std::size_t batch_size = 256;
};

struct ForecastRunOptions {
    std::size_t horizon = 16;
    std::size_t n_samples = 100;
    std::size_t context_length = 128;
    std::vector<double> quantiles = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    bool write_samples = false;
};

struct AnalysisOptions {
    std::vector<std::string> stages = {"input-projection"};
    std::string mass = "weight";
    std::size_t max_patches = 0; // 0 = whole series
    std::map<std::string, std::size_t> seasons; // freq tag -> season for the periodicity probe
};

struct SweepOptions {
    std::string axis;
    std::vector<Json> values;
};

/// Every setting a command can read. Unset blocks take their defaults and the
/// resolved result is written next to the outputs.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "runs/default";
    std::size_t threads = 1;
    std::string checkpoint; // model to load (fit-gate, forecast, eval, analyze)
    std::string centroids;  // centroid file for cluster-gate training
    TrainConfig train;
    DataSource data;
    EvalDatasetSpec eval;
    Protocol protocol;
    FitGateOptions fit_gate;
    ForecastRunOptions forecast;
    AnalysisOptions analysis;
    SweepOptions sweep;
};

/// Desk defaults: the small-desk model on the default synthetic corpus with a
/// 48-value held-out tail.
RunConfig default_run_config();

/// Parses a run configuration; the global seed, when present, overrides the
/// seeds of training, protocol and k-means.
RunConfig run_config_from_json(const Json& j, RunConfig base = default_run_config());
Json to_json(const RunConfig& c);

/// Each command creates `out`, writes resolved_config.json there and its own outputs.
void cmd_train(const RunConfig& c);
void cmd_fit_gate(const RunConfig& c);
void cmd_forecast(const RunConfig& c);
void cmd_eval(const RunConfig& c);
void cmd_analyze(const RunConfig& c);
void cmd_sweep(const RunConfig& c);

/// k-means centroids per layer from the representations `model` produces on
/// context windows of `records`; `options.checkpoint` is recorded as the source.
std::map<std::size_t, CentroidSet> fit_gate_centroids(const Model& model, const std::vector<TimeSeriesRecord>& records,
                                                      const TrainConfig& train, const FitGateOptions& options,
                                                      std::uint64_t seed, std::ostream* log = nullptr);

/// Forecaster wrapping a model for run_benchmark.
Forecaster model_forecaster(const Model& model, std::size_t n_samples);

/// Writes the metrics log (step, pred_loss, balance_loss, lr, wall_ms).
void write_metrics_csv(const std::vector<StepMetrics>& rows, const std::string& path);

/// Exit code contract: 0 ok, 2 configuration, 3 numerical, 4 I/O, 1 anything else.
int exit_code_for_current_exception() noexcept;

} // namespace tsmoe
