// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "tsmoe/data.hpp"
#include "tsmoe/model.hpp"
#include "tsmoe/rng.hpp"

namespace tsmoe {

struct TrainConfig {
    std::size_t steps = 3000;
    std::size_t batch_size = 32;
    std::size_t context_patches = 8;
    std::size_t warmup_steps = 300;
    std::size_t log_interval = 50;
    std::size_t checkpoint_interval = 0; // 0 disables periodic checkpoints
    double lr_max = 1e-3;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    double lambda_balance = 0.01;
    double grad_clip = 1.0; // global-norm clipping; 0 disables
    double masking_ratio = 0.3;
    NormalizerKind normalizer = NormalizerKind::MeanStd;
    std::uint64_t seed = 0;
    ModelConfig model;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

/// Linear warmup to lr_max, then cosine annealing to zero at `total`.
double lr_schedule(std::size_t step, double lr_max, std::size_t warmup, std::size_t total);

struct AdamState {
    ParamStore m;
    ParamStore v;
    std::size_t step = 0;
};

struct AdamWOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

/// One bias-corrected AdamW update with decoupled decay (lr * decay * param).
/// Norm gains and biases are not decayed. Increments state.step.
void adamw_step(ParamStore& params, const GradientMap& grads, AdamState& state, const AdamWOptions& options);

/// Scales all gradients so their global L2 norm is at most max_norm. Returns the norm before clipping.
double clip_gradient_norm(GradientMap& grads, double max_norm);

/// Mean mixture NLL over the loss-eligible (patch, step) entries.
Var prediction_loss(Var head, const LossTargets& targets, std::size_t components);

/// pred + lambda * mean of the per-layer balancing losses.
Var total_loss(Var pred, const std::vector<Var>& balance_losses, double lambda);

/// The balancing weight actually applied for a gate kind: only linear+balance uses it.
double effective_lambda(const TrainConfig& config);

struct StepMetrics {
    std::size_t step = 0;
    double pred_loss = 0.0;
    double balance_loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

struct TrainState {
    TrainConfig config;
    Model model;
    AdamState optimizer;
    Rng rng;
    std::size_t step = 0;
    std::vector<std::size_t> order; // current epoch permutation of record indices
    std::size_t cursor = 0;
};

struct TrainHooks {
    std::function<void(const StepMetrics&)> on_log;
    std::function<void(const TrainState&)> on_checkpoint;
};

struct TrainResult {
    TrainState state;
    std::vector<StepMetrics> history; // every step
};

/// Fresh state: initialized model (with centroids attached for the cluster gate) and empty optimizer.
TrainState init_train_state(const TrainConfig& config, const std::map<std::size_t, CentroidSet>& centroids = {});

/// Records long enough to train on (at least two patches).
std::vector<TimeSeriesRecord> training_records(const std::vector<TimeSeriesRecord>& records, std::size_t patch_size);

/// Loss of one batch under the current parameters, without updating anything.
struct BatchLoss {
    double pred_loss = 0.0;
    double balance_loss = 0.0;
};
BatchLoss evaluate_batch(const Model& model, const Batch& batch);

/// Runs one optimization step on the given batch.
StepMetrics train_step(TrainState& state, const Batch& batch);

/// Draws the next batch of records (epoch permutation, reshuffled on exhaustion).
Batch next_batch(TrainState& state, const std::vector<TimeSeriesRecord>& records);

/// Full training loop. Throws NumericalError naming the step on a non-finite loss.
TrainResult train(const TrainConfig& config, const std::vector<TimeSeriesRecord>& records,
                  const std::map<std::size_t, CentroidSet>& centroids = {}, const TrainHooks& hooks = {});

/// Continues a loop from a restored state until state.config.steps.
TrainResult resume_training(TrainState state, const std::vector<TimeSeriesRecord>& records,
                            const TrainHooks& hooks = {});

} // namespace tsmoe
