// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/training.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "tsmoe/errors.hpp"
#include "tsmoe/mixture.hpp"
#include "tsmoe/ops.hpp"

namespace tsmoe {

void TrainConfig::validate() const {
    model.validate();
    if (steps == 0) throw ConfigError("steps must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (context_patches < 2) throw ConfigError("context_patches must be at least 2");
    if (warmup_steps >= steps) throw ConfigError("warmup_steps must be smaller than steps");
    if (!(lr_max > 0.0)) throw ConfigError("lr_max must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (lambda_balance < 0.0) throw ConfigError("lambda_balance must be non-negative");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
    if (!(masking_ratio > 0.0 && masking_ratio < 1.0)) throw ConfigError("masking_ratio must lie in (0, 1)");
}

double lr_schedule(std::size_t step, double lr_max, std::size_t warmup, std::size_t total) {
    if (step >= total) return 0.0;
    if (step < warmup) return lr_max * double(step) / double(warmup);
    const double span = double(total - warmup);
    const double progress = double(step - warmup) / span;
    return 0.5 * lr_max * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(ParamStore& params, const GradientMap& grads, AdamState& state, const AdamWOptions& o) {
    state.step += 1;
    const double c1 = 1.0 - std::pow(o.beta1, double(state.step));
    const double c2 = 1.0 - std::pow(o.beta2, double(state.step));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (g.shape() != p.shape()) throw std::invalid_argument("adamw_step: gradient shape mismatch for " + name);
        auto [mit, m_new] = state.m.try_emplace(name, Tensor(p.shape(), 0.0));
        auto [vit, v_new] = state.v.try_emplace(name, Tensor(p.shape(), 0.0));
        double* m = mit->second.data();
        double* v = vit->second.data();
        double* w = p.data();
        const double* gd = g.data();
        const double decay = is_norm_parameter(name) ? 0.0 : o.lr * o.weight_decay;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gd[i];
            v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gd[i] * gd[i];
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            w[i] -= decay * w[i];
            w[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
        }
    }
}

double clip_gradient_norm(GradientMap& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        for (double v : g.values()) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double factor = max_norm / norm;
        for (auto& [name, g] : grads) {
            for (double& v : g.values()) v *= factor;
        }
    }
    return norm;
}

Var prediction_loss(Var head, const LossTargets& targets, std::size_t components) {
    return mixture_nll(head, targets.targets, targets.mask, components);
}

Var total_loss(Var pred, const std::vector<Var>& balance_losses, double lambda) {
    if (balance_losses.empty() || lambda == 0.0) return pred;
    Var acc = balance_losses.front();
    for (std::size_t i = 1; i < balance_losses.size(); ++i) acc = ops::add(acc, balance_losses[i]);
    return ops::add(pred, ops::scale(acc, lambda / double(balance_losses.size())));
}

double effective_lambda(const TrainConfig& config) {
    if (config.model.ffn != FfnKind::MoE || config.model.gate_kind != GateKind::LinearBalance) return 0.0;
    return config.lambda_balance;
}

namespace {

double mean_value(const std::vector<Var>& vars) {
    if (vars.empty()) return 0.0;
    double s = 0.0;
    for (const Var& v : vars) s += v.value().item();
    return s / double(vars.size());
}

void check_cluster_centroids(const Model& model) {
    const ModelConfig& c = model.config;
    if (c.ffn != FfnKind::MoE || c.gate_kind != GateKind::Cluster) return;
    for (std::size_t l = 0; l < c.layers; ++l) {
        const CentroidSet* cs = model.centroids_for(l);
        if (cs == nullptr) {
            throw ConfigError("cluster gate needs centroids for layer " + std::to_string(l) + "; run fit-gate first");
        }
        if (cs->experts() != c.n_experts || cs->centroids.cols() != c.d_model) {
            throw ConfigError("centroids for layer " + std::to_string(l) + " have shape " +
                              shape_string(cs->centroids.shape()) + ", expected [" + std::to_string(c.n_experts) +
                              ", " + std::to_string(c.d_model) + "]");
        }
    }
}

void reshuffle(TrainState& state, std::size_t n) {
    state.order.resize(n);
    std::iota(state.order.begin(), state.order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(state.order[i - 1], state.order[uniform_index(state.rng, i)]);
    state.cursor = 0;
}

} // namespace

TrainState init_train_state(const TrainConfig& config, const std::map<std::size_t, CentroidSet>& centroids) {
    config.validate();
    TrainState state;
    state.config = config;
    state.model = init_model(config.model, config.seed);
    if (config.model.ffn == FfnKind::MoE && config.model.gate_kind == GateKind::Cluster) state.model.centroids = centroids;
    check_cluster_centroids(state.model);
    state.rng = make_rng(config.seed, "sampler");
    return state;
}

std::vector<TimeSeriesRecord> training_records(const std::vector<TimeSeriesRecord>& records, std::size_t patch_size) {
    std::vector<TimeSeriesRecord> out;
    for (const auto& r : records) {
        if (r.values.size() >= 2 * patch_size) out.push_back(r);
    }
    return out;
}

Batch next_batch(TrainState& state, const std::vector<TimeSeriesRecord>& records) {
    if (records.empty()) throw ConfigError("no training records with at least two patches");
    if (state.order.size() != records.size()) reshuffle(state, records.size());
    std::vector<TimeSeriesRecord> chosen;
    chosen.reserve(state.config.batch_size);
    while (chosen.size() < state.config.batch_size) {
        if (state.cursor >= state.order.size()) reshuffle(state, records.size());
        chosen.push_back(records[state.order[state.cursor++]]);
    }
    const TrainConfig& c = state.config;
    return make_batch(chosen, c.context_patches, c.model.patch_size, c.masking_ratio,
                      derive_seed(derive_seed(c.seed, "batch"), state.step), c.normalizer);
}

BatchLoss evaluate_batch(const Model& model, const Batch& batch) {
    Graph graph;
    const ModelInput input = make_input(batch.items, model.config.objective);
    const ForwardResult fr = forward_inference(graph, model, input);
    const LossTargets targets = make_loss_targets(batch.items, model.config.objective);
    BatchLoss out;
    out.pred_loss = prediction_loss(fr.head, targets, model.config.mixture_components).value().item();
    out.balance_loss = mean_value(fr.balance_losses);
    return out;
}

StepMetrics train_step(TrainState& state, const Batch& batch) {
    const auto start = std::chrono::steady_clock::now();
    const TrainConfig& c = state.config;
    check_cluster_centroids(state.model);

    Graph graph;
    const ParamVars vars = bind_parameters(graph, state.model.params);
    const ModelInput input = make_input(batch.items, c.model.objective);
    const ForwardResult fr = forward(graph, vars, state.model, input);
    const LossTargets targets = make_loss_targets(batch.items, c.model.objective);
    Var pred = prediction_loss(fr.head, targets, c.model.mixture_components);
    Var loss = total_loss(pred, fr.balance_losses, effective_lambda(c));

    StepMetrics m;
    m.step = state.step + 1;
    m.pred_loss = pred.value().item();
    m.balance_loss = mean_value(fr.balance_losses);
    if (!std::isfinite(loss.value().item())) {
        throw NumericalError("non-finite loss at step " + std::to_string(m.step));
    }
    GradientMap grads;
    try {
        grads = graph.backward(loss);
    } catch (const NumericalError& e) {
        throw NumericalError("step " + std::to_string(m.step) + ": " + e.what());
    }
    if (c.grad_clip > 0.0) clip_gradient_norm(grads, c.grad_clip);

    m.lr = lr_schedule(m.step, c.lr_max, c.warmup_steps, c.steps);
    const AdamWOptions opts{m.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay};
    adamw_step(state.model.params, grads, state.optimizer, opts);
    for (const auto& [name, p] : state.model.params) {
        if (!p.all_finite()) throw NumericalError("non-finite parameter " + name + " after step " + std::to_string(m.step));
    }
    state.step = m.step;
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return m;
}

TrainResult resume_training(TrainState state, const std::vector<TimeSeriesRecord>& records, const TrainHooks& hooks) {
    const std::vector<TimeSeriesRecord> usable = training_records(records, state.config.model.patch_size);
    if (usable.empty()) throw ConfigError("no training records with at least two patches");
    TrainResult result;
    while (state.step < state.config.steps) {
        const Batch batch = next_batch(state, usable);
        const StepMetrics m = train_step(state, batch);
        result.history.push_back(m);
        const TrainConfig& c = state.config;
        if (hooks.on_log && (c.log_interval == 0 || m.step % c.log_interval == 0 || m.step == c.steps)) hooks.on_log(m);
        if (hooks.on_checkpoint && c.checkpoint_interval > 0 && m.step % c.checkpoint_interval == 0) {
            hooks.on_checkpoint(state);
        }
    }
    result.state = std::move(state);
    return result;
}

TrainResult train(const TrainConfig& config, const std::vector<TimeSeriesRecord>& records,
                  const std::map<std::size_t, CentroidSet>& centroids, const TrainHooks& hooks) {
    return resume_training(init_train_state(config, centroids), records, hooks);
}

} // namespace tsmoe
