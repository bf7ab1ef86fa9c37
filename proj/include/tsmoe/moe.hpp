// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsmoe/autodiff.hpp"
#include "tsmoe/params.hpp"

namespace tsmoe {

/// Routing of one token: K experts in descending affinity, their renormalized
/// weights, and the dense softmax over all M affinities.
struct GateDecision {
    std::vector<std::size_t> selected;
    std::vector<double> weights;
    std::vector<double> dense_probs;
};

/// Frozen cluster centroids used as expert affinities for one MoE layer.
struct CentroidSet {
    Tensor centroids; // M x D
    std::string checkpoint_id;
    std::size_t layer = 0;
    std::size_t iterations = 0;
    std::uint64_t seed = 0;

    std::size_t experts() const noexcept { return centroids.rows(); }
};

/// Indices of the k largest values, largest first; equal values keep the lower index first.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

/// TopK + softmax over the selected logits, plus the dense softmax.
GateDecision gate_from_logits(std::span<const double> logits, std::size_t k);

/// Affinities token . W_g with W_g of shape D x M.
GateDecision linear_gate(std::span<const double> token, const Tensor& gate_weights, std::size_t k);

/// Affinities are negated Euclidean distances, so nearer centroids rank higher.
GateDecision cluster_gate(std::span<const double> token, const CentroidSet& centroids, std::size_t k);

/// M * sum_i D_i * P_i with D_i the top-1 share and P_i the mean dense probability.
double load_balance_loss(const std::vector<GateDecision>& decisions, std::size_t n_experts);

// ---------------------------------------------------------------------------
// Differentiable routing

struct RoutedWeights {
    Var weights; // T x M, zero outside each row's selection
    std::vector<std::vector<std::size_t>> selected;
};

/// Row-wise TopK followed by softmax over the kept logits. The selection is a
/// constant during backward; only the kept logits receive gradient.
RoutedWeights topk_softmax(Var logits, std::size_t k);

/// -||x_t - c_m|| for every token and centroid; centroids receive no gradient.
Var negative_distances(Var tokens, const Tensor& centroids);

/// out[r] = sum over evaluated experts e of weights[r, expert_ids[e]] * expert_outputs[e][k]
/// where rows[e][k] == r. Rows an expert did not receive get nothing from it.
Var moe_combine(Var weights, const std::vector<std::size_t>& expert_ids, const std::vector<Var>& expert_outputs,
                const std::vector<std::vector<std::size_t>>& rows);

/// Differentiable load-balancing loss over the valid rows of dense_probs (T x M).
/// The top-1 shares are constants; gradient flows through the mean probabilities.
Var load_balance(Var dense_probs, const std::vector<char>& token_valid);

/// Two-layer GELU feed-forward network, D -> hidden -> D.
Var expert_ffn(Var x, Var w1, Var b1, Var w2, Var b2);

enum class GateKind { Linear, LinearBalance, Cluster };

std::string to_string(GateKind kind);
GateKind gate_kind_from_string(const std::string& name);

struct MoeLayerOutput {
    Var output;
    RoutedWeights routed;
    Var dense_probs;
    Var balance_loss;
};

/// Sparse MoE layer: the gate reads `gate_input`, the selected experts read
/// `expert_input` (the normalized residual). Experts with no routed tokens are
/// not evaluated and receive no gradient.
MoeLayerOutput moe_forward(const ParamVars& params, const std::string& prefix, Var gate_input, Var expert_input,
                           std::size_t n_experts, std::size_t top_k, GateKind gate, const CentroidSet* centroids,
                           const std::vector<char>& token_valid);

// ---------------------------------------------------------------------------
// Centroid fitting

struct KMeansOptions {
    std::size_t n_clusters = 8;
    std::size_t iterations = 100;
    std::size_t batch_size = 256;
    std::uint64_t seed = 0;
};

/// k-means++ seeding on the first buffer of vectors, then mini-batch Lloyd
/// updates with per-centroid 1/count learning rates. Rows of `vectors` are samples.
CentroidSet fit_centroids(const Tensor& vectors, const KMeansOptions& options);

/// Sum of squared distances from each row to its nearest centroid.
double kmeans_inertia(const Tensor& vectors, const Tensor& centroids);

} // namespace tsmoe
