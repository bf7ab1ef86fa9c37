// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tsmoe/attention.hpp"
#include "tsmoe/data.hpp"
#include "tsmoe/moe.hpp"
#include "tsmoe/params.hpp"

namespace tsmoe {

enum class FfnKind { MoE, Dense };
enum class Objective { DecoderOnly, MaskedEncoder };

std::string to_string(FfnKind kind);
std::string to_string(Objective objective);
FfnKind ffn_kind_from_string(const std::string& name);
Objective objective_from_string(const std::string& name);

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t d_model = 64;
    std::size_t d_ff = 96;
    std::size_t n_heads = 4;
    std::size_t n_experts = 8;
    std::size_t top_k = 2;
    std::size_t patch_size = 16;
    std::size_t mixture_components = 3;
    GateKind gate_kind = GateKind::LinearBalance;
    FfnKind ffn = FfnKind::MoE;
    Objective objective = Objective::DecoderOnly;
    bool final_norm = true;
    double rope_base = 10000.0;

    /// Throws ConfigError on violated invariants.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct Model {
    ModelConfig config;
    ParamStore params;
    /// Frozen centroids per MoE layer; only used by the cluster gate.
    std::map<std::size_t, CentroidSet> centroids;

    const CentroidSet* centroids_for(std::size_t layer) const;
};

/// Randomly initialized model. Each tensor draws from its own stream keyed by
/// name, and expert 0 shares its stream with the dense FFN of the same layer.
Model init_model(const ModelConfig& config, std::uint64_t seed);

/// Every trainable tensor name a config declares, in name order.
std::vector<std::string> expected_parameter_names(const ModelConfig& config);

/// LN gains and biases; excluded from weight decay.
bool is_norm_parameter(const std::string& name);

struct ParameterCounts {
    std::size_t total = 0;     // every trainable parameter
    std::size_t activated = 0; // parameters touched by one token (K experts instead of M)
    std::size_t frozen = 0;    // centroids of cluster gates
};

/// Closed-form count from the config alone.
ParameterCounts count_parameters(const ModelConfig& config);

/// Token sequence fed to the network; segments are independent sequences.
struct ModelInput {
    std::size_t patch_size = 0;
    Tensor features;                          // T x 2P: values, then pad mask as 0/1
    std::vector<double> time_index;           // T
    std::vector<int> variate_id;              // T
    std::vector<std::size_t> segment_offsets; // segments + 1
    std::vector<char> token_valid;            // patch contains real data
    std::vector<std::size_t> masked_rows;     // masked-encoder: rows replaced by the mask embedding

    std::size_t tokens() const noexcept { return time_index.size(); }
};

/// One segment per sequence, time index = patch position.
ModelInput make_input(const std::vector<PatchedSequence>& sequences, Objective objective = Objective::DecoderOnly);

/// Variates of one multivariate series flattened into a single segment,
/// variate-major, right-aligned in time.
ModelInput make_multivariate_input(const std::vector<PatchedSequence>& variates);

/// Row of the token whose output scores `target` under the decoder-only objective.
struct LossTargets {
    Tensor targets; // T x P
    Tensor mask;    // T x P, 1 where the entry contributes
};

/// Decoder-only: row t is scored against patch t+1 when loss_mask[t]. Masked
/// encoder: the masked final patch is scored against itself.
LossTargets make_loss_targets(const std::vector<PatchedSequence>& sequences, Objective objective);

struct ForwardResult {
    Var embeddings;                  // after the input projection
    std::vector<Var> pre_moe;        // residual stream after attention, per layer
    std::vector<Var> layer_outputs;  // residual stream after each block
    Var head;                        // T x (P * 3C) raw mixture parameters
    std::vector<RoutedWeights> routing;
    std::vector<Var> dense_probs;
    std::vector<Var> balance_losses; // one per MoE layer
};

Var input_projection(const ParamVars& params, Var features);

Var causal_self_attention(const ParamVars& params, const std::string& prefix, Var x,
                          std::shared_ptr<const AttentionLayout> layout, const std::vector<double>& positions,
                          std::size_t n_heads, double rope_base);

ForwardResult forward(Graph& graph, const ParamVars& params, const Model& model, const ModelInput& input);

/// Forward pass with parameters bound as constants (no gradient bookkeeping needed by callers).
ForwardResult forward_inference(Graph& graph, const Model& model, const ModelInput& input);

/// Residual stream entering the gate of MoE layer `layer` for every loss-eligible
/// token of the sequences, in sequence then position order. Rows are D-vectors.
Tensor collect_representations(const Model& model, const std::vector<PatchedSequence>& sequences, std::size_t layer);

} // namespace tsmoe
