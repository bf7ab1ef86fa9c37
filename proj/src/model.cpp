// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tsmoe/errors.hpp"
#include "tsmoe/mixture.hpp"
#include "tsmoe/ops.hpp"
#include "tsmoe/rng.hpp"

namespace tsmoe {

std::string to_string(FfnKind kind) { return kind == FfnKind::MoE ? "moe" : "dense"; }
std::string to_string(Objective objective) {
    return objective == Objective::DecoderOnly ? "decoder-only" : "masked-encoder";
}

FfnKind ffn_kind_from_string(const std::string& name) {
    if (name == "moe") return FfnKind::MoE;
    if (name == "dense") return FfnKind::Dense;
    throw ConfigError("unknown ffn kind: " + name);
}

Objective objective_from_string(const std::string& name) {
    if (name == "decoder-only") return Objective::DecoderOnly;
    if (name == "masked-encoder") return Objective::MaskedEncoder;
    throw ConfigError("unknown objective: " + name);
}

void ModelConfig::validate() const {
    if (layers == 0) throw ConfigError("model needs at least one layer");
    if (d_model == 0 || d_ff == 0 || patch_size == 0) throw ConfigError("model widths must be positive");
    if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if ((d_model / n_heads) % 2 != 0) throw ConfigError("head dimension must be even for rotary encoding");
    if (mixture_components == 0) throw ConfigError("mixture needs at least one component");
    if (ffn == FfnKind::MoE && (top_k == 0 || top_k > n_experts)) throw ConfigError("need 1 <= top_k <= n_experts");
    if (!(rope_base > 1.0)) throw ConfigError("rope_base must exceed 1");
}

const CentroidSet* Model::centroids_for(std::size_t layer) const {
    auto it = centroids.find(layer);
    return it == centroids.end() ? nullptr : &it->second;
}

bool is_norm_parameter(const std::string& name) { return name.find("norm.") != std::string::npos; }

namespace {

struct TensorSpec {
    std::string name;
    Shape shape;
};

std::vector<TensorSpec> tensor_specs(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    const std::size_t p = c.patch_size;
    std::vector<TensorSpec> specs = {
        {"input_proj.in.w", {2 * p, d}},   {"input_proj.in.b", {d}},          {"input_proj.norm.gain", {d}},
        {"input_proj.norm.bias", {d}},     {"input_proj.hidden.w", {d, d}},   {"input_proj.hidden.b", {d}},
        {"input_proj.out.w", {d, d}},      {"input_proj.out.b", {d}},
    };
    auto ffn = [&](const std::string& prefix) {
        specs.push_back({prefix + "w1", {d, c.d_ff}});
        specs.push_back({prefix + "b1", {c.d_ff}});
        specs.push_back({prefix + "w2", {c.d_ff, d}});
        specs.push_back({prefix + "b2", {d}});
    };
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string lp = "layers." + std::to_string(l) + ".";
        specs.push_back({lp + "attn_norm.gain", {d}});
        specs.push_back({lp + "attn_norm.bias", {d}});
        for (const char* w : {"q", "k", "v", "o"}) specs.push_back({lp + "attn." + w, {d, d}});
        specs.push_back({lp + "ffn_norm.gain", {d}});
        specs.push_back({lp + "ffn_norm.bias", {d}});
        if (c.ffn == FfnKind::Dense) {
            ffn(lp + "ffn.");
        } else {
            for (std::size_t e = 0; e < c.n_experts; ++e) ffn(lp + "experts." + std::to_string(e) + ".");
            if (c.gate_kind != GateKind::Cluster) specs.push_back({lp + "gate.w", {d, c.n_experts}});
        }
    }
    if (c.final_norm) {
        specs.push_back({"final_norm.gain", {d}});
        specs.push_back({"final_norm.bias", {d}});
    }
    const std::size_t head_width = p * kRawPerComponent * c.mixture_components;
    specs.push_back({"head.w", {d, head_width}});
    specs.push_back({"head.b", {head_width}});
    if (c.objective == Objective::MaskedEncoder) specs.push_back({"mask_embedding", {d}});
    return specs;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Expert 0 draws from the dense FFN's stream so an M=1 model starts from the dense weights.
std::string init_key(const std::string& name) {
    const std::string marker = ".experts.0.";
    const auto pos = name.find(marker);
    if (pos == std::string::npos) return name;
    return name.substr(0, pos) + ".ffn." + name.substr(pos + marker.size());
}

Tensor init_tensor(const TensorSpec& spec, std::uint64_t seed) {
    Tensor t(spec.shape, 0.0);
    const std::string& n = spec.name;
    if (ends_with(n, ".gain")) {
        t.fill(1.0);
        return t;
    }
    double std_dev = 0.0;
    if (n == "head.w" || n == "mask_embedding") {
        std_dev = 0.02;
    } else if (spec.shape.size() == 2) {
        std_dev = 1.0 / std::sqrt(double(spec.shape[0]));
    }
    if (std_dev == 0.0) return t;
    Rng rng = make_rng(seed, init_key(n));
    for (double& v : t.values()) v = std_dev * standard_normal(rng);
    return t;
}

} // namespace

Model init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model model;
    model.config = config;
    for (const auto& spec : tensor_specs(config)) model.params.emplace(spec.name, init_tensor(spec, seed));
    return model;
}

std::vector<std::string> expected_parameter_names(const ModelConfig& config) {
    std::vector<std::string> names;
    for (const auto& spec : tensor_specs(config)) names.push_back(spec.name);
    std::sort(names.begin(), names.end());
    return names;
}

ParameterCounts count_parameters(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    const std::size_t p = c.patch_size;
    const std::size_t expert = 2 * d * c.d_ff + c.d_ff + d;
    const std::size_t shared_per_layer = 4 * d * d + 4 * d;
    std::size_t shared = 2 * p * d + 2 * d * d + 5 * d;
    shared += c.layers * shared_per_layer;
    if (c.final_norm) shared += 2 * d;
    const std::size_t head_width = p * kRawPerComponent * c.mixture_components;
    shared += d * head_width + head_width;
    if (c.objective == Objective::MaskedEncoder) shared += d;

    ParameterCounts counts;
    if (c.ffn == FfnKind::Dense) {
        counts.total = shared + c.layers * expert;
        counts.activated = counts.total;
        return counts;
    }
    const std::size_t gate = c.gate_kind == GateKind::Cluster ? 0 : d * c.n_experts;
    counts.total = shared + c.layers * (c.n_experts * expert + gate);
    counts.activated = shared + c.layers * (c.top_k * expert + gate);
    counts.frozen = c.gate_kind == GateKind::Cluster ? c.layers * c.n_experts * d : 0;
    return counts;
}

// ---------------------------------------------------------------------------

ModelInput make_input(const std::vector<PatchedSequence>& sequences, Objective objective) {
    if (sequences.empty()) throw std::invalid_argument("make_input: no sequences");
    ModelInput in;
    in.patch_size = sequences.front().patch_size;
    std::size_t total = 0;
    for (const auto& s : sequences) {
        if (s.patch_size != in.patch_size) throw std::invalid_argument("make_input: mixed patch sizes");
        total += s.num_patches;
    }
    const std::size_t p = in.patch_size;
    in.features = Tensor(Shape{total, 2 * p}, 0.0);
    in.segment_offsets.push_back(0);
    std::size_t row = 0;
    for (const auto& s : sequences) {
        std::size_t last_real = s.num_patches;
        for (std::size_t t = 0; t < s.num_patches; ++t, ++row) {
            auto f = in.features.row(row);
            for (std::size_t j = 0; j < p; ++j) {
                f[j] = s.value(t, j);
                f[p + j] = s.real(t, j) ? 1.0 : 0.0;
            }
            in.time_index.push_back(double(t));
            in.variate_id.push_back(0);
            const bool has_data = s.patch_has_data(t);
            in.token_valid.push_back(has_data ? 1 : 0);
            if (has_data) last_real = row;
        }
        if (objective == Objective::MaskedEncoder && last_real != s.num_patches) in.masked_rows.push_back(last_real);
        in.segment_offsets.push_back(row);
    }
    return in;
}

ModelInput make_multivariate_input(const std::vector<PatchedSequence>& variates) {
    if (variates.empty()) throw std::invalid_argument("make_multivariate_input: no variates");
    std::size_t longest = 0;
    for (const auto& v : variates) longest = std::max(longest, v.num_patches);
    ModelInput in = make_input(variates);
    std::size_t row = 0;
    for (std::size_t v = 0; v < variates.size(); ++v) {
        const std::size_t shift = longest - variates[v].num_patches;
        for (std::size_t t = 0; t < variates[v].num_patches; ++t, ++row) {
            in.time_index[row] = double(t + shift);
            in.variate_id[row] = int(v);
        }
    }
    in.segment_offsets = {0, row};
    return in;
}

LossTargets make_loss_targets(const std::vector<PatchedSequence>& sequences, Objective objective) {
    std::size_t total = 0;
    for (const auto& s : sequences) total += s.num_patches;
    const std::size_t p = sequences.empty() ? 0 : sequences.front().patch_size;
    LossTargets lt{Tensor(Shape{total, p}, 0.0), Tensor(Shape{total, p}, 0.0)};
    std::size_t base = 0;
    for (const auto& s : sequences) {
        if (objective == Objective::DecoderOnly) {
            for (std::size_t t = 0; t + 1 < s.num_patches; ++t) {
                if (!s.loss_mask[t]) continue;
                for (std::size_t j = 0; j < p; ++j) {
                    lt.targets.at(base + t, j) = s.value(t + 1, j);
                    lt.mask.at(base + t, j) = s.real(t + 1, j) ? 1.0 : 0.0;
                }
            }
        } else {
            std::size_t last = s.num_patches;
            for (std::size_t t = 0; t < s.num_patches; ++t) {
                if (s.patch_has_data(t)) last = t;
            }
            if (last != s.num_patches && last >= s.n_mask) {
                for (std::size_t j = 0; j < p; ++j) {
                    lt.targets.at(base + last, j) = s.value(last, j);
                    lt.mask.at(base + last, j) = s.real(last, j) ? 1.0 : 0.0;
                }
            }
        }
        base += s.num_patches;
    }
    return lt;
}

// ---------------------------------------------------------------------------

Var input_projection(const ParamVars& p, Var features) {
    using namespace ops;
    Var h0 = add_bias(matmul(features, p.at("input_proj.in.w")), p.at("input_proj.in.b"));
    Var normed = layer_norm(h0, p.at("input_proj.norm.gain"), p.at("input_proj.norm.bias"));
    Var hidden = gelu(add_bias(matmul(normed, p.at("input_proj.hidden.w")), p.at("input_proj.hidden.b")));
    return add(h0, add_bias(matmul(hidden, p.at("input_proj.out.w")), p.at("input_proj.out.b")));
}

Var causal_self_attention(const ParamVars& p, const std::string& prefix, Var x,
                          std::shared_ptr<const AttentionLayout> layout, const std::vector<double>& positions,
                          std::size_t n_heads, double rope_base) {
    using namespace ops;
    Var q = rotary(matmul(x, p.at(prefix + "q")), positions, n_heads, rope_base);
    Var k = rotary(matmul(x, p.at(prefix + "k")), positions, n_heads, rope_base);
    Var v = matmul(x, p.at(prefix + "v"));
    return matmul(multi_head_attention(q, k, v, std::move(layout), n_heads), p.at(prefix + "o"));
}

ForwardResult forward(Graph& graph, const ParamVars& p, const Model& model, const ModelInput& input) {
    using namespace ops;
    const ModelConfig& c = model.config;
    if (input.patch_size != c.patch_size) throw ConfigError("input patch size does not match the model");

    auto layout = std::make_shared<AttentionLayout>();
    layout->segment_offsets = input.segment_offsets;
    layout->time_index = input.time_index;
    layout->key_valid = input.token_valid;
    layout->causal = c.objective == Objective::DecoderOnly;

    ForwardResult out;
    Var x = input_projection(p, graph.constant(input.features));
    if (c.objective == Objective::MaskedEncoder && !input.masked_rows.empty()) {
        x = replace_rows(x, input.masked_rows, p.at("mask_embedding"));
    }
    out.embeddings = x;

    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string lp = "layers." + std::to_string(l) + ".";
        Var normed = layer_norm(x, p.at(lp + "attn_norm.gain"), p.at(lp + "attn_norm.bias"));
        Var attended = causal_self_attention(p, lp + "attn.", normed, layout, input.time_index, c.n_heads, c.rope_base);
        Var residual = add(attended, x);
        out.pre_moe.push_back(residual);
        Var ffn_in = layer_norm(residual, p.at(lp + "ffn_norm.gain"), p.at(lp + "ffn_norm.bias"));
        Var ffn_out;
        if (c.ffn == FfnKind::Dense) {
            ffn_out = expert_ffn(ffn_in, p.at(lp + "ffn.w1"), p.at(lp + "ffn.b1"), p.at(lp + "ffn.w2"),
                                 p.at(lp + "ffn.b2"));
        } else {
            MoeLayerOutput moe = moe_forward(p, lp, residual, ffn_in, c.n_experts, c.top_k, c.gate_kind,
                                             model.centroids_for(l), input.token_valid);
            ffn_out = moe.output;
            out.routing.push_back(std::move(moe.routed));
            out.dense_probs.push_back(moe.dense_probs);
            out.balance_losses.push_back(moe.balance_loss);
        }
        x = add(ffn_out, residual);
        out.layer_outputs.push_back(x);
    }
    if (c.final_norm) x = layer_norm(x, p.at("final_norm.gain"), p.at("final_norm.bias"));
    out.head = add_bias(matmul(x, p.at("head.w")), p.at("head.b"));
    return out;
}

ForwardResult forward_inference(Graph& graph, const Model& model, const ModelInput& input) {
    ParamVars vars;
    for (const auto& [name, value] : model.params) vars.emplace(name, graph.constant(value));
    return forward(graph, vars, model, input);
}

Tensor collect_representations(const Model& model, const std::vector<PatchedSequence>& sequences, std::size_t layer) {
    if (layer >= model.config.layers) {
        throw ConfigError("layer " + std::to_string(layer) + " out of range for a " +
                          std::to_string(model.config.layers) + "-layer model");
    }
    const std::size_t d = model.config.d_model;
    std::vector<double> rows;
    for (const auto& seq : sequences) {
        Graph graph;
        const ForwardResult fr = forward_inference(graph, model, make_input({seq}, model.config.objective));
        const Tensor& rep = fr.pre_moe[layer].value();
        for (std::size_t t = 0; t < seq.num_patches; ++t) {
            if (!seq.loss_mask[t]) continue;
            auto r = rep.row(t);
            rows.insert(rows.end(), r.begin(), r.end());
        }
    }
    const std::size_t n = rows.size() / d;
    return Tensor(Shape{n, d}, std::move(rows));
}

} // namespace tsmoe
