// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion. Exit status is 0 unless a
// check crashes; failing criteria are reported, not hidden.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsmoe/analysis.hpp"
#include "tsmoe/checkpoint.hpp"
#include "tsmoe/commands.hpp"
#include "tsmoe/config.hpp"
#include "tsmoe/evaluation.hpp"
#include "tsmoe/gradcheck.hpp"
#include "tsmoe/mixture.hpp"
#include "tsmoe/model.hpp"
#include "tsmoe/moe.hpp"
#include "tsmoe/ops.hpp"
#include "tsmoe/training.hpp"

using namespace tsmoe;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-6;
constexpr double kGradEps = 1e-5;
constexpr double kGradBudgetSeconds = 120.0;
constexpr double kWeightSumTol = 1e-9;
constexpr double kClosedFormTol = 1e-12;
constexpr double kLogDensityTol = 1e-9;
constexpr double kQuadratureTol = 1e-6;
constexpr double kHistogramTol = 1e-9;
constexpr double kProbeTol = 1e-12;
constexpr double kLossRatio = 0.6;
constexpr double kDeskMaeBound = 0.95;
constexpr double kDenseMargin = 0.03;
constexpr double kGateMargin = 0.02;
constexpr double kDeskBudgetSeconds = 15.0 * 60.0;
constexpr std::size_t kFinalLossWindow = 50;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 6) {
    std::ostringstream s;
    s << std::setprecision(digits) << v;
    return s.str();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = scale * standard_normal(rng);
    return t;
}

ModelConfig grad_config(GateKind gate) {
    ModelConfig c;
    c.layers = 1;
    c.d_model = 8;
    c.d_ff = 6;
    c.n_heads = 2;
    c.n_experts = 3;
    c.top_k = 2;
    c.patch_size = 4;
    c.mixture_components = 2;
    c.gate_kind = gate;
    return c;
}

Model perturbed(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
    Model m = init_model(c, seed);
    Rng rng = make_rng(seed, "perturb");
    for (auto& [name, t] : m.params) {
        for (double& v : t.values()) v += scale * standard_normal(rng);
    }
    return m;
}

ParamStore with_prefix(const ParamStore& all, const std::string& prefix) {
    ParamStore out;
    for (const auto& [name, t] : all) {
        if (name.rfind(prefix, 0) == 0) out.emplace(name, t);
    }
    return out;
}

PatchedSequence random_sequence(std::size_t length, std::size_t patch, Rng& rng) {
    std::vector<double> v(length);
    for (double& x : v) x = standard_normal(rng);
    return causal_normalize(patchify(v, patch), 0.3);
}

// ---------------------------------------------------------------------------

Outcome gradient_integrity() {
    const auto t0 = Clock::now();
    double worst = 0.0, strict = 0.0;
    std::string worst_where;
    std::size_t checks = 0, failed = 0, coords = 0, excluded = 0, unresolved = 0;
    auto record = [&](const std::string& what, const GradCheckReport& r) {
        ++checks;
        coords += r.checked;
        excluded += r.excluded.size();
        unresolved += r.unresolved;
        strict = std::max(strict, r.strict_max_relative_error);
        if (!r.passed()) ++failed;
        if (r.max_relative_error >= worst) {
            worst = r.max_relative_error;
            worst_where = what + " " + r.worst_name;
        }
    };
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Rng rng(seed);
        const std::string s = " seed " + std::to_string(seed);
        const ModelConfig lc = grad_config(GateKind::LinearBalance);
        const Model lm = perturbed(lc, seed);

        const Tensor features = random_tensor({3, 2 * lc.patch_size}, rng);
        const Tensor pw = random_tensor({3, lc.d_model}, rng);
        record("projection" + s,
               gradient_check([&](Graph& g, const ParamVars& v) {
                   return ops::weighted_sum(input_projection(v, g.constant(features)), pw);
               }, with_prefix(lm.params, "input_proj."), kGradEps, kGradTol));

        const Tensor x = random_tensor({5, lc.d_model}, rng);
        const Tensor aw = random_tensor({5, lc.d_model}, rng);
        const std::vector<double> pos{0, 1, 2, 3, 4};
        auto layout = std::make_shared<AttentionLayout>();
        layout->segment_offsets = {0, pos.size()};
        layout->time_index = pos;
        layout->key_valid.assign(pos.size(), 1);
        record("attention" + s, gradient_check([&](Graph& g, const ParamVars& v) {
                   return ops::weighted_sum(
                       causal_self_attention(v, "layers.0.attn.", g.constant(x), layout, pos, lc.n_heads, lc.rope_base), aw);
               }, with_prefix(lm.params, "layers.0.attn."), kGradEps, kGradTol));

        const PatchedSequence s1 = random_sequence(24, lc.patch_size, rng);
        const PatchedSequence s2 = random_sequence(17, lc.patch_size, rng);
        const ModelInput in = make_input({s1, s2});
        for (FfnKind ffn : {FfnKind::Dense, FfnKind::MoE}) {
            ModelConfig bc = lc;
            bc.ffn = ffn;
            const Model bm = perturbed(bc, seed);
            const Tensor bw = random_tensor({in.features.rows(), bc.d_model}, rng);
            record(std::string(ffn == FfnKind::Dense ? "dense" : "moe") + " block" + s,
                   gradient_check([&](Graph& g, const ParamVars& v) {
                       return ops::weighted_sum(forward(g, v, bm, in).layer_outputs[0], bw);
                   }, bm.params, kGradEps, kGradTol));
        }

        ParamStore mp;
        const std::size_t d = 5, hidden = 4, m = 4, t = 9;
        mp["gate.w"] = random_tensor({d, m}, rng);
        for (std::size_t e = 0; e < m; ++e) {
            const std::string ep = "experts." + std::to_string(e) + ".";
            mp[ep + "w1"] = random_tensor({d, hidden}, rng, 0.5);
            mp[ep + "b1"] = random_tensor({hidden}, rng, 0.1);
            mp[ep + "w2"] = random_tensor({hidden, d}, rng, 0.5);
            mp[ep + "b2"] = random_tensor({d}, rng, 0.1);
        }
        CentroidSet cs;
        cs.centroids = random_tensor({m, d}, rng);
        const Tensor xin = random_tensor({t, d}, rng);
        const std::vector<char> valid(t, 1);
        for (GateKind gate : {GateKind::LinearBalance, GateKind::Cluster}) {
            record("moe layer " + to_string(gate) + s, gradient_check([&](Graph& g, const ParamVars& v) {
                       Var xv = g.constant(xin);
                       const auto out = moe_forward(v, "", xv, xv, m, 2, gate, &cs, valid);
                       return ops::add(ops::sum(ops::mul(out.output, out.output)), out.balance_loss);
                   }, mp, kGradEps, kGradTol));
        }

        const std::size_t rows = 5, p = 3, comps = 2;
        Tensor targets = random_tensor({rows, p}, rng);
        Tensor mask(Shape{rows, p}, 1.0);
        mask.at(0, 0) = 0.0;
        mask.at(3, 2) = 0.0;
        const ParamStore hp{{"head", random_tensor({rows, p * comps * kRawPerComponent}, rng)}};
        record("mixture head" + s, gradient_check([&](Graph&, const ParamVars& v) {
                   return mixture_nll(v.at("head"), targets, mask, comps);
               }, hp, kGradEps, kGradTol));

        for (GateKind gate : {GateKind::LinearBalance, GateKind::Cluster}) {
            const ModelConfig fc = grad_config(gate);
            Model fm = perturbed(fc, seed);
            if (gate == GateKind::Cluster) {
                CentroidSet c0;
                c0.centroids = random_tensor({fc.n_experts, fc.d_model}, rng);
                fm.centroids[0] = c0;
            }
            const LossTargets lt = make_loss_targets({s1, s2}, fc.objective);
            record("full loss " + to_string(gate) + s, gradient_check([&](Graph& g, const ParamVars& v) {
                       const ForwardResult fr = forward(g, v, fm, in);
                       return total_loss(prediction_loss(fr.head, lt, fc.mixture_components), fr.balance_losses, 0.01);
                   }, fm.params, kGradEps, kGradTol));
        }
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = failed == 0 && secs < kGradBudgetSeconds;
    o.detail = std::to_string(checks) + " checks, " + std::to_string(coords) + " coordinates, " + std::to_string(failed) +
               " failed; max rel err " + fmt(worst, 4) + " (" + worst_where + "), strict max " + fmt(strict, 3) + " with " +
               std::to_string(unresolved) + " coordinates below finite-difference resolution; " +
               std::to_string(excluded) + " tie coordinates excluded; " + fmt(secs, 3) + " s";
    return o;
}

// Sort-based and nearest-centroid references.
std::vector<std::size_t> oracle_top(const std::vector<double>& score, std::size_t k) {
    std::vector<std::size_t> idx(score.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    idx.resize(k);
    return idx;
}

Outcome routing_oracle() {
    const std::size_t tokens = 10000, m = 32, k = 2, d = 64;
    Rng rng(2024);
    const Tensor w = random_tensor({d, m}, rng);
    CentroidSet cs;
    cs.centroids = random_tensor({m, d}, rng);
    const Tensor x = random_tensor({tokens, d}, rng);

    // Graph-level routing as used inside the model.
    Graph g;
    Var xv = g.constant(x);
    const RoutedWeights lin = topk_softmax(ops::matmul(xv, g.constant(w)), k);
    const RoutedWeights clu = topk_softmax(negative_distances(xv, cs.centroids), k);

    std::size_t mismatches = 0;
    double worst_sum = 0.0;
    for (std::size_t t = 0; t < tokens; ++t) {
        const auto token = x.row(t);
        std::vector<double> logits(m, 0.0), neg(m, 0.0);
        for (std::size_t e = 0; e < m; ++e) {
            double dist = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                logits[e] += token[j] * w.at(j, e);
                const double diff = token[j] - cs.centroids.at(e, j);
                dist += diff * diff;
            }
            neg[e] = -std::sqrt(dist);
        }
        const auto want_l = oracle_top(logits, k);
        const auto want_c = oracle_top(neg, k);
        const GateDecision gl = linear_gate(token, w, k);
        const GateDecision gc = cluster_gate(token, cs, k);
        mismatches += gl.selected != want_l;
        mismatches += gc.selected != want_c;
        mismatches += lin.selected[t] != want_l;
        mismatches += clu.selected[t] != want_c;
        for (const GateDecision* dcs : {&gl, &gc}) {
            worst_sum = std::max(worst_sum, std::abs(std::accumulate(dcs->weights.begin(), dcs->weights.end(), 0.0) - 1.0));
        }
        for (const RoutedWeights* rw : {&lin, &clu}) {
            double s = 0.0;
            for (double v : rw->weights.value().row(t)) s += v;
            worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        }
    }
    Outcome o;
    o.pass = mismatches == 0 && worst_sum <= kWeightSumTol;
    o.detail = std::to_string(tokens) + " tokens, M=32, K=2, both gates, scalar and graph paths: " +
               std::to_string(mismatches) + " selection mismatches; max |sum w - 1| " + fmt(worst_sum, 3);
    return o;
}

GateDecision probs(std::vector<double> p) {
    GateDecision d;
    d.dense_probs = std::move(p);
    return d;
}

Outcome balance_closed_forms() {
    double uniform_worst = 0.0;
    for (std::size_t m : {1u, 2u, 8u, 32u}) {
        std::vector<GateDecision> ds;
        for (std::size_t t = 0; t < m; ++t) {
            GateDecision d = probs(std::vector<double>(m, 1.0 / double(m)));
            d.dense_probs[t] += 0.25 / double(m);
            d.dense_probs[(t + 1) % m] -= 0.25 / double(m);
            ds.push_back(d);
        }
        uniform_worst = std::max(uniform_worst, std::abs(load_balance_loss(ds, m) - 1.0));
    }
    const double a = load_balance_loss({probs({0.6, 0.4}), probs({0.4, 0.6})}, 2);
    const double b = load_balance_loss({probs({0.9, 0.1}), probs({0.9, 0.1})}, 2);
    Outcome o;
    o.pass = uniform_worst <= kClosedFormTol && std::abs(a - 1.0) <= kClosedFormTol && std::abs(b - 1.8) <= kClosedFormTol;
    o.detail = "uniform max |loss - 1| " + fmt(uniform_worst, 3) + "; hand cases " + fmt(a, 17) + " and " + fmt(b, 17);
    return o;
}

TrainConfig desk_train(std::uint64_t seed) {
    RunConfig c = default_run_config();
    c.train.seed = seed;
    return c.train;
}

std::string mapped_name(const std::string& n) {
    const auto pos = n.find(".ffn.");
    return pos == std::string::npos ? n : n.substr(0, pos) + ".experts.0." + n.substr(pos + 5);
}

Outcome dense_equivalence() {
    const RunConfig rc = default_run_config();
    const auto records = load_training_records(rc.data);
    TrainConfig dense = desk_train(0);
    dense.steps = 100;
    dense.warmup_steps = 10;
    dense.model.ffn = FfnKind::Dense;
    TrainConfig moe = dense;
    moe.model.ffn = FfnKind::MoE;
    moe.model.n_experts = 1;
    moe.model.top_k = 1;
    const TrainResult a = train(dense, records);
    const TrainResult b = train(moe, records);
    std::size_t loss_diffs = 0, tensor_diffs = 0;
    for (std::size_t i = 0; i < a.history.size(); ++i) loss_diffs += a.history[i].pred_loss != b.history[i].pred_loss;
    for (const auto& [name, t] : a.state.model.params) {
        auto it = b.state.model.params.find(mapped_name(name));
        tensor_diffs += it == b.state.model.params.end() || !t.identical(it->second);
    }
    // The only extra tensor is the 1-expert gate.
    const std::size_t extra = b.state.model.params.size() - a.state.model.params.size();
    Outcome o;
    o.pass = a.history.size() == 100 && b.history.size() == 100 && loss_diffs == 0 && tensor_diffs == 0;
    o.detail = "100 steps at the desk profile: " + std::to_string(loss_diffs) + " differing losses, " +
               std::to_string(tensor_diffs) + " differing tensors (" + std::to_string(extra) +
               " gate tensors only in the MoE run); final loss " + fmt(a.history.back().pred_loss, 17);
    return o;
}

template <class F>
double simpson(F f, double lo, double hi, std::size_t n) {
    const double h = (hi - lo) / double(n);
    double s = f(lo) + f(hi);
    for (std::size_t i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(lo + h * double(i));
    return s * h / 3.0;
}

Outcome mixture_nll_checks() {
    const MixtureParams stdnorm{{1.0}, {0.0}, {1.0}};
    const double at_zero = mixture_log_prob(stdnorm, 0.0);
    Rng rng(55);
    double worst_mass = 0.0, worst_consistency = 0.0;
    for (int draw = 0; draw < 20; ++draw) {
        const std::size_t comps = 1 + std::size_t(draw % 4);
        std::vector<double> raw(comps * kRawPerComponent);
        for (double& v : raw) v = 1.5 * standard_normal(rng);
        const MixtureParams mp = decode_mixture(raw, comps);
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t c = 0; c < comps; ++c) {
            lo = std::min(lo, mp.means[c] - 40.0 * mp.scales[c]);
            hi = std::max(hi, mp.means[c] + 40.0 * mp.scales[c]);
        }
        const double mass = simpson([&](double y) { return std::exp(mixture_log_prob(mp, y)); }, lo, hi, 400000);
        worst_mass = std::max(worst_mass, std::abs(mass - 1.0));
        // The training loss is the same density.
        for (int k = 0; k < 3; ++k) {
            const double y = lo + (hi - lo) * uniform01(rng);
            Graph g;
            Tensor tgt(Shape{1, 1}, y);
            const double nll = mixture_nll(g.constant(Tensor(Shape{1, raw.size()}, raw)), tgt, Tensor(Shape{1, 1}, 1.0), comps)
                                   .value()
                                   .item();
            worst_consistency = std::max(worst_consistency, std::abs(nll + mixture_log_prob(mp, y)) / std::max(1.0, std::abs(nll)));
        }
    }
    Outcome o;
    // -0.918939 is the six-decimal rounding of -ln(2 pi) / 2; the exact value is held to 1e-9.
    const bool rounds = std::abs(std::round(at_zero * 1e6) / 1e6 - (-0.918939)) < 1e-12;
    o.pass = rounds && std::abs(at_zero + 0.5 * std::log(2.0 * std::numbers::pi)) <= kLogDensityTol &&
             worst_mass <= kQuadratureTol && worst_consistency <= 1e-12;
    o.detail = "log N(0;0,1) = " + fmt(at_zero, 12) + "; 20 draws, max |integral - 1| " + fmt(worst_mass, 3) +
               "; NLL vs density max rel diff " + fmt(worst_consistency, 3);
    return o;
}

Outcome metric_closed_forms() {
    const double c1 = crps_empirical(std::vector<double>{0.0, 2.0}, 1.0);
    double degenerate = 0.0;
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        const double c = 10.0 * standard_normal(rng), y = 10.0 * standard_normal(rng);
        degenerate = std::max(degenerate, std::abs(crps_empirical(std::vector<double>(7, c), y) - std::abs(c - y)));
    }
    const RunConfig rc = default_run_config();
    std::vector<EvalDataset> datasets = build_eval_datasets(rc.eval);
    double self_ratio = 0.0;
    for (const auto& ds : datasets) {
        const EvalReport r = run_benchmark(seasonal_naive_forecaster(ds.season), "naive", {ds}, rc.protocol);
        self_ratio = std::max({self_ratio, std::abs(r.aggregate.mae_vs_naive - 1.0), std::abs(r.aggregate.crps_vs_naive - 1.0)});
    }
    Outcome o;
    o.pass = std::abs(c1 - 0.5) <= kClosedFormTol && degenerate <= kClosedFormTol && self_ratio <= kClosedFormTol;
    o.detail = "CRPS({0,2},1) = " + fmt(c1, 17) + "; degenerate max diff " + fmt(degenerate, 3) +
               "; naive-vs-itself max |aggregate - 1| " + fmt(self_ratio, 3) + " over " + std::to_string(datasets.size()) +
               " datasets";
    return o;
}

Outcome masking_and_causality() {
    ModelConfig c = desk_train(0).model;
    const Model m = perturbed(c, 9, 0.05);
    Rng rng(10);
    PatchedSequence seq = random_sequence(200, c.patch_size, rng);
    const ModelInput in = make_input({seq});
    const LossTargets lt = make_loss_targets({seq}, c.objective);
    Graph g;
    const Tensor head = forward_inference(g, m, in).head.value();
    Tensor doubled = head;
    for (std::size_t t = 0; t < seq.num_patches; ++t) {
        if (seq.loss_mask[t]) continue;
        for (double& v : doubled.row(t)) v *= 2.0;
    }
    auto loss = [&](const Tensor& h) {
        Graph lg;
        return prediction_loss(lg.constant(h), lt, c.mixture_components).value().item();
    };
    const bool masked_ok = loss(head) == loss(doubled) && seq.n_mask > 0;

    std::size_t leaks = 0, probes = 0;
    for (std::size_t t = 0; t < seq.num_patches; ++t) {
        ModelInput pin = in;
        for (std::size_t j = 0; j < c.patch_size; ++j) pin.features.at(t, j) += 1.0 + 0.1 * double(j);
        Graph pg;
        const ForwardResult fr = forward_inference(pg, m, pin);
        const Tensor& h = fr.head.value();
        for (std::size_t r = 0; r < t; ++r) {
            ++probes;
            for (std::size_t j = 0; j < h.cols(); ++j) {
                if (h.at(r, j) != head.at(r, j)) {
                    ++leaks;
                    break;
                }
            }
        }
    }
    Outcome o;
    o.pass = masked_ok && leaks == 0;
    o.detail = std::string("masked-prefix doubling ") + (masked_ok ? "bit-identical" : "CHANGED the loss") + " (" +
               std::to_string(seq.n_mask) + " masked patches); causality: " + std::to_string(leaks) + " of " +
               std::to_string(probes) + " earlier rows changed";
    return o;
}

bool same_doubles(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

Outcome reproducibility_and_formats(const fs::path& work) {
    fs::create_directories(work);
    const RunConfig rc = default_run_config();
    const auto records = load_training_records(rc.data);
    TrainConfig tc = desk_train(4);
    tc.steps = 30;
    tc.warmup_steps = 5;
    const auto bytes_a = encode_checkpoint(checkpoint_from_state(train(tc, records).state));
    const auto bytes_b = encode_checkpoint(checkpoint_from_state(train(tc, records).state));
    const bool same_seed = bytes_a == bytes_b;

    const fs::path p1 = work / "a.moef", p2 = work / "b.moef";
    save_checkpoint(decode_checkpoint(bytes_a), p1);
    save_checkpoint(load_checkpoint(p1), p2);
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    const bool resave = slurp(p1) == slurp(p2) && slurp(p1).size() == bytes_a.size();

    std::vector<TimeSeriesRecord> recs = load_records(rc.data);
    recs.push_back({"edge", "H", {0.1, -0.0, 4.9e-324, 1.7976931348623157e308, -2.5e-310, 1.0 / 3.0}, std::string("grp")});
    recs.push_back({"unicode é \"q\"", "5min", {1.0}, std::nullopt});
    const fs::path jl = work / "data.jsonl";
    save_jsonl(recs, jl);
    const auto back = load_jsonl(jl);
    bool jsonl_ok = back.size() == recs.size();
    for (std::size_t i = 0; jsonl_ok && i < recs.size(); ++i) {
        jsonl_ok = back[i].id == recs[i].id && back[i].freq == recs[i].freq && back[i].variate_group == recs[i].variate_group &&
                   same_doubles(back[i].values, recs[i].values);
    }
    Outcome o;
    o.pass = same_seed && resave && jsonl_ok;
    o.detail = std::string("same-seed checkpoints ") + (same_seed ? "identical" : "DIFFER") + " (" +
               std::to_string(bytes_a.size()) + " bytes); save-load-save " + (resave ? "identical" : "DIFFERS") +
               "; JSON lines " + (jsonl_ok ? "bit-exact" : "NOT preserved") + " over " + std::to_string(recs.size()) + " records";
    return o;
}

Outcome analysis_wellformed() {
    ModelConfig c = desk_train(0).model;
    const Model m = perturbed(c, 12, 0.05);
    SyntheticSpec spec = default_synthetic_spec(0);
    spec.series_per_group = 2;
    spec.length = 256;
    const auto seqs = analysis_sequences(generate_synthetic(spec), c.patch_size, 0.3);
    const RoutingTrace trace = trace_routing(m, seqs);
    double worst_sum = 0.0, min_h = INFINITY, max_h = -INFINITY;
    std::size_t hists = 0;
    for (GroupBy gb : {GroupBy::Layer, GroupBy::LayerFreq, GroupBy::LayerPosition}) {
        for (AllocationMass am : {AllocationMass::Weight, AllocationMass::Top1, AllocationMass::AnyK}) {
            for (const auto& h : allocation_distribution(trace, gb, am)) {
                ++hists;
                worst_sum = std::max(worst_sum, std::abs(std::accumulate(h.mass.begin(), h.mass.end(), 0.0) - 1.0));
                const double e = entropy(h.mass);
                min_h = std::min(min_h, e);
                max_h = std::max(max_h, e);
            }
        }
    }
    RoutingTrace alt;
    alt.n_experts = c.n_experts;
    alt.top_k = 1;
    alt.layers = 1;
    for (std::size_t p = 0; p < 64; ++p) {
        RoutingEntry e;
        e.position = p;
        e.series_id = "alt";
        e.expert = p % 2 ? 5 : 2;
        e.weight = 1.0;
        alt.entries.push_back(e);
    }
    // Lag 1 token at patch size 16 corresponds to a season of 16 values, so use season 32 for lag 2.
    const ProbeResult pr = periodicity_probe(alt, 0, 2 * 16, 16);
    const double ln_m = std::log(double(c.n_experts));
    Outcome o;
    o.pass = worst_sum <= kHistogramTol && min_h >= 0.0 && max_h <= ln_m + kHistogramTol && !pr.skipped &&
             std::abs(pr.autocorrelation - 1.0) <= kProbeTol;
    o.detail = std::to_string(hists) + " histograms from " + std::to_string(trace.entries.size()) +
               " routing entries: max |sum - 1| " + fmt(worst_sum, 3) + ", entropy in [" + fmt(min_h, 4) + ", " +
               fmt(max_h, 4) + "] with ln M = " + fmt(ln_m, 4) + "; period-2 probe r = " + fmt(pr.autocorrelation, 17);
    return o;
}

// ---------------------------------------------------------------------------
// Desk experiments

struct DeskRun {
    std::string label;
    double step0_loss = 0.0;
    double final_loss = 0.0; // mean over the last kFinalLossWindow steps
    double last_loss = 0.0;
    double agg_mae = 0.0;
    double agg_crps = 0.0;
    double agg_mase = 0.0;
    double train_seconds = 0.0;
    double eval_seconds = 0.0;
    std::size_t activated_params = 0;
    Model model;
};

class Desk {
public:
    explicit Desk(std::size_t steps) : steps_(steps), base_(default_run_config()) {
        records_ = load_training_records(base_.data);
        datasets_ = build_eval_datasets(base_.eval);
    }

    const DeskRun& moe(GateKind gate, std::uint64_t seed) {
        const std::string key = "moe-" + to_string(gate) + "-" + std::to_string(seed);
        if (auto it = runs_.find(key); it != runs_.end()) return it->second;
        TrainConfig tc = config(seed);
        tc.model.gate_kind = gate;
        std::map<std::size_t, CentroidSet> centroids;
        if (gate == GateKind::Cluster) {
            FitGateOptions fo = base_.fit_gate;
            fo.n_clusters = tc.model.n_experts;
            fo.checkpoint = "dense-" + std::to_string(seed);
            centroids = fit_gate_centroids(dense(seed).model, records_, tc, fo, seed);
        }
        return runs_.emplace(key, run(key, tc, centroids)).first->second;
    }

    // Dense FFN with d_ff = K * expert width: same activated parameters per token, minus the gate.
    const DeskRun& dense(std::uint64_t seed) {
        const std::string key = "dense-" + std::to_string(seed);
        if (auto it = runs_.find(key); it != runs_.end()) return it->second;
        TrainConfig tc = config(seed);
        tc.model.ffn = FfnKind::Dense;
        tc.model.d_ff = tc.model.top_k * tc.model.d_ff;
        return runs_.emplace(key, run(key, tc, {})).first->second;
    }

    std::size_t steps() const { return steps_; }
    const std::map<std::string, DeskRun>& runs() const { return runs_; }

private:
    TrainConfig config(std::uint64_t seed) const {
        TrainConfig tc = base_.train;
        tc.seed = seed;
        tc.steps = steps_;
        tc.warmup_steps = std::min(tc.warmup_steps, steps_ / 10);
        return tc;
    }

    DeskRun run(const std::string& label, const TrainConfig& tc, const std::map<std::size_t, CentroidSet>& centroids) {
        DeskRun r;
        r.label = label;
        const auto t0 = Clock::now();
        const TrainResult tr = train(tc, records_, centroids);
        r.train_seconds = seconds_since(t0);
        r.step0_loss = tr.history.front().pred_loss;
        r.last_loss = tr.history.back().pred_loss;
        const std::size_t w = std::min(kFinalLossWindow, tr.history.size());
        for (std::size_t i = tr.history.size() - w; i < tr.history.size(); ++i) r.final_loss += tr.history[i].pred_loss / double(w);
        r.model = tr.state.model;
        r.activated_params = count_parameters(tc.model).activated;
        Protocol proto = base_.protocol;
        proto.seed = tc.seed;
        const auto t1 = Clock::now();
        const EvalReport rep = run_benchmark(model_forecaster(r.model, proto.n_samples), label, datasets_, proto);
        r.eval_seconds = seconds_since(t1);
        r.agg_mae = rep.aggregate.mae_vs_naive;
        r.agg_crps = rep.aggregate.crps_vs_naive;
        r.agg_mase = rep.aggregate.mase_vs_naive.ok() ? rep.aggregate.mase_vs_naive.value : NAN;
        std::cerr << "  [desk] " << label << ": step-0 loss " << fmt(r.step0_loss, 5) << ", final " << fmt(r.final_loss, 5)
                  << ", agg MAE " << fmt(r.agg_mae, 4) << ", CRPS " << fmt(r.agg_crps, 4) << ", train "
                  << fmt(r.train_seconds, 3) << " s, eval " << fmt(r.eval_seconds, 3) << " s\n";
        return r;
    }

    std::size_t steps_;
    RunConfig base_;
    std::vector<TimeSeriesRecord> records_;
    std::vector<EvalDataset> datasets_;
    std::map<std::string, DeskRun> runs_;
};

Outcome desk_training(Desk& desk) {
    const DeskRun& m = desk.moe(GateKind::LinearBalance, 0);
    const DeskRun& d = desk.dense(0);
    const double ratio = m.final_loss / m.step0_loss;
    const double secs = m.train_seconds + m.eval_seconds;
    const bool a = ratio < kLossRatio;
    const bool b = m.agg_mae < kDeskMaeBound;
    const bool c = m.agg_mae <= d.agg_mae + kDenseMargin;
    Outcome o;
    o.pass = a && b && c && secs < kDeskBudgetSeconds && desk.steps() == 3000;
    o.detail = std::to_string(desk.steps()) + " steps in " + fmt(secs, 4) + " s; (a) final/step-0 loss " + fmt(m.final_loss, 5) +
               "/" + fmt(m.step0_loss, 5) + " = " + fmt(ratio, 4) + (a ? " ok" : " FAIL") + "; (b) agg MAE " +
               fmt(m.agg_mae, 4) + (b ? " ok" : " FAIL") + "; (c) dense d_ff " + "x2 agg MAE " + fmt(d.agg_mae, 4) +
               " (activated " + std::to_string(d.activated_params) + " vs MoE " + std::to_string(m.activated_params) + ")" +
               (c ? " ok" : " FAIL");
    return o;
}

Outcome gate_ablation(Desk& desk) {
    const std::vector<std::uint64_t> seeds{0, 1, 2};
    std::map<GateKind, double> mean;
    std::map<GateKind, std::string> each;
    for (GateKind g : {GateKind::Linear, GateKind::LinearBalance, GateKind::Cluster}) {
        for (std::uint64_t s : seeds) {
            const double v = desk.moe(g, s).agg_mae;
            mean[g] += v / double(seeds.size());
            each[g] += (each[g].empty() ? "" : "/") + fmt(v, 4);
        }
    }
    Outcome o;
    o.pass = mean[GateKind::Cluster] <= mean[GateKind::Linear] + kGateMargin;
    o.detail = "mean agg MAE over 3 seeds: linear " + fmt(mean[GateKind::Linear], 4) + " (" + each[GateKind::Linear] +
               "), linear+balance " + fmt(mean[GateKind::LinearBalance], 4) + " (" + each[GateKind::LinearBalance] +
               "), cluster " + fmt(mean[GateKind::Cluster], 4) + " (" + each[GateKind::Cluster] + ")";
    return o;
}

void write_desk_json(const Desk& desk, const fs::path& path) {
    nlohmann::ordered_json j;
    j["steps"] = desk.steps();
    for (const auto& [key, r] : desk.runs()) {
        j["runs"][key] = {{"step0_pred_loss", r.step0_loss}, {"final_pred_loss_mean50", r.final_loss},
                          {"last_pred_loss", r.last_loss},   {"agg_mae_vs_naive", r.agg_mae},
                          {"agg_crps_vs_naive", r.agg_crps}, {"agg_mase_vs_naive", std::isnan(r.agg_mase) ? nlohmann::ordered_json() : nlohmann::ordered_json(r.agg_mase)},
                          {"train_seconds", r.train_seconds}, {"eval_seconds", r.eval_seconds},
                          {"activated_params", r.activated_params}};
    }
    std::ofstream out(path);
    out << j.dump(2) << '\n';
}

std::set<int> parse_criteria(const std::string& spec) {
    std::set<int> out;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto dash = item.find('-');
        if (dash == std::string::npos) {
            out.insert(std::stoi(item));
        } else {
            for (int i = std::stoi(item.substr(0, dash)); i <= std::stoi(item.substr(dash + 1)); ++i) out.insert(i);
        }
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"tsmoe acceptance checks"};
    std::string criteria = "1-11";
    std::size_t desk_steps = 3000;
    std::string work = (fs::temp_directory_path() / "tsmoe_acceptance").string();
    std::string desk_json;
    app.add_option("--criteria", criteria, "criteria to run, e.g. 1-6,9-11");
    app.add_option("--desk-steps", desk_steps, "training steps for the desk runs (criterion 7 requires 3000)");
    app.add_option("--work", work, "scratch directory");
    app.add_option("--desk-json", desk_json, "write desk run results to this file");
    CLI11_PARSE(app, argc, argv);

    const std::set<int> wanted = parse_criteria(criteria);
    std::unique_ptr<Desk> desk;
    auto get_desk = [&]() -> Desk& {
        if (!desk) desk = std::make_unique<Desk>(desk_steps);
        return *desk;
    };
    const std::vector<std::pair<std::string, std::function<Outcome()>>> all = {
        {"gradient integrity", gradient_integrity},
        {"routing oracle", routing_oracle},
        {"load-balancing closed forms", balance_closed_forms},
        {"dense equivalence", dense_equivalence},
        {"mixture NLL", mixture_nll_checks},
        {"metric closed forms", metric_closed_forms},
        {"desk training run", [&] { return desk_training(get_desk()); }},
        {"gate ablation direction (soft)", [&] { return gate_ablation(get_desk()); }},
        {"masking and causality", masking_and_causality},
        {"reproducibility and formats", [&] { return reproducibility_and_formats(work); }},
        {"analysis well-formedness", analysis_wellformed},
    };
    int failed = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        const int id = int(i) + 1;
        if (!wanted.count(id)) continue;
        const auto t0 = Clock::now();
        const Outcome o = all[i].second();
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << all[i].first << "): " << o.detail << "  ["
                  << fmt(seconds_since(t0), 3) << " s]" << std::endl;
    }
    if (desk && !desk_json.empty()) write_desk_json(*desk, desk_json);
    std::error_code ec;
    fs::remove_all(fs::path(work), ec);
    std::cout << (failed == 0 ? "all selected criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
    return 0;
}
