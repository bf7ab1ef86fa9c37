// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <stdexcept>
#include <tuple>

#include "tsmoe/errors.hpp"

namespace tsmoe {

std::string to_string(GroupBy g) {
    switch (g) {
    case GroupBy::Layer: return "layer";
    case GroupBy::LayerFreq: return "layer-freq";
    case GroupBy::LayerPosition: return "layer-position";
    }
    return "layer";
}

GroupBy group_by_from_string(const std::string& name) {
    if (name == "layer") return GroupBy::Layer;
    if (name == "layer-freq") return GroupBy::LayerFreq;
    if (name == "layer-position") return GroupBy::LayerPosition;
    throw ConfigError("unknown grouping: " + name);
}

std::string to_string(AllocationMass m) {
    switch (m) {
    case AllocationMass::Weight: return "weight";
    case AllocationMass::Top1: return "top1";
    case AllocationMass::AnyK: return "any-k";
    }
    return "weight";
}

AllocationMass allocation_mass_from_string(const std::string& name) {
    if (name == "weight") return AllocationMass::Weight;
    if (name == "top1") return AllocationMass::Top1;
    if (name == "any-k") return AllocationMass::AnyK;
    throw ConfigError("unknown allocation mass: " + name);
}

std::vector<PatchedSequence> analysis_sequences(const std::vector<TimeSeriesRecord>& records, std::size_t patch_size,
                                                double masking_ratio, std::size_t max_patches, NormalizerKind kind) {
    std::vector<PatchedSequence> out;
    for (const auto& rec : records) {
        std::span<const double> values(rec.values);
        if (max_patches > 0 && values.size() > max_patches * patch_size) {
            values = values.subspan(values.size() - max_patches * patch_size);
        }
        if (values.size() < 2 * patch_size) continue;
        PatchedSequence seq = causal_normalize(patchify(values, patch_size), masking_ratio, kind);
        seq.series_id = rec.id;
        seq.freq = rec.freq;
        out.push_back(std::move(seq));
    }
    return out;
}

RoutingTrace trace_routing(const Model& model, const std::vector<PatchedSequence>& sequences) {
    const ModelConfig& c = model.config;
    if (c.ffn != FfnKind::MoE) throw ConfigError("routing analysis needs an MoE model");
    RoutingTrace trace;
    trace.n_experts = c.n_experts;
    trace.top_k = c.top_k;
    trace.layers = c.layers;
    for (const auto& seq : sequences) {
        Graph graph;
        const ModelInput input = make_input({seq}, c.objective);
        const ForwardResult fr = forward_inference(graph, model, input);
        for (std::size_t l = 0; l < fr.routing.size(); ++l) {
            const Tensor& w = fr.routing[l].weights.value();
            for (std::size_t t = 0; t < seq.num_patches; ++t) {
                if (!seq.loss_mask[t]) continue;
                const auto& selected = fr.routing[l].selected[t];
                for (std::size_t r = 0; r < selected.size(); ++r) {
                    RoutingEntry e;
                    e.layer = l;
                    e.position = t;
                    e.time_index = input.time_index[t];
                    e.variate_id = input.variate_id[t];
                    e.series_id = seq.series_id;
                    e.freq = seq.freq;
                    e.rank = r + 1;
                    e.expert = selected[r];
                    e.weight = w.at(t, selected[r]);
                    trace.entries.push_back(std::move(e));
                }
            }
        }
    }
    return trace;
}

std::vector<Histogram> allocation_distribution(const RoutingTrace& trace, GroupBy group_by, AllocationMass mass) {
    if (trace.entries.empty()) throw std::invalid_argument("allocation_distribution: empty trace");
    const std::size_t m = trace.n_experts;
    // Key (layer, position, freq) with unused parts fixed, so positions sort numerically.
    using Key = std::tuple<std::size_t, std::size_t, std::string>;
    std::map<Key, Histogram> groups;
    // Accumulate in a canonical order so the result does not depend on entry order.
    std::vector<const RoutingEntry*> order;
    order.reserve(trace.entries.size());
    for (const auto& e : trace.entries) order.push_back(&e);
    std::sort(order.begin(), order.end(), [](const RoutingEntry* a, const RoutingEntry* b) {
        return std::tie(a->layer, a->series_id, a->variate_id, a->position, a->rank, a->expert, a->weight) <
               std::tie(b->layer, b->series_id, b->variate_id, b->position, b->rank, b->expert, b->weight);
    });
    for (const RoutingEntry* ep : order) {
        const RoutingEntry& e = *ep;
        if (e.expert >= m) throw std::invalid_argument("allocation_distribution: expert id out of range");
        Key key{e.layer, 0, ""};
        std::string label = "all";
        if (group_by == GroupBy::LayerFreq) {
            std::get<2>(key) = e.freq;
            label = e.freq;
        } else if (group_by == GroupBy::LayerPosition) {
            std::get<1>(key) = e.position;
            label = std::to_string(e.position);
        }
        auto [it, inserted] = groups.try_emplace(key);
        Histogram& h = it->second;
        if (inserted) {
            h.layer = e.layer;
            h.group = label;
            h.mass.assign(m, 0.0);
        }
        if (e.rank == 1) ++h.tokens;
        switch (mass) {
        case AllocationMass::Weight: h.mass[e.expert] += e.weight; break;
        case AllocationMass::Top1:
            if (e.rank == 1) h.mass[e.expert] += 1.0;
            break;
        case AllocationMass::AnyK: h.mass[e.expert] += 1.0; break;
        }
    }
    std::vector<Histogram> out;
    for (auto& [key, h] : groups) {
        double total = 0.0;
        for (double v : h.mass) total += v;
        if (total > 0.0) {
            for (double& v : h.mass) v /= total;
        }
        out.push_back(std::move(h));
    }
    return out;
}

double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw std::invalid_argument("js_divergence: size mismatch");
    double kl_p = 0.0;
    double kl_q = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double mid = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) kl_p += p[i] * std::log(p[i] / mid);
        if (q[i] > 0.0) kl_q += q[i] * std::log(q[i] / mid);
    }
    return std::max(0.0, 0.5 * (kl_p + kl_q));
}

ConcentrationReport concentration_stats(const std::vector<Histogram>& per_layer, const std::vector<Histogram>& per_group,
                                        std::size_t top_k) {
    ConcentrationReport report;
    for (const auto& h : per_layer) {
        LayerConcentration lc;
        lc.layer = h.layer;
        lc.entropy = entropy(h.mass);
        lc.effective_experts = std::exp(lc.entropy);
        lc.top_k = std::min(top_k, h.mass.size());
        std::vector<double> sorted = h.mass;
        std::sort(sorted.begin(), sorted.end(), std::greater<>());
        for (std::size_t i = 0; i < lc.top_k; ++i) lc.top_k_mass += sorted[i];
        report.layers.push_back(lc);
    }
    for (std::size_t i = 0; i < per_group.size(); ++i) {
        for (std::size_t j = i + 1; j < per_group.size(); ++j) {
            if (per_group[i].layer != per_group[j].layer) continue;
            report.pairs.push_back({per_group[i].layer, per_group[i].group, per_group[j].group,
                                    js_divergence(per_group[i].mass, per_group[j].mass)});
        }
    }
    return report;
}

namespace {

void write_double(std::ostream& out, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) {
        if (ch == '"') q += '"';
        q += ch;
    }
    return q + "\"";
}

} // namespace

std::size_t export_embeddings(const Model& model, const std::vector<PatchedSequence>& sequences,
                              const std::string& stage, std::ostream& out) {
    const std::size_t layers = model.config.layers;
    std::size_t layer = 0;
    bool input_stage = false;
    bool attention_stage = false;
    if (stage == "input-projection") {
        input_stage = true;
    } else {
        unsigned parsed = 0;
        char tail[16] = {0};
        if (std::sscanf(stage.c_str(), "layer-%u-%15s", &parsed, tail) != 2 ||
            (std::string(tail) != "residual" && std::string(tail) != "attention") || parsed >= layers) {
            throw ConfigError("invalid embedding stage \"" + stage +
                              "\"; expected input-projection, layer-<l>-residual or layer-<l>-attention with l < " +
                              std::to_string(layers));
        }
        layer = parsed;
        attention_stage = std::string(tail) == "attention";
    }
    const std::size_t d = model.config.d_model;
    out << "series_id,freq,position";
    for (std::size_t i = 0; i < d; ++i) out << ",e" << i;
    out << '\n';
    std::size_t rows = 0;
    for (const auto& seq : sequences) {
        Graph graph;
        const ForwardResult fr = forward_inference(graph, model, make_input({seq}, model.config.objective));
        const Tensor& rep = input_stage ? fr.embeddings.value()
                                        : (attention_stage ? fr.pre_moe[layer].value() : fr.layer_outputs[layer].value());
        for (std::size_t t = 0; t < seq.num_patches; ++t) {
            if (!seq.loss_mask[t]) continue;
            out << csv_field(seq.series_id) << ',' << csv_field(seq.freq) << ',' << t;
            for (double v : rep.row(t)) {
                out << ',';
                write_double(out, v);
            }
            out << '\n';
            ++rows;
        }
    }
    return rows;
}

ProbeResult periodicity_probe(const RoutingTrace& trace, std::size_t layer, std::size_t season, std::size_t patch_size) {
    if (patch_size == 0 || season == 0) throw std::invalid_argument("periodicity_probe: season and patch size must be positive");
    ProbeResult result;
    result.layer = layer;
    result.lag = std::max<std::size_t>(1, std::size_t(std::llround(double(season) / double(patch_size))));
    const std::size_t lag = result.lag;

    // Top-1 expert per position for each (series, variate).
    std::map<std::pair<std::string, int>, std::map<std::size_t, std::size_t>> top1;
    for (const auto& e : trace.entries) {
        if (e.layer == layer && e.rank == 1) top1[{e.series_id, e.variate_id}][e.position] = e.expert;
    }
    bool long_enough = false;
    std::vector<std::pair<std::size_t, std::size_t>> pairs; // (expert at t, expert at t + lag)
    for (const auto& [key, seq] : top1) {
        std::size_t run = 0;
        std::size_t prev = 0;
        bool first = true;
        for (const auto& [pos, expert] : seq) {
            run = (!first && pos == prev + 1) ? run + 1 : 1;
            first = false;
            prev = pos;
            if (run >= 3 * lag) long_enough = true;
            auto it = seq.find(pos + lag);
            if (it != seq.end()) pairs.emplace_back(expert, it->second);
        }
    }
    if (!long_enough) {
        throw std::invalid_argument("periodicity_probe: no series covers " + std::to_string(3 * lag) +
                                    " consecutive positions in layer " + std::to_string(layer));
    }
    result.pairs = pairs.size();
    const std::size_t m = std::max<std::size_t>(trace.n_experts, 1);
    bool any = false;
    double best = -2.0;
    for (std::size_t e = 0; e < m; ++e) {
        double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (const auto& [a, b] : pairs) {
            const double x = a == e ? 1.0 : 0.0;
            const double y = b == e ? 1.0 : 0.0;
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
        const double n = double(pairs.size());
        const double vx = sxx - sx * sx / n;
        const double vy = syy - sy * sy / n;
        if (vx <= 0.0 || vy <= 0.0) continue;
        const double r = (sxy - sx * sy / n) / std::sqrt(vx * vy);
        if (!any || r > best) {
            best = r;
            result.expert = e;
        }
        any = true;
    }
    if (!any) {
        result.skipped = "zero variance: top-1 routing is constant";
        return result;
    }
    result.autocorrelation = best;
    return result;
}

void write_histograms_csv(const std::vector<Histogram>& histograms, std::ostream& out) {
    out << "layer,group,expert_id,mass,tokens\n";
    for (const auto& h : histograms) {
        for (std::size_t e = 0; e < h.mass.size(); ++e) {
            out << h.layer << ',' << csv_field(h.group) << ',' << e << ',';
            write_double(out, h.mass[e]);
            out << ',' << h.tokens << '\n';
        }
    }
}

void write_concentration_csv(const ConcentrationReport& report, std::ostream& out) {
    out << "layer,entropy,effective_experts,top_k,top_k_mass\n";
    for (const auto& l : report.layers) {
        out << l.layer << ',';
        write_double(out, l.entropy);
        out << ',';
        write_double(out, l.effective_experts);
        out << ',' << l.top_k << ',';
        write_double(out, l.top_k_mass);
        out << '\n';
    }
}

void write_divergence_csv(const ConcentrationReport& report, std::ostream& out) {
    out << "layer,group_a,group_b,js_divergence\n";
    for (const auto& p : report.pairs) {
        out << p.layer << ',' << csv_field(p.group_a) << ',' << csv_field(p.group_b) << ',';
        write_double(out, p.js);
        out << '\n';
    }
}

void write_trace_csv(const RoutingTrace& trace, std::ostream& out) {
    out << "layer,series_id,freq,variate_id,position,time_index,rank,expert_id,weight\n";
    for (const auto& e : trace.entries) {
        out << e.layer << ',' << csv_field(e.series_id) << ',' << csv_field(e.freq) << ',' << e.variate_id << ','
            << e.position << ',';
        write_double(out, e.time_index);
        out << ',' << e.rank << ',' << e.expert << ',';
        write_double(out, e.weight);
        out << '\n';
    }
}

} // namespace tsmoe
