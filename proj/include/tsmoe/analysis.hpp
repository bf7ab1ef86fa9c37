// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tsmoe/data.hpp"
#include "tsmoe/model.hpp"

namespace tsmoe {

struct RoutingEntry {
    std::size_t layer = 0;
    std::size_t position = 0; // token position within its sequence
    double time_index = 0.0;
    int variate_id = 0;
    std::string series_id;
    std::string freq;
    std::size_t rank = 1; // 1..K
    std::size_t expert = 0;
    double weight = 0.0;
};

struct RoutingTrace {
    std::size_t n_experts = 0;
    std::size_t top_k = 0;
    std::size_t layers = 0;
    std::vector<RoutingEntry> entries;
};

/// Whole records as sequences for analysis: one causal-normalized sequence per
/// record, optionally limited to its last `max_patches` patches (0 = all).
std::vector<PatchedSequence> analysis_sequences(const std::vector<TimeSeriesRecord>& records, std::size_t patch_size,
                                                double masking_ratio, std::size_t max_patches = 0,
                                                NormalizerKind kind = NormalizerKind::MeanStd);

/// Every gate decision on every loss-eligible token, K entries per (layer, token).
RoutingTrace trace_routing(const Model& model, const std::vector<PatchedSequence>& sequences);

enum class GroupBy { Layer, LayerFreq, LayerPosition };
/// Weight: gate weight mass. Top1: count of tokens whose first choice is the expert.
/// AnyK: count of tokens that select the expert at any rank, normalized over all selections.
enum class AllocationMass { Weight, Top1, AnyK };

std::string to_string(GroupBy g);
GroupBy group_by_from_string(const std::string& name);
std::string to_string(AllocationMass m);
AllocationMass allocation_mass_from_string(const std::string& name);

struct Histogram {
    std::size_t layer = 0;
    std::string group; // "all", a freq tag, or a position
    std::vector<double> mass; // sums to 1
    std::size_t tokens = 0;
};

/// Histograms sorted by (layer, group). Throws std::invalid_argument on an empty trace.
std::vector<Histogram> allocation_distribution(const RoutingTrace& trace, GroupBy group_by,
                                               AllocationMass mass = AllocationMass::Weight);

/// -sum p ln p with 0 ln 0 = 0.
double entropy(std::span<const double> p);
double js_divergence(std::span<const double> p, std::span<const double> q);

struct LayerConcentration {
    std::size_t layer = 0;
    double entropy = 0.0;
    double effective_experts = 0.0;
    std::size_t top_k = 0;
    double top_k_mass = 0.0;
};

struct PairDivergence {
    std::size_t layer = 0;
    std::string group_a;
    std::string group_b;
    double js = 0.0;
};

struct ConcentrationReport {
    std::vector<LayerConcentration> layers;
    std::vector<PairDivergence> pairs;
};

/// Per-layer statistics from layer histograms, plus pairwise JS divergence
/// between the per-group histograms of each layer.
ConcentrationReport concentration_stats(const std::vector<Histogram>& per_layer, const std::vector<Histogram>& per_group,
                                        std::size_t top_k);

/// "input-projection" or "layer-{l}-residual" (residual stream after block l).
/// Writes a header then one row per loss-eligible token: series_id, freq, position, e_0..e_{D-1}.
/// Returns the number of rows.
std::size_t export_embeddings(const Model& model, const std::vector<PatchedSequence>& sequences,
                              const std::string& stage, std::ostream& out);

struct ProbeResult {
    std::size_t layer = 0;
    std::size_t lag = 0;
    double autocorrelation = 0.0;
    std::size_t expert = 0;
    std::size_t pairs = 0;
    std::optional<std::string> skipped;
};

/// Pearson correlation of the "top-1 == e" indicator with itself at lag
/// round(season / patch_size) tokens, pooled over series; the maximum over experts.
/// Throws std::invalid_argument when no series covers 3 * lag consecutive positions.
ProbeResult periodicity_probe(const RoutingTrace& trace, std::size_t layer, std::size_t season, std::size_t patch_size);

void write_histograms_csv(const std::vector<Histogram>& histograms, std::ostream& out);
void write_concentration_csv(const ConcentrationReport& report, std::ostream& out);
void write_divergence_csv(const ConcentrationReport& report, std::ostream& out);
void write_trace_csv(const RoutingTrace& trace, std::ostream& out);

} // namespace tsmoe
