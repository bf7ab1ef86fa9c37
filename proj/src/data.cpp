// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tsmoe/errors.hpp"
#include "tsmoe/rng.hpp"

namespace tsmoe {

bool PatchedSequence::patch_has_data(std::size_t t) const {
    for (std::size_t p = 0; p < patch_size; ++p) {
        if (real(t, p)) return true;
    }
    return false;
}

Patches patchify(std::span<const double> values, std::size_t patch_size) {
    if (patch_size == 0) throw std::invalid_argument("patch size must be at least 1");
    if (values.empty()) throw std::invalid_argument("cannot patchify an empty sequence");
    Patches out;
    out.patch_size = patch_size;
    out.num_patches = (values.size() + patch_size - 1) / patch_size;
    const std::size_t total = out.num_patches * patch_size;
    const std::size_t pad = total - values.size();
    out.values.assign(total, 0.0);
    out.pad_mask.assign(total, 0);
    std::copy(values.begin(), values.end(), out.values.begin() + std::ptrdiff_t(pad));
    std::fill(out.pad_mask.begin() + std::ptrdiff_t(pad), out.pad_mask.end(), 1);
    return out;
}

std::vector<double> unpatch(const Patches& patches) {
    std::vector<double> out;
    for (std::size_t i = 0; i < patches.values.size(); ++i) {
        if (patches.pad_mask[i]) out.push_back(patches.values[i]);
    }
    return out;
}

std::size_t masked_prefix_count(std::size_t num_patches, double masking_ratio) {
    // The small slack keeps products such as 0.3 * 10 from rounding up past the integer.
    const double raw = std::ceil(masking_ratio * double(num_patches) - 1e-9);
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::max(0.0, raw)));
}

namespace {

double quantile_sorted(const std::vector<double>& sorted, double level) {
    const double pos = level * double(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - double(lo);
    return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

} // namespace

Normalizer fit_normalizer(std::span<const double> values, NormalizerKind kind) {
    if (values.empty()) throw std::invalid_argument("normalizer needs at least one value");
    Normalizer n;
    if (kind == NormalizerKind::MeanStd) {
        double mu = 0.0;
        for (double v : values) mu += v;
        mu /= double(values.size());
        double var = 0.0;
        for (double v : values) var += (v - mu) * (v - mu);
        var /= double(values.size());
        n.mu = mu;
        n.sigma = std::max(std::sqrt(var), kSigmaFloor);
    } else {
        std::vector<double> sorted(values.begin(), values.end());
        std::sort(sorted.begin(), sorted.end());
        n.mu = quantile_sorted(sorted, 0.5);
        n.sigma = std::max(quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25), kSigmaFloor);
    }
    return n;
}

void refresh_loss_mask(PatchedSequence& seq) {
    seq.loss_mask.assign(seq.num_patches, 0);
    for (std::size_t t = seq.n_mask; t + 1 < seq.num_patches; ++t) {
        seq.loss_mask[t] = (seq.patch_has_data(t) && seq.patch_has_data(t + 1)) ? 1 : 0;
    }
}

PatchedSequence causal_normalize(const Patches& patches, double masking_ratio, NormalizerKind kind) {
    if (!(masking_ratio > 0.0 && masking_ratio < 1.0)) {
        throw std::invalid_argument("masking ratio must lie in (0, 1)");
    }
    PatchedSequence seq;
    seq.patch_size = patches.patch_size;
    seq.num_patches = patches.num_patches;
    seq.pad_mask = patches.pad_mask;
    seq.n_mask = masked_prefix_count(patches.num_patches, masking_ratio);

    std::vector<double> prefix;
    const std::size_t prefix_len = std::min(seq.n_mask, seq.num_patches) * seq.patch_size;
    for (std::size_t i = 0; i < prefix_len; ++i) {
        if (patches.pad_mask[i]) prefix.push_back(patches.values[i]);
    }
    if (prefix.empty()) throw std::invalid_argument("normalizer prefix contains only padding");
    seq.normalizer = fit_normalizer(prefix, kind);

    seq.patches.assign(patches.values.size(), 0.0);
    for (std::size_t i = 0; i < patches.values.size(); ++i) {
        if (patches.pad_mask[i]) seq.patches[i] = seq.normalizer.normalize(patches.values[i]);
    }
    refresh_loss_mask(seq);
    return seq;
}

void pad_to(PatchedSequence& seq, std::size_t num_patches) {
    if (num_patches < seq.num_patches) throw std::invalid_argument("cannot pad a sequence to fewer patches");
    seq.num_patches = num_patches;
    seq.patches.resize(num_patches * seq.patch_size, 0.0);
    seq.pad_mask.resize(num_patches * seq.patch_size, 0);
    refresh_loss_mask(seq);
}

// ---------------------------------------------------------------------------

std::string to_string(PatternFamily family) {
    switch (family) {
    case PatternFamily::SineMix: return "sine-mix";
    case PatternFamily::Sawtooth: return "sawtooth";
    case PatternFamily::Spiky: return "spiky";
    case PatternFamily::TrendSeason: return "trend+season";
    case PatternFamily::RegimeSwitch: return "regime-switch";
    }
    return "unknown";
}

PatternFamily pattern_family_from_string(const std::string& name) {
    for (auto f : {PatternFamily::SineMix, PatternFamily::Sawtooth, PatternFamily::Spiky, PatternFamily::TrendSeason,
                   PatternFamily::RegimeSwitch}) {
        if (to_string(f) == name) return f;
    }
    throw ConfigError("unknown pattern family: " + name);
}

namespace {

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Phase computed from t mod period so noiseless series repeat bit-for-bit.
double periodic_sine(std::size_t t, std::size_t period, double phase) {
    return std::sin(2.0 * std::numbers::pi * double(t % period) / double(period) + phase);
}

std::vector<double> generate_pattern(const SyntheticGroup& group, std::size_t length, Rng& rng) {
    std::vector<double> y(length, 0.0);
    const std::size_t p0 = group.periods.front();
    switch (group.family) {
    case PatternFamily::SineMix: {
        for (std::size_t j = 0; j < group.periods.size(); ++j) {
            const double amp = j == 0 ? uniform(rng, 0.6, 1.0) : uniform(rng, 0.2, 0.6);
            const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
            for (std::size_t t = 0; t < length; ++t) y[t] += amp * periodic_sine(t, group.periods[j], phase);
        }
        break;
    }
    case PatternFamily::Sawtooth: {
        const std::size_t shift = uniform_index(rng, p0);
        for (std::size_t t = 0; t < length; ++t) y[t] = 2.0 * double((t + shift) % p0) / double(p0) - 1.0;
        break;
    }
    case PatternFamily::Spiky: {
        const std::size_t shift = uniform_index(rng, p0);
        const double height = uniform(rng, 3.0, 5.0);
        const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        for (std::size_t t = 0; t < length; ++t) {
            y[t] = 0.2 * periodic_sine(t, p0, phase);
            if ((t + shift) % p0 == 0) y[t] += height;
            if (uniform01(rng) < 0.02) y[t] += height * uniform(rng, 0.5, 1.0);
        }
        break;
    }
    case PatternFamily::TrendSeason: {
        const double slope = uniform(rng, -2.0, 2.0) / double(length);
        const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        for (std::size_t t = 0; t < length; ++t) y[t] = slope * double(t) + periodic_sine(t, p0, phase);
        break;
    }
    case PatternFamily::RegimeSwitch: {
        const std::size_t p1 = group.periods.back();
        const auto switch_at = static_cast<std::size_t>(uniform(rng, 0.35, 0.55) * double(length));
        const double amp_after = uniform(rng, 1.5, 2.5);
        const double phase0 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double phase1 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        for (std::size_t t = 0; t < length; ++t) {
            y[t] = t < switch_at ? periodic_sine(t, p0, phase0) : amp_after * periodic_sine(t, p1, phase1);
        }
        break;
    }
    }
    return y;
}

} // namespace

std::size_t season_length(const SyntheticGroup& group) {
    std::size_t s = 1;
    for (std::size_t p : group.periods) s = std::lcm(s, p);
    return s;
}

std::vector<TimeSeriesRecord> generate_synthetic(const SyntheticSpec& spec) {
    if (spec.length == 0) throw ConfigError("synthetic length must be positive");
    std::vector<TimeSeriesRecord> out;
    for (std::size_t g = 0; g < spec.groups.size(); ++g) {
        const SyntheticGroup& group = spec.groups[g];
        if (group.periods.empty()) throw ConfigError("synthetic group " + group.label + " has no periods");
        for (std::size_t p : group.periods) {
            if (p < 2) throw ConfigError("synthetic periods must be at least 2");
        }
        if (spec.series_per_group == 0) throw ConfigError("synthetic groups need at least one series");
        for (std::size_t s = 0; s < spec.series_per_group; ++s) {
            Rng rng = make_rng(spec.seed, (std::uint64_t(g) << 32) | s);
            const double level = uniform(rng, -5.0, 5.0);
            const double amplitude = std::exp(uniform(rng, std::log(0.5), std::log(5.0)));
            std::vector<double> y = generate_pattern(group, spec.length, rng);
            for (double& v : y) {
                const double noise = group.noise_sigma > 0.0 ? group.noise_sigma * standard_normal(rng) : 0.0;
                v = level + amplitude * (v + noise);
            }
            std::ostringstream id;
            id << group.label << '_' << s;
            out.push_back({id.str(), group.label, std::move(y), std::nullopt});
        }
    }
    return out;
}

SyntheticSpec default_synthetic_spec(std::uint64_t seed) {
    SyntheticSpec spec;
    spec.series_per_group = 8;
    spec.length = 512;
    spec.seed = seed;
    spec.groups = {
        {"sine_a", {24}, PatternFamily::SineMix, 0.15},
        {"sine_b", {12, 48}, PatternFamily::SineMix, 0.15},
        {"saw_a", {16}, PatternFamily::Sawtooth, 0.1},
        {"saw_b", {30}, PatternFamily::Sawtooth, 0.15},
        {"spiky_a", {24}, PatternFamily::Spiky, 0.1},
        {"spiky_b", {10}, PatternFamily::Spiky, 0.15},
        {"regime_a", {24, 12}, PatternFamily::RegimeSwitch, 0.1},
        {"regime_b", {16, 32}, PatternFamily::RegimeSwitch, 0.15},
    };
    return spec;
}

// ---------------------------------------------------------------------------

std::vector<TimeSeriesRecord> load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file " + path.string());
    std::vector<TimeSeriesRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + " line " + std::to_string(line_no);
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(where + ": malformed JSON: " + e.what());
        }
        if (!obj.is_object()) throw FormatError(where + ": expected a JSON object");
        if (!obj.contains("target")) throw FormatError(where + ": missing \"target\"");
        if (!obj.contains("id") || !obj["id"].is_string()) throw FormatError(where + ": missing string \"id\"");
        if (!obj.contains("freq") || !obj["freq"].is_string()) throw FormatError(where + ": missing string \"freq\"");
        const auto& target = obj["target"];
        if (!target.is_array()) throw FormatError(where + ": \"target\" must be an array");
        TimeSeriesRecord rec;
        rec.id = obj["id"].get<std::string>();
        rec.freq = obj["freq"].get<std::string>();
        if (rec.freq.empty()) throw FormatError(where + ": empty \"freq\"");
        rec.values.reserve(target.size());
        for (std::size_t i = 0; i < target.size(); ++i) {
            if (!target[i].is_number()) {
                throw FormatError(where + ": non-numeric target entry at index " + std::to_string(i));
            }
            rec.values.push_back(target[i].get<double>());
        }
        if (obj.contains("variate_group") && !obj["variate_group"].is_null()) {
            if (!obj["variate_group"].is_string()) throw FormatError(where + ": \"variate_group\" must be a string");
            rec.variate_group = obj["variate_group"].get<std::string>();
        }
        out.push_back(std::move(rec));
    }
    return out;
}

void save_jsonl(const std::vector<TimeSeriesRecord>& records, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write dataset file " + path.string());
    for (const auto& rec : records) {
        nlohmann::ordered_json obj;
        obj["id"] = rec.id;
        obj["freq"] = rec.freq;
        obj["target"] = rec.values;
        if (rec.variate_group) obj["variate_group"] = *rec.variate_group;
        out << obj.dump() << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

std::map<std::string, std::vector<TimeSeriesRecord>> group_variates(const std::vector<TimeSeriesRecord>& records) {
    std::map<std::string, std::vector<TimeSeriesRecord>> groups;
    for (const auto& rec : records) groups[rec.variate_group.value_or(rec.id)].push_back(rec);
    for (auto& [name, members] : groups) {
        std::sort(members.begin(), members.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    }
    return groups;
}

std::vector<TimeSeriesRecord> truncate_tail(const std::vector<TimeSeriesRecord>& records, std::size_t tail) {
    std::vector<TimeSeriesRecord> out = records;
    for (auto& rec : out) {
        if (rec.values.size() <= tail) throw ConfigError("series " + rec.id + " is not longer than the held-out tail");
        rec.values.resize(rec.values.size() - tail);
    }
    return out;
}

// ---------------------------------------------------------------------------

Batch make_batch(const std::vector<TimeSeriesRecord>& records, std::size_t context_patches, std::size_t patch_size,
                 double masking_ratio, std::uint64_t seed, NormalizerKind kind) {
    if (context_patches < 2) throw ConfigError("context must span at least two patches");
    Batch batch;
    const std::size_t window = context_patches * patch_size;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        if (rec.values.size() < patch_size) {
            throw ConfigError("record " + rec.id + " is shorter than one patch");
        }
        std::size_t start = 0;
        std::size_t len = rec.values.size();
        if (len > window) {
            Rng rng = make_rng(seed, i);
            start = uniform_index(rng, len - window + 1);
            len = window;
        }
        const Patches patches = patchify(std::span<const double>(rec.values).subspan(start, len), patch_size);
        if (patches.num_patches < 2) throw ConfigError("record " + rec.id + " yields fewer than two patches");
        PatchedSequence seq = causal_normalize(patches, masking_ratio, kind);
        seq.series_id = rec.id;
        seq.freq = rec.freq;
        batch.num_patches = std::max(batch.num_patches, seq.num_patches);
        batch.items.push_back(std::move(seq));
    }
    for (auto& seq : batch.items) pad_to(seq, batch.num_patches);
    return batch;
}

std::vector<PatchedSequence> tile_windows(const std::vector<TimeSeriesRecord>& records, std::size_t context_patches,
                                          std::size_t patch_size, double masking_ratio, NormalizerKind kind) {
    if (context_patches < 2) throw ConfigError("context must span at least two patches");
    std::vector<PatchedSequence> out;
    const std::size_t window = context_patches * patch_size;
    for (const auto& rec : records) {
        std::vector<PatchedSequence> pieces;
        std::size_t end = rec.values.size();
        while (end >= 2 * patch_size) {
            const std::size_t start = end > window ? end - window : 0;
            const auto values = std::span<const double>(rec.values).subspan(start, end - start);
            PatchedSequence seq = causal_normalize(patchify(values, patch_size), masking_ratio, kind);
            seq.series_id = rec.id;
            seq.freq = rec.freq;
            pieces.push_back(std::move(seq));
            end = start;
        }
        out.insert(out.end(), std::make_move_iterator(pieces.rbegin()), std::make_move_iterator(pieces.rend()));
    }
    return out;
}

} // namespace tsmoe
