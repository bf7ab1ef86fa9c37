// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tsmoe {

struct TimeSeriesRecord {
    std::string id;
    std::string freq;
    std::vector<double> values;
    std::optional<std::string> variate_group;

    bool operator==(const TimeSeriesRecord&) const = default;
};

inline constexpr double kSigmaFloor = 1e-5;

enum class NormalizerKind { MeanStd, MedianIqr };

struct Normalizer {
    double mu = 0.0;
    double sigma = 1.0;

    double normalize(double v) const noexcept { return (v - mu) / sigma; }
    double denormalize(double v) const noexcept { return v * sigma + mu; }
};

/// Non-overlapping patches; when the length is not a multiple of the patch
/// size the first patch is left-padded so the latest value ends the last patch.
struct Patches {
    std::size_t patch_size = 0;
    std::size_t num_patches = 0;
    std::vector<double> values; // num_patches x patch_size
    std::vector<char> pad_mask; // 1 = real value
};

struct PatchedSequence {
    std::size_t patch_size = 0;
    std::size_t num_patches = 0;
    std::vector<double> patches; // normalized, pads are zero
    std::vector<char> pad_mask;  // num_patches x patch_size, 1 = real value
    std::vector<char> loss_mask; // per patch: its prediction of the next patch is scored
    Normalizer normalizer;
    std::size_t n_mask = 0;
    std::string series_id;
    std::string freq;

    double value(std::size_t t, std::size_t p) const { return patches[t * patch_size + p]; }
    bool real(std::size_t t, std::size_t p) const { return pad_mask[t * patch_size + p] != 0; }
    bool patch_has_data(std::size_t t) const;
};

Patches patchify(std::span<const double> values, std::size_t patch_size);

/// max(1, ceil(r * N)).
std::size_t masked_prefix_count(std::size_t num_patches, double masking_ratio);

/// Normalizes every patch with statistics of the first n_mask patches only.
PatchedSequence causal_normalize(const Patches& patches, double masking_ratio,
                                 NormalizerKind kind = NormalizerKind::MeanStd);

/// Normalizer fitted on all real values of a sequence.
Normalizer fit_normalizer(std::span<const double> values, NormalizerKind kind = NormalizerKind::MeanStd);

/// Recomputes loss_mask from n_mask and the pad mask.
void refresh_loss_mask(PatchedSequence& seq);

/// Real values of a patched sequence in original order, padding removed.
std::vector<double> unpatch(const Patches& patches);

// ---------------------------------------------------------------------------
// Synthetic corpus

enum class PatternFamily { SineMix, Sawtooth, Spiky, TrendSeason, RegimeSwitch };

std::string to_string(PatternFamily family);
PatternFamily pattern_family_from_string(const std::string& name);

struct SyntheticGroup {
    std::string label;
    std::vector<std::size_t> periods;
    PatternFamily family = PatternFamily::SineMix;
    double noise_sigma = 0.1;
};

struct SyntheticSpec {
    std::size_t series_per_group = 8;
    std::vector<SyntheticGroup> groups;
    std::size_t length = 512;
    std::uint64_t seed = 0;
};

/// Least common multiple of the group's periods.
std::size_t season_length(const SyntheticGroup& group);

/// Deterministic given the seed. Each record's freq tag is its group label.
std::vector<TimeSeriesRecord> generate_synthetic(const SyntheticSpec& spec);

/// Four pattern families with two groups each: the corpus used by the desk runs.
SyntheticSpec default_synthetic_spec(std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// JSON-lines datasets: {"id": ..., "freq": ..., "target": [...], "variate_group": ...}

std::vector<TimeSeriesRecord> load_jsonl(const std::filesystem::path& path);
void save_jsonl(const std::vector<TimeSeriesRecord>& records, const std::filesystem::path& path);

/// Variates sharing a variate_group, each group ordered lexicographically by id.
std::map<std::string, std::vector<TimeSeriesRecord>> group_variates(const std::vector<TimeSeriesRecord>& records);

/// Drops the last `tail` values of every record (held-out region).
std::vector<TimeSeriesRecord> truncate_tail(const std::vector<TimeSeriesRecord>& records, std::size_t tail);

// ---------------------------------------------------------------------------
// Batches

struct Batch {
    std::vector<PatchedSequence> items;
    std::size_t num_patches = 0;
};

/// One uniformly placed window of at most `context_patches` patches per record,
/// all padded on the right with empty patches to the longest window.
Batch make_batch(const std::vector<TimeSeriesRecord>& records, std::size_t context_patches, std::size_t patch_size,
                 double masking_ratio, std::uint64_t seed, NormalizerKind kind = NormalizerKind::MeanStd);

/// Every record cut into consecutive windows of `context_patches` patches,
/// aligned to the end of the series; a shorter leading remainder of at least
/// two patches is kept as its own window.
std::vector<PatchedSequence> tile_windows(const std::vector<TimeSeriesRecord>& records, std::size_t context_patches,
                                          std::size_t patch_size, double masking_ratio,
                                          NormalizerKind kind = NormalizerKind::MeanStd);

/// Appends fully padded patches until the sequence has `num_patches` patches.
void pad_to(PatchedSequence& seq, std::size_t num_patches);

} // namespace tsmoe
