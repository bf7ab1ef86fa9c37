// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsmoe/moe.hpp"
#include "tsmoe/params.hpp"
#include "tsmoe/training.hpp"

namespace tsmoe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Raw container: named tensors plus a JSON metadata blob.
///
/// Layout (little-endian): "MOEF", u32 version, u32 tensor count; per tensor
/// u16 name length, name bytes, u8 dtype (0 = f32, 1 = f64), u8 rank, u64 dims,
/// row-major data; then u64 byte length and the JSON blob.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    nlohmann::json meta = nlohmann::json::object();
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError ("bad magic", "unsupported version", "truncated file", ...).
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Full training state: parameters, centroids, Adam moments, sampler and step.
Checkpoint checkpoint_from_state(const TrainState& state);
TrainState state_from_checkpoint(const Checkpoint& ckpt);

/// The model stored in a training checkpoint.
Model model_from_checkpoint(const Checkpoint& ckpt);

/// Centroid file written by fit-gate: one "gate.centroids.layer{l}" tensor per layer.
Checkpoint checkpoint_from_centroids(const std::map<std::size_t, CentroidSet>& centroids);
std::map<std::size_t, CentroidSet> centroids_from_checkpoint(const Checkpoint& ckpt);

std::string centroid_tensor_name(std::size_t layer);

} // namespace tsmoe
