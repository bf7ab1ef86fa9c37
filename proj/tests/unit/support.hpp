// SPDX-License-Identifier: Apache-2.0
// Small fixtures shared by the unit tests.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsmoe/data.hpp"
#include "tsmoe/model.hpp"
#include "tsmoe/rng.hpp"
#include "tsmoe/tensor.hpp"

namespace tsmoe::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = scale * standard_normal(rng);
    return t;
}

inline std::vector<double> random_values(std::size_t n, Rng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * standard_normal(rng);
    return v;
}

/// A model small enough for finite-difference checks.
inline ModelConfig tiny_config(GateKind gate = GateKind::LinearBalance) {
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

/// Random parameters large enough that every block contributes.
inline Model perturbed_model(const ModelConfig& config, std::uint64_t seed, double scale = 0.3) {
    Model m = init_model(config, seed);
    Rng rng = make_rng(seed, "perturb");
    for (auto& [name, t] : m.params) {
        for (double& v : t.values()) v += scale * standard_normal(rng);
    }
    return m;
}

inline PatchedSequence random_sequence(std::size_t length, std::size_t patch_size, Rng& rng,
                                       const std::string& id = "s", const std::string& freq = "F") {
    const std::vector<double> values = random_values(length, rng);
    PatchedSequence seq = causal_normalize(patchify(values, patch_size), 0.3);
    seq.series_id = id;
    seq.freq = freq;
    return seq;
}

inline std::vector<TimeSeriesRecord> small_corpus(std::uint64_t seed, std::size_t length = 128,
                                                  std::size_t per_group = 2) {
    SyntheticSpec spec = default_synthetic_spec(seed);
    spec.length = length;
    spec.series_per_group = per_group;
    return generate_synthetic(spec);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("tsmoe_" + tag + "_" + std::to_string(std::uint64_t(reinterpret_cast<std::uintptr_t>(this))));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

} // namespace tsmoe::test
