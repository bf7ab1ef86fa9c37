// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "tsmoe/autodiff.hpp"

namespace tsmoe {

/// Which tokens may attend to which. Rows of one segment (one batch item,
/// possibly several flattened variates) are contiguous.
struct AttentionLayout {
    std::vector<std::size_t> segment_offsets; // size = segments + 1
    std::vector<double> time_index;           // per row
    std::vector<char> key_valid;              // rows that may be attended to (not pure padding)
    bool causal = true;

    /// Token i attends to token j of the same segment iff j is a valid key and
    /// time_index[j] <= time_index[i] (any time when not causal). A token
    /// always attends to itself.
    bool allowed(std::size_t i, std::size_t j) const noexcept {
        if (i == j) return true;
        if (!key_valid[j]) return false;
        return !causal || time_index[j] <= time_index[i];
    }
};

/// Rotary position encoding applied per head, rotating dimension pairs by
/// angle position * base^(-2i / head_dim).
Var rotary(Var x, const std::vector<double>& positions, std::size_t n_heads, double base);

/// Multi-head scaled dot-product attention on already projected q, k, v.
Var multi_head_attention(Var q, Var k, Var v, std::shared_ptr<const AttentionLayout> layout, std::size_t n_heads);

} // namespace tsmoe
