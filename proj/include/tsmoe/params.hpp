// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>

#include "tsmoe/autodiff.hpp"

namespace tsmoe {

/// Named tensors, iterated in name order everywhere (checkpoints, clipping, optimizer).
using ParamStore = std::map<std::string, Tensor>;
using ParamVars = std::map<std::string, Var>;

/// Registers every tensor of the store as a graph parameter.
ParamVars bind_parameters(Graph& graph, const ParamStore& params);

std::size_t parameter_count(const ParamStore& params);

} // namespace tsmoe
