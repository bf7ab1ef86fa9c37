// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "tsmoe/tensor.hpp"

namespace tsmoe {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
class Var {
public:
    Var() = default;
    Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph* graph() const noexcept { return graph_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return graph_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

using GradientMap = std::map<std::string, Tensor>;

/// Tape for reverse-mode differentiation over whole tensors.
///
/// Nodes are appended in evaluation order, so creation order is a topological
/// order and backward() is a single reverse sweep. Each op records a closure
/// that receives the gradient of its output and accumulates into its parents.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value);
    Var parameter(const std::string& name, Tensor value);
    Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

    const Tensor& value(Var v) const { return nodes_[v.id()].value; }
    bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

    /// Gradient buffer of a node during backward(); nullptr when the node needs no gradient.
    Tensor* grad_buffer(Var v);
    void accumulate(Var v, const Tensor& grad);

    /// Runs the reverse sweep from a scalar loss. Every registered parameter
    /// gets an entry; parameters the loss does not depend on get zeros.
    GradientMap backward(Var loss);

    /// Records a discrete decision (TopK or argmax) taken during forward.
    /// `margin` is the gap separating the chosen branch from the nearest alternative.
    void note_selection(std::uint64_t digest, double margin);
    std::uint64_t selection_digest() const noexcept { return selection_digest_; }
    double selection_margin() const noexcept { return selection_margin_; }

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::map<std::string, std::size_t>& parameters() const noexcept { return parameters_; }
    Var parameter_var(const std::string& name);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackwardFn backward;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    std::map<std::string, std::size_t> parameters_;
    std::uint64_t selection_digest_ = 0;
    double selection_margin_ = std::numeric_limits<double>::infinity();
    bool backward_done_ = false;
};

} // namespace tsmoe
