// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/autodiff.hpp"

#include <algorithm>
#include <stdexcept>

#include "tsmoe/errors.hpp"
#include "tsmoe/rng.hpp"

namespace tsmoe {

const Tensor& Var::value() const { return graph_->value(*this); }

Var Graph::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false});
    return {this, nodes_.size() - 1};
}

Var Graph::parameter(const std::string& name, Tensor value) {
    if (parameters_.count(name)) throw std::invalid_argument("parameter registered twice: " + name);
    nodes_.push_back(Node{std::move(value), {}, {}, true});
    parameters_.emplace(name, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
    const bool needs = std::any_of(parents.begin(), parents.end(), [this](Var p) { return requires_grad(p); });
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, needs});
    return {this, nodes_.size() - 1};
}

Var Graph::parameter_var(const std::string& name) {
    auto it = parameters_.find(name);
    if (it == parameters_.end()) throw std::out_of_range("unknown parameter: " + name);
    return {this, it->second};
}

Tensor* Graph::grad_buffer(Var v) {
    Node& node = nodes_[v.id()];
    if (!node.requires_grad) return nullptr;
    if (node.grad.size() != node.value.size()) node.grad = Tensor(node.value.shape(), 0.0);
    return &node.grad;
}

void Graph::accumulate(Var v, const Tensor& grad) {
    Tensor* buf = grad_buffer(v);
    if (!buf) return;
    if (buf->size() != grad.size()) throw std::logic_error("gradient size mismatch");
    double* dst = buf->data();
    const double* src = grad.data();
    for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += src[i];
}

GradientMap Graph::backward(Var loss) {
    if (loss.graph() != this) throw std::invalid_argument("loss belongs to another graph");
    if (nodes_[loss.id()].value.size() != 1) {
        throw std::invalid_argument("backward() requires a scalar loss, got shape " +
                                    shape_string(nodes_[loss.id()].value.shape()));
    }
    if (backward_done_) throw std::logic_error("backward() already ran on this graph");
    backward_done_ = true;

    if (Tensor* seed = grad_buffer(loss)) (*seed)[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.requires_grad || !node.backward) continue;
        if (node.grad.size() != node.value.size()) continue; // nothing flowed into this node
        if (!node.grad.all_finite()) {
            throw NumericalError("non-finite gradient encountered during backward at node " + std::to_string(i));
        }
        // Move the closure out so captured state can be released once consumed.
        BackwardFn fn = std::move(node.backward);
        fn(*this, node.grad);
    }

    GradientMap grads;
    for (const auto& [name, id] : parameters_) {
        Node& node = nodes_[id];
        Tensor g = node.grad.size() == node.value.size() ? node.grad : Tensor(node.value.shape(), 0.0);
        if (!g.all_finite()) throw NumericalError("non-finite gradient for parameter " + name);
        grads.emplace(name, std::move(g));
    }
    return grads;
}

void Graph::note_selection(std::uint64_t digest, double margin) {
    selection_digest_ = mix_seed(selection_digest_ ^ digest);
    selection_margin_ = std::min(selection_margin_, margin);
}

} // namespace tsmoe
