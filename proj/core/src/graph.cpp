#include "mdf/graph.hpp"

#include <algorithm>

#include "mdf/error.hpp"

namespace mdf {

std::string_view to_string(OpKind kind) noexcept {
    switch (kind) {
        case OpKind::input: return "input";
        case OpKind::parameter: return "parameter";
        case OpKind::constant: return "constant";
        case OpKind::conv2d: return "conv2d";
        case OpKind::pointwise_conv: return "pointwise_conv";
        case OpKind::linear: return "linear";
        case OpKind::batch_norm2d: return "batch_norm2d";
        case OpKind::silu: return "silu";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::softmax: return "softmax";
        case OpKind::global_avg_pool: return "global_avg_pool";
        case OpKind::upsample_nearest2x: return "upsample_nearest2x";
        case OpKind::concat_channels: return "concat_channels";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::reduce_sum: return "reduce_sum";
        case OpKind::reduce_mean: return "reduce_mean";
        case OpKind::mean_rows: return "mean_rows";
        case OpKind::topk_select: return "topk_select";
        case OpKind::gather_rows: return "gather_rows";
        case OpKind::select_softmax: return "select_softmax";
        case OpKind::mixture: return "mixture";
        case OpKind::cv_squared: return "cv_squared";
        case OpKind::gather_cells: return "gather_cells";
        case OpKind::bce_with_logits: return "bce_with_logits";
        case OpKind::cross_entropy: return "cross_entropy";
        case OpKind::giou_loss: return "giou_loss";
        case OpKind::custom: return "custom";
    }
    return "unknown";
}

Var Graph::push(Node node) {
    node.id = nodes_.size();
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
}

Var Graph::input(std::string name, Tensor value) {
    Node n;
    n.kind = OpKind::input;
    n.name = std::move(name);
    n.value = std::move(value);
    return push(std::move(n));
}

Var Graph::param(std::string name, Tensor value) {
    Node n;
    n.kind = OpKind::parameter;
    n.name = std::move(name);
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
}

Var Graph::constant(Tensor value) {
    Node n;
    n.kind = OpKind::constant;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Graph::record(OpKind kind, std::vector<Var> inputs, Tensor value, BackwardFn backward, bool differentiable) {
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.differentiable = differentiable;
    n.inputs.reserve(inputs.size());
    for (auto v : inputs) {
        if (v.id >= nodes_.size()) throw Error(Errc::missing_tensor, std::string(to_string(kind)) + " refers to an unknown node");
        n.inputs.push_back(v.id);
        const Node& in = nodes_[v.id];
        if (differentiable && in.requires_grad) n.requires_grad = true;
        if (in.gated || (!differentiable && in.requires_grad)) n.gated = true;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
}

const Graph::Node& Graph::node(Var v) const {
    if (v.id >= nodes_.size()) throw Error(Errc::missing_tensor, "unknown graph node");
    return nodes_[v.id];
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Graph::grad(Var v) const {
    const auto& n = node(v);
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return Tensor(n.value.shape(), n.grad);
}

std::vector<double>& Graph::grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return n.grad;
}

void Graph::backward(Var loss) {
    const auto& l = node(loss);
    if (l.value.numel() != 1) {
        throw Error(Errc::non_scalar_loss, "loss has shape " + shape_str(l.value.shape()));
    }
    if (!l.differentiable) {
        throw Error(Errc::backward_through_nondifferentiable,
                    std::string("cannot differentiate the output of ") + std::string(to_string(l.kind)));
    }
    if (!l.requires_grad && l.gated) {
        throw Error(Errc::backward_through_nondifferentiable, "loss reaches parameters only through an index selection");
    }
    for (auto& n : nodes_) n.grad.clear();
    if (!l.requires_grad) return;
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        const Node& n = nodes_[i];
        if (n.grad.empty() || !n.backward) continue;
        n.backward(*this, n);
    }
}

}  // namespace mdf
