#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mdf/tensor.hpp"

namespace mdf {

enum class OpKind {
    input,
    parameter,
    constant,
    conv2d,
    pointwise_conv,
    linear,
    batch_norm2d,
    silu,
    sigmoid,
    softmax,
    global_avg_pool,
    upsample_nearest2x,
    concat_channels,
    add,
    sub,
    mul,
    scale,
    reduce_sum,
    reduce_mean,
    mean_rows,
    topk_select,
    gather_rows,
    select_softmax,
    mixture,
    cv_squared,
    gather_cells,
    bce_with_logits,
    cross_entropy,
    giou_loss,
    custom,
};

std::string_view to_string(OpKind kind) noexcept;

/// Handle to a node in a Graph.
struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
    friend bool operator==(Var, Var) = default;
};

/// Define-by-run tape. Nodes are appended in evaluation order, so the node list
/// is topologically sorted by construction. Values are immutable once recorded;
/// only gradient slots change during backward().
class Graph {
public:
    struct Node;
    using BackwardFn = std::function<void(Graph&, const Node&)>;

    struct Node {
        OpKind kind = OpKind::constant;
        std::string name;
        std::vector<std::size_t> inputs;
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        bool differentiable = true;
        /// Some path to a gradient-carrying leaf is cut by a non-differentiable op.
        bool gated = false;
        BackwardFn backward;
        std::size_t id = 0;
    };

    explicit Graph(std::uint64_t seed = 0) : seed_(seed) {}

    Var input(std::string name, Tensor value);
    Var param(std::string name, Tensor value);
    Var constant(Tensor value);

    /// Appends an op result. requires_grad is inherited from the inputs unless
    /// the op is non-differentiable.
    Var record(OpKind kind, std::vector<Var> inputs, Tensor value, BackwardFn backward,
               bool differentiable = true);

    [[nodiscard]] const Tensor& value(Var v) const;
    [[nodiscard]] const Node& node(Var v) const;
    [[nodiscard]] bool requires_grad(Var v) const;

    /// Gradient of the last backward() loss w.r.t. v; zeros when untouched.
    [[nodiscard]] Tensor grad(Var v) const;

    /// Accumulation buffer for node `id`, zero-initialised on first access.
    std::vector<double>& grad_buffer(std::size_t id);

    /// Reverse-mode sweep from a one-element loss. Clears earlier gradients.
    void backward(Var loss);

    [[nodiscard]] const std::vector<Node>& nodes() const noexcept { return nodes_; }
    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

    /// Smallest gap between the k-th and (k+1)-th logit seen by any top-k op.
    [[nodiscard]] double min_topk_margin() const noexcept { return min_topk_margin_; }
    void note_topk_margin(double margin) noexcept {
        if (margin < min_topk_margin_) min_topk_margin_ = margin;
    }

private:
    Var push(Node node);

    std::vector<Node> nodes_;
    std::uint64_t seed_;
    double min_topk_margin_ = std::numeric_limits<double>::infinity();
};

}  // namespace mdf
