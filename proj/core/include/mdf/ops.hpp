#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mdf/graph.hpp"

namespace mdf::ops {

// Shapes: x is (B, C, H, W); conv weights are (C_out, C_in, k, k); pointwise
// weights (C_out, C_in); linear weights (out, in) applied to (N, in).

Var conv2d(Graph& g, Var x, Var weight, std::optional<Var> bias, std::size_t stride, std::size_t pad);
Var pointwise_conv(Graph& g, Var x, Var weight, std::optional<Var> bias);
Var linear(Graph& g, Var x, Var weight, std::optional<Var> bias);

/// Running statistics owned by the caller; updated in place in training mode.
struct BatchNormBuffers {
    std::vector<double>* running_mean = nullptr;
    std::vector<double>* running_var = nullptr;
};

struct BatchNormOptions {
    bool training = false;
    bool update_running = true;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-channel affine batch norm. Batch statistics are used only when
/// training with more than one sample; otherwise running statistics apply.
Var batch_norm2d(Graph& g, Var x, Var gamma, Var beta, BatchNormBuffers buffers, const BatchNormOptions& opts);

Var silu(Graph& g, Var x);
Var sigmoid(Graph& g, Var x);
Var softmax(Graph& g, Var x, std::size_t axis);
Var global_avg_pool(Graph& g, Var x);
Var upsample_nearest2x(Graph& g, Var x);
Var concat_channels(Graph& g, std::span<const Var> xs);

Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double factor);
Var reduce_sum(Graph& g, Var a);
Var reduce_mean(Graph& g, Var a);
/// Mean over axis 0 of an (N, E) tensor, giving (E).
Var mean_rows(Graph& g, Var a);

/// Indices of the k largest entries per row of an (N, E) tensor, descending,
/// lowest index first on ties. The result is an (N, k) node holding indices;
/// it carries no gradient.
Var topk_select(Graph& g, Var logits, std::size_t k);
std::vector<std::vector<std::size_t>> topk_indices(const Graph& g, Var topk);

/// Plain top-k on one row (same ordering rule as topk_select).
std::vector<std::size_t> topk_row(std::span<const double> row, std::size_t k);

/// Rows of x at the given axis-0 indices.
Var gather_rows(Graph& g, Var x, std::span<const std::size_t> rows);

/// Softmax over the logits gathered at `indices` for each row: (N, E) -> (N, k).
Var select_softmax(Graph& g, Var logits, Var indices);

/// One slot of a sparse mixture: sample row `row` of expert output `source`.
struct MixtureSlot {
    std::size_t source = 0;
    std::size_t row = 0;
};

/// out[b] = sum_j weights[b, j] * sources[slots[b][j].source][slots[b][j].row].
Var mixture(Graph& g, std::span<const Var> sources, const std::vector<std::vector<MixtureSlot>>& slots, Var weights);

/// Squared coefficient of variation with population variance: var(v) / mean(v)^2.
Var cv_squared(Graph& g, Var v);

/// Spatial position (batch, row, column) in a (B, C, H, W) map.
struct Cell {
    std::size_t b = 0, y = 0, x = 0;
};

/// Channel vectors at the given cells: (B, C, H, W) -> (P, C).
Var gather_cells(Graph& g, Var x, std::span<const Cell> cells);

/// Sum of binary cross-entropy between sigmoid(logits) and targets of the same shape.
Var bce_with_logits(Graph& g, Var logits, const Tensor& targets);

/// Sum over rows of -log softmax(logits)[label] for (P, C) logits.
Var cross_entropy(Graph& g, Var logits, std::span<const std::size_t> labels);

/// Grid placement of one predicted box. Raw parameters (tx, ty, tw, th) decode to
/// centre ((gx + sigmoid(tx)) * stride / size, ...) and side exp(tw) * 4 * stride / size.
struct BoxAnchor {
    double gx = 0, gy = 0, stride = 8, size = 64;
};

/// Axis-aligned box in normalised centre form.
struct BoxTarget {
    double cx = 0, cy = 0, w = 0, h = 0;
};

/// Sum over rows of (1 - GIoU) between the decoded (P, 4) parameters and the targets.
Var giou_loss(Graph& g, Var params, std::span<const BoxAnchor> anchors, std::span<const BoxTarget> targets);

}  // namespace mdf::ops
