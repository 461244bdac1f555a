#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "mdf/params.hpp"

namespace mdf {

/// Builds a graph from bound parameters and inputs and returns its named outputs.
using GraphFn = std::function<NamedVars(Graph&, const NamedVars& params, const NamedVars& inputs)>;

/// Runs fn on a fresh graph. Repeated calls with equal arguments are bit-identical.
NamedTensors evaluate(const GraphFn& fn, const NamedTensors& params, const NamedTensors& inputs, std::uint64_t seed = 0);

/// Gradients of the scalar output `loss` with respect to every parameter.
NamedTensors backprop(const GraphFn& fn, const NamedTensors& params, const NamedTensors& inputs, const std::string& loss);

struct GradCheckReport {
    double max_relative_error = 0.0;
    bool pass = false;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-5;
    /// Any top-k op closer to a tie than this invalidates the check point.
    double min_topk_margin = 1e-3;
};

/// Compares backprop against central differences for every parameter entry.
/// Relative error is |a - f| / max(1e-8, |a|, |f|).
GradCheckReport finite_diff_check(const GraphFn& fn, const NamedTensors& params, const NamedTensors& inputs,
                                  const std::string& loss, const GradCheckOptions& opts);

}  // namespace mdf
