#include "mdf/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mdf/error.hpp"

namespace mdf {

namespace {

struct Bound {
    NamedVars params;
    NamedVars inputs;
};

Bound bind(Graph& g, const NamedTensors& params, const NamedTensors& inputs) {
    Bound b;
    for (const auto& [name, t] : params) b.params.emplace(name, g.param(name, t));
    for (const auto& [name, t] : inputs) b.inputs.emplace(name, g.input(name, t));
    return b;
}

double loss_value(const GraphFn& fn, const NamedTensors& params, const NamedTensors& inputs, const std::string& loss) {
    Graph g;
    auto b = bind(g, params, inputs);
    auto out = fn(g, b.params, b.inputs);
    return g.value(lookup(out, loss)).item();
}

}  // namespace

NamedTensors evaluate(const GraphFn& fn, const NamedTensors& params, const NamedTensors& inputs, std::uint64_t seed) {
    Graph g(seed);
    auto b = bind(g, params, inputs);
    NamedTensors result;
    for (const auto& [name, v] : fn(g, b.params, b.inputs)) result.emplace(name, g.value(v));
    return result;
}

NamedTensors backprop(const GraphFn& fn, const NamedTensors& params, const NamedTensors& inputs, const std::string& loss) {
    Graph g;
    auto b = bind(g, params, inputs);
    auto out = fn(g, b.params, b.inputs);
    g.backward(lookup(out, loss));
    NamedTensors grads;
    for (const auto& [name, v] : b.params) grads.emplace(name, g.grad(v));
    return grads;
}

GradCheckReport finite_diff_check(const GraphFn& fn, const NamedTensors& params, const NamedTensors& inputs,
                                  const std::string& loss, const GradCheckOptions& opts) {
    if (!(opts.step > 0.0) || opts.step > 1e-3) {
        throw Error(Errc::invalid_argument, "finite-difference step must lie in (0, 1e-3]");
    }
    NamedTensors analytic;
    {
        Graph g;
        auto b = bind(g, params, inputs);
        auto out = fn(g, b.params, b.inputs);
        if (g.min_topk_margin() < opts.min_topk_margin) {
            throw Error(Errc::tie_at_checkpoint, "top-k margin " + std::to_string(g.min_topk_margin()) +
                                                     " below " + std::to_string(opts.min_topk_margin) + "; resample the point");
        }
        g.backward(lookup(out, loss));
        for (const auto& [name, v] : b.params) analytic.emplace(name, g.grad(v));
    }

    GradCheckReport report;
    NamedTensors probe = params;
    for (auto& [name, tensor] : probe) {
        const Tensor& a = analytic.at(name);
        for (std::size_t i = 0; i < tensor.numel(); ++i) {
            const double orig = tensor[i];
            tensor[i] = orig + opts.step;
            const double up = loss_value(fn, probe, inputs, loss);
            tensor[i] = orig - opts.step;
            const double down = loss_value(fn, probe, inputs, loss);
            tensor[i] = orig;
            const double fd = (up - down) / (2.0 * opts.step);
            const double denom = std::max({1e-8, std::abs(a[i]), std::abs(fd)});
            const double rel = std::abs(a[i] - fd) / denom;
            ++report.checked;
            if (report.worst_param.empty() || rel > report.max_relative_error) {
                report.max_relative_error = rel;
                report.worst_param = name;
                report.worst_index = i;
            }
        }
    }
    report.pass = report.max_relative_error < opts.tolerance;
    return report;
}

}  // namespace mdf
