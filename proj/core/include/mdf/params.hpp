#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "mdf/graph.hpp"
#include "mdf/ops.hpp"

namespace mdf {

using NamedTensors = std::map<std::string, Tensor>;
using NamedVars = std::map<std::string, Var>;

/// Trainable parameters plus non-trainable buffers (batch-norm running stats).
struct ParamStore {
    NamedTensors params;
    NamedTensors buffers;

    [[nodiscard]] std::size_t parameter_count() const;
};

/// Kaiming-uniform fill for a weight with the given fan-in (gain sqrt(2)).
Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

/// Binds parameters of a ParamStore into a Graph on first use and carries the
/// train/eval switch for one forward pass.
class Context {
public:
    Context(Graph& graph, ParamStore& store, bool training) : graph_(graph), store_(store), training_(training) {}

    [[nodiscard]] Graph& graph() noexcept { return graph_; }
    [[nodiscard]] bool training() const noexcept { return training_; }

    /// Running-stat updates are disabled for gradient checks, which replay the
    /// same forward many times.
    void set_update_running_stats(bool on) noexcept { update_running_ = on; }

    Var param(const std::string& name);
    /// Pre-binds graph variables so param() returns them instead of reading the store.
    void bind(const NamedVars& vars) { bound_.insert(vars.begin(), vars.end()); }
    ops::BatchNormBuffers bn_buffers(const std::string& prefix);
    [[nodiscard]] ops::BatchNormOptions bn_options() const;

    [[nodiscard]] const NamedVars& bound() const noexcept { return bound_; }

    /// Gradients of every bound parameter after graph().backward().
    [[nodiscard]] NamedTensors gradients() const;

private:
    Graph& graph_;
    ParamStore& store_;
    bool training_;
    bool update_running_ = true;
    NamedVars bound_;
};

/// Var lookup that raises missing-tensor with the offending name.
Var lookup(const NamedVars& vars, const std::string& name);

}  // namespace mdf
