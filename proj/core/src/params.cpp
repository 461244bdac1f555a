#include "mdf/params.hpp"

#include <cmath>

#include "mdf/error.hpp"

namespace mdf {

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params) n += t.numel();
    return n;
}

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

Var Context::param(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    auto it = store_.params.find(name);
    if (it == store_.params.end()) throw Error(Errc::missing_tensor, "parameter '" + name + "' not in store");
    Var v = graph_.param(name, it->second);
    bound_.emplace(name, v);
    return v;
}

ops::BatchNormBuffers Context::bn_buffers(const std::string& prefix) {
    auto mean = store_.buffers.find(prefix + ".running_mean");
    auto var = store_.buffers.find(prefix + ".running_var");
    if (mean == store_.buffers.end() || var == store_.buffers.end()) {
        throw Error(Errc::missing_tensor, "batch-norm buffers for '" + prefix + "' not in store");
    }
    return {&mean->second.storage(), &var->second.storage()};
}

ops::BatchNormOptions Context::bn_options() const {
    ops::BatchNormOptions o;
    o.training = training_;
    o.update_running = update_running_;
    return o;
}

NamedTensors Context::gradients() const {
    NamedTensors out;
    for (const auto& [name, v] : bound_) out.emplace(name, graph_.grad(v));
    return out;
}

Var lookup(const NamedVars& vars, const std::string& name) {
    auto it = vars.find(name);
    if (it == vars.end()) throw Error(Errc::missing_tensor, "tensor '" + name + "' was not provided");
    return it->second;
}

}  // namespace mdf
