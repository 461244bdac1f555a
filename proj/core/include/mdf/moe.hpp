#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mdf/params.hpp"

namespace mdf {

struct MoEConfig {
    std::size_t num_experts = 4;
    std::size_t top_k = 2;
    std::size_t in_channels = 0;
    std::size_t hidden_channels = 0;
    std::size_t out_channels = 0;
    double lambda0 = 0.01;
    std::size_t warmup_iters = 100;

    /// Throws invalid_argument unless 1 <= K <= E and all widths are positive.
    void validate() const;
    /// Router MLP width: C/4, never below 8.
    [[nodiscard]] std::size_t router_hidden() const;
};

struct RoutingDecision {
    std::vector<double> logits;
    std::vector<double> probs;
    std::vector<std::size_t> selected;  // descending logit order
    std::vector<double> weights;        // softmax over the selected logits
};

struct BatchRoutingStats {
    std::vector<double> importance;  // batch mean of probs, sums to 1
    std::vector<double> load;        // selection counts / (B*K), sums to 1
};

/// Per-iteration list of weighted auxiliary terms. Drained once per step.
class AuxLossCollector {
public:
    explicit AuxLossCollector(bool strict = true) : strict_(strict) {}

    void push(Var term) { pending_.push_back(term); }
    void reset() { pending_.clear(); }

    /// Sum of pending terms (a constant 0 when empty); leaves the collector
    /// empty. Draining an already-empty collector in strict mode counts a warning.
    Var drain(Graph& g);

    [[nodiscard]] bool empty() const noexcept { return pending_.empty(); }
    [[nodiscard]] std::size_t size() const noexcept { return pending_.size(); }
    [[nodiscard]] std::size_t double_drain_warnings() const noexcept { return warnings_; }

private:
    std::vector<Var> pending_;
    bool strict_;
    std::size_t warnings_ = 0;
};

/// What one moe_forward call did; filled when a trace is passed.
struct MoETrace {
    std::vector<RoutingDecision> decisions;
    BatchRoutingStats stats;
    /// Sample indices each expert actually ran on (empty when unselected).
    std::vector<std::vector<std::size_t>> expert_samples;
    double aux_loss = 0.0;
    double lambda = 0.0;
};

void init_moe_params(ParamStore& store, const MoEConfig& cfg, std::mt19937_64& rng, const std::string& prefix = "moe");

/// Router logits (B, E) for features (B, C, H, W).
Var router_logits(Context& ctx, Var features, const MoEConfig& cfg, const std::string& prefix = "moe");

/// One expert: conv3x3 -> batch norm -> SiLU -> pointwise projection.
Var expert_forward(Context& ctx, Var x, std::size_t expert, const std::string& prefix = "moe");

/// Top-K decision for one row of logits.
RoutingDecision decide(std::span<const double> logits, std::size_t top_k);

/// Inference-only routing of a feature batch with the stored parameters.
std::vector<RoutingDecision> route(const Tensor& features, const MoEConfig& cfg, ParamStore& store,
                                   const std::string& prefix = "moe");

BatchRoutingStats routing_stats(const std::vector<RoutingDecision>& decisions, std::size_t num_experts);

/// Sparse forward: each sample runs only its K selected experts and the
/// outputs are mixed with the selected-softmax weights. In training mode the
/// weighted balancing term lambda(iter) * L_aux is pushed to `collector`.
Var moe_forward(Context& ctx, Var features, const MoEConfig& cfg, AuxLossCollector* collector, std::size_t iter,
                MoETrace* trace = nullptr, const std::string& prefix = "moe");

/// Var_pop(v) / mean(v)^2.
double cv_squared(std::span<const double> v);

/// CV^2(importance) + CV^2(load).
double aux_balance_loss(const BatchRoutingStats& stats);

/// lambda0 * min(1, t / T_w).
double warmup_weight(std::size_t t, double lambda0, std::size_t warmup_iters);

Var drain_collector(Graph& g, AuxLossCollector& collector);

/// Shannon entropy (nats) of a load vector after normalising it to sum 1.
double load_entropy(std::span<const double> load);

}  // namespace mdf
