#include "mdf/moe.hpp"

#include <algorithm>
#include <cmath>

#include "layers.hpp"
#include "mdf/error.hpp"
#include "mdf/ops.hpp"

namespace mdf {

void MoEConfig::validate() const {
    if (num_experts == 0 || top_k == 0 || top_k > num_experts) {
        throw Error(Errc::invalid_argument, "MoE requires 1 <= K <= E, got K=" + std::to_string(top_k) +
                                                " E=" + std::to_string(num_experts));
    }
    if (in_channels == 0 || hidden_channels == 0 || out_channels == 0) {
        throw Error(Errc::invalid_argument, "MoE channel widths must be positive");
    }
    if (warmup_iters == 0) throw Error(Errc::invalid_argument, "MoE warmup_iters must be >= 1");
    if (!(lambda0 >= 0.0)) throw Error(Errc::invalid_argument, "MoE lambda0 must be nonnegative");
}

std::size_t MoEConfig::router_hidden() const { return std::max<std::size_t>(in_channels / 4, 8); }

Var AuxLossCollector::drain(Graph& g) {
    if (pending_.empty()) {
        if (strict_) ++warnings_;
        return g.constant(Tensor::scalar(0.0));
    }
    Var sum = pending_.front();
    for (std::size_t i = 1; i < pending_.size(); ++i) sum = ops::add(g, sum, pending_[i]);
    pending_.clear();
    return sum;
}

Var drain_collector(Graph& g, AuxLossCollector& collector) { return collector.drain(g); }

void init_moe_params(ParamStore& store, const MoEConfig& cfg, std::mt19937_64& rng, const std::string& prefix) {
    cfg.validate();
    const std::size_t hidden = cfg.router_hidden();
    layers::add_linear(store, prefix + ".router.fc1", hidden, cfg.in_channels, rng);
    layers::add_linear(store, prefix + ".router.fc2", cfg.num_experts, hidden, rng);
    for (std::size_t e = 0; e < cfg.num_experts; ++e) {
        const std::string name = prefix + ".expert" + std::to_string(e);
        layers::add_conv_bn_silu(store, name, cfg.hidden_channels, cfg.in_channels, rng);
        layers::add_pointwise(store, name + ".proj", cfg.out_channels, cfg.hidden_channels, rng);
    }
}

Var router_logits(Context& ctx, Var features, const MoEConfig& cfg, const std::string& prefix) {
    Graph& g = ctx.graph();
    const Tensor& fv = g.value(features);
    if (fv.rank() != 4 || fv.dim(1) != cfg.in_channels) {
        throw Error(Errc::channel_mismatch, "MoE expects " + std::to_string(cfg.in_channels) + " input channels, got " +
                                                shape_str(fv.shape()));
    }
    Var pooled = ops::global_avg_pool(g, features);
    Var h = ops::silu(g, layers::linear(ctx, pooled, prefix + ".router.fc1"));
    return layers::linear(ctx, h, prefix + ".router.fc2");
}

Var expert_forward(Context& ctx, Var x, std::size_t expert, const std::string& prefix) {
    const std::string name = prefix + ".expert" + std::to_string(expert);
    Var h = layers::conv_bn_silu(ctx, x, name, 1);
    return layers::pointwise(ctx, h, name + ".proj");
}

RoutingDecision decide(std::span<const double> logits, std::size_t top_k) {
    RoutingDecision d;
    d.logits.assign(logits.begin(), logits.end());
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    d.probs.resize(logits.size());
    for (std::size_t e = 0; e < logits.size(); ++e) s += d.probs[e] = std::exp(logits[e] - mx);
    for (double& p : d.probs) p /= s;
    d.selected = ops::topk_row(logits, top_k);
    const double top = logits[d.selected.front()];
    double z = 0.0;
    for (std::size_t idx : d.selected) z += std::exp(logits[idx] - top);
    for (std::size_t idx : d.selected) d.weights.push_back(std::exp(logits[idx] - top) / z);
    return d;
}

std::vector<RoutingDecision> route(const Tensor& features, const MoEConfig& cfg, ParamStore& store,
                                   const std::string& prefix) {
    cfg.validate();
    Graph g;
    Context ctx(g, store, false);
    const Tensor& z = g.value(router_logits(ctx, g.input("features", features), cfg, prefix));
    const std::size_t B = z.dim(0), E = z.dim(1);
    std::vector<RoutingDecision> out;
    out.reserve(B);
    for (std::size_t b = 0; b < B; ++b) out.push_back(decide(z.data().subspan(b * E, E), cfg.top_k));
    return out;
}

BatchRoutingStats routing_stats(const std::vector<RoutingDecision>& decisions, std::size_t num_experts) {
    BatchRoutingStats s;
    s.importance.assign(num_experts, 0.0);
    s.load.assign(num_experts, 0.0);
    if (decisions.empty()) return s;
    const double B = static_cast<double>(decisions.size());
    const double K = static_cast<double>(decisions.front().selected.size());
    for (const auto& d : decisions) {
        for (std::size_t e = 0; e < num_experts; ++e) s.importance[e] += d.probs[e];
        for (std::size_t idx : d.selected) s.load[idx] += 1.0;
    }
    for (double& v : s.importance) v /= B;
    for (double& v : s.load) v /= B * K;
    return s;
}

Var moe_forward(Context& ctx, Var features, const MoEConfig& cfg, AuxLossCollector* collector, std::size_t iter,
                MoETrace* trace, const std::string& prefix) {
    cfg.validate();
    if (ctx.training() && collector == nullptr) {
        throw Error(Errc::collector_missing, "moe_forward in training mode needs an auxiliary-loss collector");
    }
    Graph& g = ctx.graph();
    const std::size_t E = cfg.num_experts, K = cfg.top_k;

    Var logits = router_logits(ctx, features, cfg, prefix);
    Var probs = ops::softmax(g, logits, 1);
    Var chosen = ops::topk_select(g, logits, K);
    Var alpha = ops::select_softmax(g, logits, chosen);
    const auto picks = ops::topk_indices(g, chosen);
    const std::size_t B = picks.size();

    // Group samples by expert so each expert runs once on exactly its rows.
    std::vector<std::vector<std::size_t>> rows(E);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t e : picks[b]) rows[e].push_back(b);

    std::vector<Var> outputs;
    std::vector<std::size_t> source_of(E, 0);
    for (std::size_t e = 0; e < E; ++e) {
        if (rows[e].empty()) continue;
        Var xe = rows[e].size() == B ? features : ops::gather_rows(g, features, rows[e]);
        source_of[e] = outputs.size();
        outputs.push_back(expert_forward(ctx, xe, e, prefix));
    }

    std::vector<std::vector<ops::MixtureSlot>> slots(B);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t e : picks[b]) {
            const auto pos = std::lower_bound(rows[e].begin(), rows[e].end(), b) - rows[e].begin();
            slots[b].push_back({source_of[e], static_cast<std::size_t>(pos)});
        }
    }
    Var out = ops::mixture(g, outputs, slots, alpha);

    std::vector<RoutingDecision> decisions;
    const Tensor& zv = g.value(logits);
    for (std::size_t b = 0; b < B; ++b) decisions.push_back(decide(zv.data().subspan(b * E, E), K));
    BatchRoutingStats stats = routing_stats(decisions, E);

    double aux_value = 0.0;
    const double lambda = warmup_weight(iter, cfg.lambda0, cfg.warmup_iters);
    if (ctx.training()) {
        Var importance = ops::mean_rows(g, probs);
        Var load = g.constant(Tensor({E}, stats.load));
        Var aux = ops::add(g, ops::cv_squared(g, importance), ops::cv_squared(g, load));
        aux_value = g.value(aux).item();
        collector->push(ops::scale(g, aux, lambda));
    } else {
        aux_value = aux_balance_loss(stats);
    }

    if (trace) {
        trace->decisions = std::move(decisions);
        trace->stats = std::move(stats);
        trace->expert_samples = std::move(rows);
        trace->aux_loss = aux_value;
        trace->lambda = lambda;
    }
    return out;
}

double cv_squared(std::span<const double> v) {
    if (v.empty()) throw Error(Errc::invalid_argument, "cv_squared of an empty vector");
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    if (mean == 0.0) throw Error(Errc::zero_mean_vector, "cv_squared of a zero-mean vector");
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= n;
    return var / (mean * mean);
}

double aux_balance_loss(const BatchRoutingStats& stats) { return cv_squared(stats.importance) + cv_squared(stats.load); }

double warmup_weight(std::size_t t, double lambda0, std::size_t warmup_iters) {
    if (t >= warmup_iters) return lambda0;
    return lambda0 * (static_cast<double>(t) / static_cast<double>(warmup_iters));
}

double load_entropy(std::span<const double> load) {
    double total = 0.0;
    for (double v : load) total += v;
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (double v : load) {
        if (v > 0.0) {
            const double p = v / total;
            h -= p * std::log(p);
        }
    }
    return h;
}

}  // namespace mdf
