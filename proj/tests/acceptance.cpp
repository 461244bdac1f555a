// Acceptance suite: one PASS/FAIL line per criterion.
//
//   mdf_acceptance [criterion...]     (no arguments runs everything)
//
// Exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mdf/agent.hpp"
#include "mdf/detector.hpp"
#include "mdf/error.hpp"
#include "mdf/hpo.hpp"
#include "mdf/metrics.hpp"
#include "mdf/moe.hpp"
#include "mdf/stats.hpp"
#include "support/moe_cases.hpp"
#include "support/moe_oracle.hpp"
#include "support/op_cases.hpp"
#include "support/paired_fixture.hpp"

using namespace mdf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Stopwatch {
public:
    [[nodiscard]] double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string six(double v) { return fmt("%.6f", v); }

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ------------------------------------------------------------- gradients ---

Outcome gradient_fidelity() {
    Stopwatch sw;
    std::mt19937_64 rng(2024);
    double worst_op = 0.0;
    std::string worst_name;
    std::size_t instances = 0, resampled = 0;
    std::set<OpKind> covered;
    for (const auto& c : mdf::testing::differentiable_op_cases()) {
        for (int i = 0; i < 20;) {
            const auto [params, inputs] = mdf::testing::draw_instance(c, rng);
            if (i == 0) {
                Graph g;
                NamedVars pv, iv;
                for (const auto& [k, t] : params) pv.emplace(k, g.param(k, t));
                for (const auto& [k, t] : inputs) iv.emplace(k, g.input(k, t));
                c.fn(g, pv, iv);
                for (const auto& n : g.nodes())
                    if (n.differentiable) covered.insert(n.kind);
            }
            try {
                const auto r = finite_diff_check(c.fn, params, inputs, "loss", {});
                if (r.max_relative_error > worst_op) worst_op = r.max_relative_error, worst_name = c.name;
                ++instances;
                ++i;
            } catch (const Error& e) {
                if (e.code() != Errc::tie_at_checkpoint) throw;
                ++resampled;
            }
        }
    }

    std::vector<std::string> missing;
    for (int k = static_cast<int>(OpKind::conv2d); k < static_cast<int>(OpKind::custom); ++k) {
        const auto kind = static_cast<OpKind>(k);
        if (kind == OpKind::topk_select) continue;  // integer indices, no gradient
        if (!covered.contains(kind)) missing.emplace_back(to_string(kind));
    }

    double worst_moe = 0.0;
    std::size_t moe_checked = 0;
    while (moe_checked < 5) {
        const std::size_t E = moe_checked % 2 ? 4 : 3, K = moe_checked % 3 + 1 > E ? E : moe_checked % 3 + 1;
        auto inst = mdf::testing::random_moe(rng, E, K, 3);
        if (mdf::testing::routing_margin(inst) < 1e-3) continue;
        const auto r = finite_diff_check(mdf::testing::moe_block_fn(inst), inst.store.params, {{"x", inst.features}}, "loss",
                                         {.tolerance = 1e-4});
        worst_moe = std::max(worst_moe, r.max_relative_error);
        ++moe_checked;
    }

    const double t = sw.seconds();
    std::string miss;
    for (const auto& m : missing) miss += " " + m;
    return {worst_op < 1e-5 && worst_moe < 1e-4 && missing.empty() && t < 60.0,
            fmt("ops max_rel=%.2e (%s) over %zu instances, moe block max_rel=%.2e over %zu, uncovered kinds:%s, %zu tie "
                "resamples, %.1fs (limits 1e-5, 1e-4, 60s)",
                worst_op, worst_name.c_str(), instances, worst_moe, moe_checked, missing.empty() ? " none" : miss.c_str(),
                resampled, t)};
}

// --------------------------------------------------------------- routing ---

/// Lowest index first among equal logits, then descending.
std::vector<std::size_t> reference_topk(const std::vector<double>& z, std::size_t k) {
    std::vector<std::size_t> idx(z.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
    idx.resize(k);
    return idx;
}

Outcome routing_invariants() {
    Stopwatch sw;
    std::mt19937_64 rng(77);
    std::size_t forwards = 0, violations = 0, tie_cases = 0;
    double worst_sum = 0.0;
    const std::vector<std::size_t> experts{2, 4, 8};
    for (; forwards < 1000; ++forwards) {
        const std::size_t E = experts[forwards % 3];
        const std::vector<std::size_t> ks{1, 2, E};
        const std::size_t K = ks[(forwards / 3) % 3];
        const std::size_t B = 1 + forwards % 4;
        auto inst = mdf::testing::random_moe(rng, E, K, B, 4, 2, 2);
        const bool tied = forwards % 10 == 0;
        if (tied) {
            // Constant router output: every logit equals the shared bias.
            for (auto& v : inst.store.params.at("moe.router.fc2.weight").data()) v = 0.0;
            for (auto& v : inst.store.params.at("moe.router.fc2.bias").data()) v = 0.25;
            ++tie_cases;
        }

        auto run = [&](MoETrace& trace) {
            Graph g;
            Context ctx(g, inst.store, false);
            return g.value(moe_forward(ctx, g.input("x", inst.features), inst.cfg, nullptr, 0, &trace));
        };
        MoETrace trace, again;
        const Tensor y1 = run(trace);
        const Tensor y2 = run(again);
        if (!(y1 == y2)) ++violations;

        for (std::size_t b = 0; b < B; ++b) {
            const auto& d = trace.decisions[b];
            const std::set<std::size_t> distinct(d.selected.begin(), d.selected.end());
            if (d.selected.size() != K || distinct.size() != K) ++violations;
            if (d.selected != reference_topk(d.logits, K)) ++violations;
            if (d.selected != again.decisions[b].selected) ++violations;
            double s = 0.0;
            for (double w : d.weights) s += w;
            worst_sum = std::max(worst_sum, std::abs(s - 1.0));
            if (std::abs(s - 1.0) > 1e-9) ++violations;
        }
        for (std::size_t e = 0; e < E; ++e) {
            std::vector<std::size_t> expected;
            for (std::size_t b = 0; b < B; ++b) {
                const auto& sel = trace.decisions[b].selected;
                if (std::find(sel.begin(), sel.end(), e) != sel.end()) expected.push_back(b);
            }
            if (trace.expert_samples[e] != expected) ++violations;
        }
    }
    const double t = sw.seconds();
    return {violations == 0 && t < 30.0,
            fmt("%zu forwards (%zu with tied logits), %zu violations, max |sum(alpha)-1|=%.1e, %.1fs (limit 30s)", forwards,
                tie_cases, violations, worst_sum, t)};
}

// ------------------------------------------------------------- balancing ---

Outcome balancing_loss() {
    std::vector<std::string> bad;
    for (std::size_t E : {2, 4, 8, 16}) {
        const std::vector<double> uniform(E, 1.0 / static_cast<double>(E));
        if (aux_balance_loss({uniform, uniform}) != 0.0) bad.push_back(fmt("uniform E=%zu", E));
        std::vector<double> onehot(E, 0.0);
        onehot[E / 2] = 1.0;
        const double target = static_cast<double>(E) - 1.0;
        if (std::abs(cv_squared(onehot) - target) > 1e-12) bad.push_back(fmt("one-hot E=%zu", E));
        if (std::abs(aux_balance_loss({onehot, onehot}) - 2.0 * target) > 1e-12) bad.push_back(fmt("one-hot sum E=%zu", E));
    }
    for (double lambda0 : {0.01, 0.5}) {
        for (std::size_t T : {100, 250}) {
            if (warmup_weight(0, lambda0, T) != 0.0) bad.push_back("lambda(0)");
            if (warmup_weight(T / 2, lambda0, T) != lambda0 * static_cast<double>(T / 2) / static_cast<double>(T))
                bad.push_back("lambda(T/2)");
            if (warmup_weight(T, lambda0, T) != lambda0) bad.push_back("lambda(T)");
            if (warmup_weight(3 * T, lambda0, T) != lambda0) bad.push_back("lambda(3T)");
        }
    }
    std::string which;
    for (const auto& b : bad) which += " " + b;
    return {bad.empty(), bad.empty() ? "uniform 0 exact, one-hot CV^2 = E-1 for E in {2,4,8,16}, warmup endpoints and "
                                       "midpoint exact"
                                     : "mismatches:" + which};
}

// ------------------------------------------------------------ moe oracle ---

Outcome moe_oracle() {
    std::mt19937_64 rng(99);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const std::size_t E = 2 + static_cast<std::size_t>(i % 7);
        const std::size_t K = 1 + static_cast<std::size_t>(i % static_cast<int>(E));
        auto inst = mdf::testing::random_moe(rng, E, K, 1 + static_cast<std::size_t>(i % 3));
        Graph g;
        Context ctx(g, inst.store, false);
        const Tensor& y = g.value(moe_forward(ctx, g.input("x", inst.features), inst.cfg, nullptr, 0));
        const Tensor ref = mdf::testing::dense_moe_oracle(inst.store, inst.features, inst.cfg);
        for (std::size_t k = 0; k < y.numel(); ++k) worst = std::max(worst, std::abs(y[k] - ref[k]));
    }
    return {worst <= 1e-10, fmt("100 instances, max |sparse - dense| = %.2e (limit 1e-10)", worst)};
}

// --------------------------------------------------------------- metrics ---

Outcome metric_fidelity() {
    const double f1a = f1_score(0.9555, 0.9255), f1b = f1_score(0.9701, 0.9635);
    const bool f1_ok = std::abs(f1a - 0.9403) <= 5e-5 && std::abs(f1b - 0.9668) <= 5e-5;

    const Box b{0.5, 0.5, 0.2, 0.2}, far{0.1, 0.1, 0.05, 0.05};
    const std::vector<GroundTruth> g{{0, 0, b}};
    const double ap_single = average_precision({{0, 0, 0.9, b}}, g, 0.5).ap;
    const double ap_fp_first = average_precision({{0, 0, 0.95, far}, {0, 0, 0.9, b}}, g, 0.5).ap;

    // IoU exactly 0.6 against one ground truth: mAP over the ten thresholds
    // is the fraction of thresholds the match survives.
    const GroundTruth gt{0, 0, {0.3125, 0.5, 0.625, 0.5}};
    const Detection det{0, 0, 0.9, {0.1875, 0.5, 0.375, 0.5}};
    const double overlap = iou(det.box, gt.box);
    std::size_t surviving = 0;
    for (int k = 0; k < 10; ++k) surviving += overlap >= 0.5 + 0.05 * k - 1e-12 ? 1 : 0;
    const double oracle = static_cast<double>(surviving) / 10.0;
    const double m = map_at({det}, {gt}, coco_thresholds()).map;

    const bool pass = f1_ok && ap_single == 1.0 && ap_fp_first == 0.5 && overlap == 0.6 && m == oracle && m == 0.3;
    return {pass, fmt("f1=%.4f,%.4f (0.9403,0.9668 +-5e-5); AP single=%g fp-above-tp=%g; mAP@[.5:.95]=%g oracle=%g", f1a, f1b,
                      ap_single, ap_fp_first, m, oracle)};
}

// ----------------------------------------------------------------- stats ---

Outcome stats_fidelity() {
    Stopwatch sw;
    std::vector<std::string> bad;

    const auto all10 = mdf::testing::signed_rank_pairs(10, {});
    const auto all8 = mdf::testing::signed_rank_pairs(8, {});
    const double p10 = wilcoxon_signed_rank(all10.a, all10.b).p_value;
    const double p8 = wilcoxon_signed_rank(all8.a, all8.b).p_value;
    if (p10 != 2.0 / 1024.0 || six(p10) != "0.001953") bad.push_back("n=10 p");
    if (p8 != 2.0 / 256.0 || six(p8) != "0.007812") bad.push_back("n=8 p");

    // Precision family of the comparison fixture: raw p per baseline, then Holm.
    const auto [a, bs] = mdf::testing::comparison_fixture();
    std::vector<double> raw;
    for (const auto& b : bs) {
        const auto& bv = b.metrics.at("precision");
        const std::vector<double> av(a.metrics.at("precision").begin(), a.metrics.at("precision").begin() + bv.size());
        raw.push_back(wilcoxon_signed_rank(av, bv).p_value);
    }
    const std::vector<std::string> raw_col{"0.001953", "0.001953", "0.009766", "0.193359", "0.007812"};
    const std::vector<std::string> adj_col{"0.009766", "0.009766", "0.023438", "0.193359", "0.023438"};
    const auto adj = holm_adjust(raw);
    for (std::size_t i = 0; i < 5; ++i) {
        if (six(raw[i]) != raw_col[i]) bad.push_back("raw " + std::to_string(i));
        if (six(adj[i]) != adj_col[i]) bad.push_back("holm " + std::to_string(i));
    }

    // Two-pass oracle for the moments on 50-sample fixtures.
    std::mt19937_64 rng(5150);
    std::normal_distribution<double> nd(0.95, 0.01);
    double worst = 0.0;
    for (int f = 0; f < 20; ++f) {
        std::vector<double> v(50);
        for (auto& x : v) x = nd(rng);
        const auto s = describe(v);
        const double n = 50.0;
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= n;
        double m2 = 0.0, m3 = 0.0, m4 = 0.0;
        for (double x : v) {
            const double d = x - mean;
            m2 += d * d;
            m3 += d * d * d;
            m4 += d * d * d * d;
        }
        const double var = m2 / (n - 1.0);
        const double g1 = (m3 / n) / std::pow(m2 / n, 1.5);
        const double skew = g1 * std::sqrt(n * (n - 1.0)) / (n - 2.0);
        const double g2 = (m4 / n) / ((m2 / n) * (m2 / n)) - 3.0;
        const double kurt = (n - 1.0) / ((n - 2.0) * (n - 3.0)) * ((n + 1.0) * g2 + 6.0);
        auto sorted = v;
        std::sort(sorted.begin(), sorted.end());
        const auto pct = [&](double q) {
            const double h = (n - 1.0) * q;
            const auto lo = static_cast<std::size_t>(std::floor(h));
            return lo + 1 < sorted.size() ? sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo])
                                          : sorted[lo];
        };
        for (double e : {s.mean - mean, s.variance - var, s.std_dev - std::sqrt(var), s.skewness - skew,
                         s.kurtosis - kurt, s.median - pct(0.5), s.p25 - pct(0.25), s.p75 - pct(0.75),
                         s.range - (sorted.back() - sorted.front())})
            worst = std::max(worst, std::abs(e));
    }
    if (worst > 1e-10) bad.push_back("describe");

    const double t = sw.seconds();
    std::string which;
    for (const auto& b : bad) which += " " + b;
    return {bad.empty() && t < 10.0,
            fmt("p(n=10)=%s p(n=8)=%s, holm=[%s %s %s %s %s], describe max err %.1e, %.2fs%s", six(p10).c_str(),
                six(p8).c_str(), six(adj[0]).c_str(), six(adj[1]).c_str(), six(adj[2]).c_str(), six(adj[3]).c_str(),
                six(adj[4]).c_str(), worst, t, which.empty() ? "" : (", mismatches:" + which).c_str())};
}

// -------------------------------------------------------------- training ---

struct Split {
    std::vector<LabeledImage> train, val;
};

Split synthetic_split(std::uint64_t seed) {
    SyntheticSpec spec;
    spec.seed = seed;
    Split s;
    for (std::size_t i = 0; i < spec.train; ++i) s.train.push_back(synthesize_image(spec, "train", i));
    for (std::size_t i = 0; i < spec.val; ++i) s.val.push_back(synthesize_image(spec, "val", i));
    return s;
}

struct RunResult {
    double train_map50 = 0, val_map50 = 0, seconds = 0;
    std::size_t steps = 0;
    double final_entropy = 0;
};

RunResult train_run(Variant variant, std::uint64_t seed, double lambda0, const Split& data) {
    Stopwatch sw;
    ModelConfig mc;
    mc.variant = variant;
    mc.moe.lambda0 = lambda0;
    Model m = build_model(mc, seed);
    TrainConfig tc;
    tc.seed = seed;
    tc.batch = 16;
    tc.lr0 = 0.01;
    tc.lrf = 0.05;
    tc.momentum = 0.9;
    tc.warmup_epochs = 2;
    tc.max_steps = 500;
    const std::size_t per_epoch = (data.train.size() + tc.batch - 1) / tc.batch;
    tc.epochs = (tc.max_steps + per_epoch - 1) / per_epoch;
    tc.patience = tc.epochs + 1;
    const auto res = train(m, data.train, data.val, tc, {.evaluate = [](Model&) { return SplitScore{}; }});
    RunResult r;
    r.steps = res.steps;
    r.train_map50 = score_split(m, data.train).map50;
    r.val_map50 = score_split(m, data.val).map50;
    if (res.history.back().load_entropy) r.final_entropy = *res.history.back().load_entropy;
    r.seconds = sw.seconds();
    return r;
}

constexpr std::size_t kSeeds = 5;

struct TrainingRuns {
    std::vector<RunResult> baseline, moe, moe_unbalanced;
};

TrainingRuns& training_runs(bool need_unbalanced) {
    static TrainingRuns runs;
    static bool unbalanced_done = false;
    if (runs.baseline.empty()) {
        for (std::uint64_t s = 0; s < kSeeds; ++s) {
            const auto data = synthetic_split(s);
            runs.baseline.push_back(train_run(Variant::baseline, s, 0.01, data));
            runs.moe.push_back(train_run(Variant::moe, s, 0.01, data));
            std::fprintf(stderr, "  seed %zu: baseline train %.3f val %.3f (%.0fs), moe train %.3f val %.3f (%.0fs)\n",
                         static_cast<std::size_t>(s), runs.baseline.back().train_map50, runs.baseline.back().val_map50,
                         runs.baseline.back().seconds, runs.moe.back().train_map50, runs.moe.back().val_map50,
                         runs.moe.back().seconds);
        }
    }
    if (need_unbalanced && !unbalanced_done) {
        for (std::uint64_t s = 0; s < kSeeds; ++s) {
            runs.moe_unbalanced.push_back(train_run(Variant::moe, s, 0.0, synthetic_split(s)));
            std::fprintf(stderr, "  seed %zu: load entropy lambda0=0.01 %.4f, lambda0=0 %.4f\n",
                         static_cast<std::size_t>(s), runs.moe[s].final_entropy, runs.moe_unbalanced.back().final_entropy);
        }
        unbalanced_done = true;
    }
    return runs;
}

Outcome end_to_end() {
    const auto& runs = training_runs(false);
    bool fit = true;
    double min_train = 1.0, base_time = 0, moe_time = 0;
    std::size_t max_steps = 0;
    std::vector<double> base_val, moe_val;
    for (std::size_t s = 0; s < kSeeds; ++s) {
        for (const auto* r : {&runs.baseline[s], &runs.moe[s]}) {
            fit = fit && r->train_map50 >= 0.90 && r->steps <= 500;
            min_train = std::min(min_train, r->train_map50);
            max_steps = std::max(max_steps, r->steps);
        }
        base_val.push_back(runs.baseline[s].val_map50);
        moe_val.push_back(runs.moe[s].val_map50);
        base_time += runs.baseline[s].seconds;
        moe_time += runs.moe[s].seconds;
    }
    const double mb = median_of(base_val), mm = median_of(moe_val);
    const bool close = mm >= mb - 0.05;
    return {fit && close && base_time < 600 && moe_time < 600,
            fmt("min train mAP@0.5 %.3f (>=0.90) in <=%zu steps (<=500); val mAP@0.5 median baseline %.3f, moe %.3f "
                "(gap %+.3f, >= -0.05); %.0fs baseline, %.0fs moe for %zu seeds (limit 600s each)",
                min_train, max_steps, mb, mm, mm - mb, base_time, moe_time, kSeeds)};
}

Outcome balancing_direction() {
    const auto& runs = training_runs(true);
    std::vector<double> with, without, diff;
    for (std::size_t s = 0; s < kSeeds; ++s) {
        with.push_back(runs.moe[s].final_entropy);
        without.push_back(runs.moe_unbalanced[s].final_entropy);
        diff.push_back(with.back() - without.back());
    }
    const double a = median_of(with), b = median_of(without);
    return {a >= b, fmt("final-epoch load entropy median: lambda0=0.01 %.4f, lambda0=0 %.4f (paired median diff %+.4f, "
                        "max ln4=%.4f)",
                        a, b, median_of(diff), std::log(4.0))};
}

// ------------------------------------------------------------------- hpo ---

hpo::Clock ticking_clock() {
    auto t = std::make_shared<double>(0.0);
    return [t] { return *t += 1.0; };
}

Outcome hpo_study() {
    Stopwatch sw;
    SyntheticSpec spec;
    auto objective = std::make_shared<hpo::DetectorObjective>();
    for (std::size_t i = 0; i < spec.train; ++i) objective->train_set.push_back(synthesize_image(spec, "train", i));
    for (std::size_t i = 0; i < spec.val; ++i) objective->val_set.push_back(synthesize_image(spec, "val", i));
    objective->budget_epochs = 8;

    const auto dir = fs::temp_directory_path() / "mdf_acceptance_hpo";
    fs::remove_all(dir);
    const auto space = hpo::desk_space(64);
    const auto first = hpo::study(space, hpo::detector_runner(objective), 20, 0, {.clock = ticking_clock(), .dir = dir});
    const double first_time = sw.seconds();

    const auto curve = first.ledger.best_so_far();
    bool monotone = true;
    for (std::size_t i = 1; i < curve.size(); ++i)
        if (!std::isnan(curve[i - 1]) && !(curve[i] >= curve[i - 1])) monotone = false;

    const auto replay = hpo::study(space, hpo::detector_runner(objective), 20, 0, {.clock = ticking_clock()});
    std::ifstream in(dir / "trials.jsonl");
    std::stringstream file;
    file << in.rdbuf();
    const bool identical = hpo::to_jsonl(replay.ledger) == hpo::to_jsonl(first.ledger) && file.str() == hpo::to_jsonl(first.ledger) &&
                           hpo::to_jsonl(hpo::load_ledger(dir / "trials.jsonl", 0)) == file.str();

    const auto reference = hpo::reference_best_config();
    std::vector<std::string> inadmissible;
    const auto full = hpo::default_space();
    for (const auto& [k, v] : reference.items()) {
        const auto* d = full.find(k);
        if (d == nullptr || !d->contains(v)) inadmissible.push_back(k);
    }
    const bool admissible = inadmissible.empty() && full.contains(reference);

    // Each pruned trial must have been below the median of earlier trials at its last reported epoch.
    std::size_t pruned = 0, justified = 0;
    for (const auto& t : first.ledger.trials) {
        if (t.status != hpo::TrialStatus::pruned) continue;
        ++pruned;
        const auto [epoch, value] = t.intermediate.back();
        std::vector<double> prior;
        for (const auto& u : first.ledger.trials) {
            if (u.trial_id >= t.trial_id) break;
            if (u.status == hpo::TrialStatus::failed) continue;
            for (const auto& [e, v] : u.intermediate)
                if (e == epoch) prior.push_back(v);
        }
        if (!prior.empty() && value < median_of(prior)) ++justified;
    }

    std::size_t complete = first.ledger.complete_count();
    return {monotone && identical && admissible && pruned >= 1 && justified == pruned && first_time < 900.0,
            fmt("20 trials (%zu complete, %zu pruned, %zu below median), best mAP@[.5:.95] %.4f, monotone=%s, replay "
                "identical=%s, reference config admissible=%s (%zu keys), %.0fs per study (limit 900s)",
                complete, pruned, justified, first.best_objective, monotone ? "yes" : "no", identical ? "yes" : "no",
                admissible ? "yes" : "no", reference.size(), first_time)};
}

// ----------------------------------------------------------------- agent ---

std::vector<std::string> fuzz_actions(std::size_t n, std::uint64_t seed) {
    const std::string base = R"({"tool_call":{"name":"yolo_optuna_tune","arguments":{"data":"d.yaml","trials":50}}})";
    std::mt19937_64 rng(seed);
    std::vector<std::string> out;
    const std::vector<std::string> whole{
        R"({"tool_call":{"name":"yolo_optuna_tune","arguments":{"data":"d.yaml"}}})",
        R"({"tool_call":{"name":"yolo_optuna_tune","arguments":{"data":"d.yaml","trials":"50"}}})",
        R"({"tool_call":{"name":"yolo_optuna_tune","arguments":{"data":"d.yaml","trials":50,"force":true}}})",
        R"({"tool_call":{"name":"yolo_optuna_tune","arguments":{"data":"d.yaml","trials":50}},"why":"x"})",
        R"({"tool_call":{"name":"yolo_optuna_tune","name":"yolo_eval_test","arguments":{}}})",
        R"({"tool_call":{"name":"yolo_eval_test","arguments":{"data":1,"checkpoint":"c"}}})",
        R"({"tool_call":{"name":"yolo_infer_visualize","arguments":{"checkpoint":"c"}}})",
        R"({"tool_call":{"name":"yolo_train_final","arguments":{"data":"d","params":[]}}})",
        R"({"tool":{"name":"yolo_optuna_tune","arguments":{}}})",
        R"({"tool_call":null})",
        R"(Action: {"tool_call":{"name":"yolo_optuna_tune","arguments":{"data":"d.yaml","trials":50}}})",
    };
    for (std::size_t i = 0; i < n; ++i) {
        std::string text;
        switch (i % 6) {
            case 0:
                text = base.substr(0, rng() % base.size());
                break;
            case 1: {
                text = base;
                std::vector<std::size_t> pos;
                for (std::size_t p = 0; p < text.size(); ++p)
                    if (std::string_view("{}\":,").find(text[p]) != std::string_view::npos) pos.push_back(p);
                text.erase(pos[rng() % pos.size()], 1);
                break;
            }
            case 2:
                text = base;
                text.replace(text.find("yolo_optuna_tune"), 16, "shell_" + std::to_string(rng() % 1000));
                break;
            case 3:
                text = whole[rng() % whole.size()];
                break;
            case 4:
                text = base + std::string(1 + rng() % 3, "}],x"[rng() % 4]);
                break;
            default: {
                std::uniform_int_distribution<int> ch(32, 126);
                text.resize(1 + rng() % 80);
                for (auto& c : text) c = static_cast<char>(ch(rng));
            }
        }
        out.push_back(std::move(text));
    }
    return out;
}

Outcome agent_protocol() {
    Stopwatch sw;
    using namespace mdf::agent;
    const auto root = fs::temp_directory_path() / "mdf_acceptance_agent";
    fs::remove_all(root);
    SyntheticSpec spec;
    spec.seed = 11;
    spec.train = 60;
    spec.val = 20;
    spec.test = 20;
    const auto yaml = generate_synthetic(spec, root / "data").yaml_path;

    auto make_config = [&] {
        PipelineConfig c;
        c.runs_dir = root / "runs";
        c.seed = 4;
        c.tune_epochs = 4;
        c.final_epochs = 40;
        c.clock = ticking_clock();
        return c;
    };

    const auto reg = pipeline_registry(make_config());
    const auto call = parse_tool_call(R"({"tool_call":{"name":"yolo_optuna_tune","arguments":{"data":"d.yaml","trials":50}}})", reg);
    const bool schema_ok = call.name == "yolo_optuna_tune" && call.arguments.at("trials") == 50;

    std::size_t rejected = 0;
    const auto fuzz = fuzz_actions(1000, 31337);
    for (const auto& text : fuzz) {
        try {
            reg.execute(parse_tool_call(text, reg));
        } catch (const Error& e) {
            const auto c = e.code();
            rejected += c == Errc::malformed_json || c == Errc::extra_top_level_keys || c == Errc::unknown_tool ||
                        c == Errc::argument_schema_violation;
        }
    }
    const bool fuzz_ok = rejected == fuzz.size() && reg.executions() == 0;

    auto session = [&](const fs::path& dir) {
        const auto r = pipeline_registry(make_config());
        ScriptedPolicy policy(pipeline_script(yaml.string(), 8, yaml.string()));
        return run_session(policy, r, {.seed = 4, .session_dir = dir});
    };
    const auto first = session(root / "runs" / "session" / "a");
    std::ifstream t1(first.transcript_path);
    std::stringstream transcript1;
    transcript1 << t1.rdbuf();
    const auto second = session(root / "runs" / "session" / "a");
    std::ifstream t2(second.transcript_path);
    std::stringstream transcript2;
    transcript2 << t2.rdbuf();

    const std::vector<std::string> order{"yolo_optuna_tune", "yolo_train_final", "yolo_eval_test", "yolo_infer_visualize"};
    bool artifacts_ok = !first.artifacts.empty();
    for (const auto& a : first.artifacts) artifacts_ok = artifacts_ok && fs::exists(a);
    const bool populated = first.complete() && first.tool_calls == order && first.best_value.has_value() &&
                           fs::exists(first.best_checkpoint) && first.test_metrics.contains("map50") && artifacts_ok;
    const bool replay = to_json(first) == to_json(second) && transcript1.str() == transcript2.str();
    const double t = sw.seconds();
    return {schema_ok && fuzz_ok && populated && replay && t < 1200.0,
            fmt("schema example parses=%s; %zu/%zu fuzzed inputs rejected, %zu executions; sequence %s, test mAP@0.5 %.3f, "
                "%zu artifacts; replay identical=%s; %.0fs (limit 1200s)",
                schema_ok ? "yes" : "no", rejected, fuzz.size(), reg.executions(),
                first.tool_calls == order ? "tune->train->eval->visualize" : "WRONG", first.test_metrics.value("map50", 0.0),
                first.artifacts.size(), replay ? "yes" : "no", t)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient-fidelity", gradient_fidelity},   {"routing-invariants", routing_invariants},
        {"balancing-loss", balancing_loss},         {"moe-forward-oracle", moe_oracle},
        {"metric-fidelity", metric_fidelity},       {"statistics-fidelity", stats_fidelity},
        {"end-to-end-training", end_to_end},        {"hpo-study", hpo_study},
        {"agent-protocol", agent_protocol},         {"expert-balancing-direction", balancing_direction},
    };
    std::set<std::string> selected(argv + 1, argv + argc);
    for (const auto& s : selected) {
        if (std::none_of(criteria.begin(), criteria.end(), [&](const auto& c) { return c.first == s; })) {
            std::fprintf(stderr, "unknown criterion: %s\n", s.c_str());
            return 2;
        }
    }
    int failures = 0;
    for (const auto& [name, fn] : criteria) {
        if (!selected.empty() && !selected.contains(name)) continue;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
        std::fflush(stdout);
        failures += o.pass ? 0 : 1;
    }
    return failures == 0 ? 0 : 1;
}
