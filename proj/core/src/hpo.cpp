#include "mdf/hpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "mdf/error.hpp"
#include "mdf/stats.hpp"

namespace mdf::hpo {

// ----------------------------------------------------------------- space ---

Dimension Dimension::integer(std::string name, std::int64_t low, std::int64_t high) {
    return {std::move(name), Kind::integer, static_cast<double>(low), static_cast<double>(high), {}};
}

Dimension Dimension::real(std::string name, double low, double high) {
    return {std::move(name), Kind::real, low, high, {}};
}

Dimension Dimension::log_real(std::string name, double low, double high) {
    return {std::move(name), Kind::log_real, low, high, {}};
}

Dimension Dimension::categorical(std::string name, std::vector<nlohmann::json> choices) {
    return {std::move(name), Kind::categorical, 0.0, 0.0, std::move(choices)};
}

bool Dimension::contains(const nlohmann::json& v) const {
    if (kind == Kind::categorical) return std::find(choices.begin(), choices.end(), v) != choices.end();
    if (!v.is_number()) return false;
    const double x = v.get<double>();
    if (kind == Kind::integer && (!v.is_number_integer() || std::floor(x) != x)) return false;
    return x >= low && x <= high;
}

void SearchSpace::validate() const {
    if (dims.empty()) throw Error(Errc::empty_space, "search space has no dimensions");
    for (const auto& d : dims) {
        const bool empty = d.kind == Dimension::Kind::categorical ? d.choices.empty()
                                                                  : !(d.low <= d.high) || (d.kind == Dimension::Kind::log_real && d.low <= 0);
        if (empty) throw Error(Errc::empty_space, "dimension '" + d.name + "' admits no value");
    }
}

bool SearchSpace::contains(const Config& config) const {
    for (const auto& d : dims) {
        if (!config.contains(d.name) || !d.contains(config.at(d.name))) return false;
    }
    return true;
}

const Dimension* SearchSpace::find(std::string_view name) const {
    for (const auto& d : dims)
        if (d.name == name) return &d;
    return nullptr;
}

SearchSpace default_space() {
    using D = Dimension;
    return {{
        D::categorical("imgsz", {320, 480, 640, 960}),
        D::integer("batch", 2, 16),
        D::categorical("optimizer", {"sgd-momentum", "adamw"}),
        D::log_real("lr0", 1e-5, 1e-2),
        D::real("lrf", 0.01, 0.5),
        D::real("momentum", 0.85, 0.99),
        D::log_real("weight_decay", 1e-5, 1e-3),
        D::real("warmup_epochs", 0.0, 5.0),
        D::real("hsv_h", 0.0, 0.1),
        D::real("hsv_s", 0.0, 0.9),
        D::real("hsv_v", 0.0, 0.9),
        D::real("mosaic", 0.0, 1.0),
        D::real("mixup", 0.0, 0.3),
        D::real("degrees", 0.0, 10.0),
        D::real("translate", 0.0, 0.3),
    }};
}

SearchSpace desk_space(std::size_t image_size) {
    auto s = default_space();
    s.dims[0] = Dimension::categorical("imgsz", {image_size});
    return s;
}

Config reference_best_config() {
    return {{"imgsz", 960},         {"batch", 10},          {"optimizer", "adamw"},   {"lr0", 0.00108},
            {"lrf", 0.05947},       {"momentum", 0.90001},  {"weight_decay", 0.000282}, {"warmup_epochs", 3.487},
            {"hsv_h", 0.05574},     {"hsv_s", 0.44839},     {"hsv_v", 0.69333},       {"mosaic", 0.45098},
            {"mixup", 0.20653},     {"degrees", 1.64896},   {"translate", 0.18933}};
}

// ---------------------------------------------------------------- ledger ---

std::string_view to_string(TrialStatus s) noexcept {
    switch (s) {
        case TrialStatus::complete: return "complete";
        case TrialStatus::pruned: return "pruned";
        case TrialStatus::failed: return "failed";
    }
    return "failed";
}

nlohmann::json to_json(const TrialRecord& r) {
    nlohmann::json inter = nlohmann::json::array();
    for (const auto& [e, v] : r.intermediate) inter.push_back({e, v});
    nlohmann::json j{{"trial_id", r.trial_id},
                     {"seed", r.seed},
                     {"config", r.config},
                     {"intermediate", inter},
                     {"objective", r.objective ? nlohmann::json(*r.objective) : nlohmann::json()},
                     {"status", to_string(r.status)},
                     {"wall_time", r.wall_time}};
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

TrialRecord trial_from_json(const nlohmann::json& j) {
    try {
        TrialRecord r;
        r.trial_id = j.at("trial_id").get<std::size_t>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.config = j.at("config");
        for (const auto& p : j.at("intermediate")) r.intermediate.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<double>());
        if (!j.at("objective").is_null()) r.objective = j.at("objective").get<double>();
        const auto s = j.at("status").get<std::string>();
        r.status = s == "complete" ? TrialStatus::complete : s == "pruned" ? TrialStatus::pruned : TrialStatus::failed;
        r.wall_time = j.at("wall_time").get<double>();
        r.error = j.value("error", "");
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::invalid_argument, std::string("malformed trial record: ") + e.what());
    }
}

std::optional<std::size_t> StudyLedger::best_trial_id() const {
    std::optional<std::size_t> best;
    double value = -std::numeric_limits<double>::infinity();
    for (const auto& t : trials) {
        if (t.status == TrialStatus::complete && t.objective && *t.objective > value) {
            value = *t.objective;
            best = t.trial_id;
        }
    }
    return best;
}

std::vector<double> StudyLedger::best_so_far() const {
    std::vector<double> out;
    double best = std::numeric_limits<double>::quiet_NaN();
    for (const auto& t : trials) {
        if (t.status == TrialStatus::complete && t.objective && (std::isnan(best) || *t.objective > best)) best = *t.objective;
        out.push_back(best);
    }
    return out;
}

std::size_t StudyLedger::complete_count() const {
    return static_cast<std::size_t>(std::count_if(trials.begin(), trials.end(), [](const TrialRecord& t) {
        return t.status == TrialStatus::complete && t.objective;
    }));
}

std::string to_jsonl(const StudyLedger& ledger) {
    std::string out;
    for (const auto& t : ledger.trials) out += to_json(t).dump() + "\n";
    return out;
}

StudyLedger load_ledger(const std::filesystem::path& path, std::uint64_t seed) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
    StudyLedger ledger;
    ledger.seed = seed;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            ledger.trials.push_back(trial_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
        }
    }
    return ledger;
}

// --------------------------------------------------------------- sampler ---

namespace {

bool is_numeric(const Dimension& d) { return d.kind != Dimension::Kind::categorical; }

/// Internal coordinate: log for log dimensions, identity otherwise.
double to_internal(const Dimension& d, double x) { return d.kind == Dimension::Kind::log_real ? std::log(x) : x; }

nlohmann::json from_internal(const Dimension& d, double u) {
    switch (d.kind) {
        case Dimension::Kind::integer:
            return static_cast<std::int64_t>(std::clamp(std::round(u), d.low, d.high));
        case Dimension::Kind::log_real:
            return std::clamp(std::exp(u), d.low, d.high);
        default:
            return std::clamp(u, d.low, d.high);
    }
}

std::pair<double, double> internal_range(const Dimension& d) {
    if (d.kind == Dimension::Kind::integer) return {d.low - 0.5, d.high + 0.5};
    return {to_internal(d, d.low), to_internal(d, d.high)};
}

nlohmann::json sample_uniform(const Dimension& d, std::mt19937_64& rng) {
    if (d.kind == Dimension::Kind::categorical) {
        std::uniform_int_distribution<std::size_t> pick(0, d.choices.size() - 1);
        return d.choices[pick(rng)];
    }
    if (d.kind == Dimension::Kind::integer) {
        std::uniform_int_distribution<std::int64_t> pick(static_cast<std::int64_t>(d.low), static_cast<std::int64_t>(d.high));
        return pick(rng);
    }
    const auto [lo, hi] = internal_range(d);
    if (lo == hi) return from_internal(d, lo);
    std::uniform_real_distribution<double> u(lo, hi);
    return from_internal(d, u(rng));
}

/// Gaussian kernels at the points plus one uniform prior component.
struct Parzen {
    std::vector<double> points;
    double lo = 0, hi = 1, sigma = 1;

    Parzen(std::vector<double> pts, double lo_, double hi_) : points(std::move(pts)), lo(lo_), hi(hi_) {
        const double range = hi - lo;
        const double n = static_cast<double>(std::max<std::size_t>(points.size(), 1));
        sigma = std::clamp(0.5 * range * std::pow(n, -0.2), 0.02 * range, range);
    }

    [[nodiscard]] double density(double u) const {
        double s = 1.0 / (hi - lo);
        for (double p : points) {
            const double z = (u - p) / sigma;
            s += std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
        }
        return s / static_cast<double>(points.size() + 1);
    }

    double sample(std::mt19937_64& rng) const {
        std::uniform_int_distribution<std::size_t> comp(0, points.size());
        const std::size_t k = comp(rng);
        if (k == points.size()) return std::uniform_real_distribution<double>(lo, hi)(rng);
        std::normal_distribution<double> nd(points[k], sigma);
        for (int tries = 0; tries < 20; ++tries) {
            const double u = nd(rng);
            if (u >= lo && u <= hi) return u;
        }
        return std::clamp(points[k], lo, hi);
    }
};

std::size_t choice_index(const Dimension& d, const nlohmann::json& v) {
    return static_cast<std::size_t>(std::find(d.choices.begin(), d.choices.end(), v) - d.choices.begin());
}

}  // namespace

Config sample_config(const SearchSpace& space, std::mt19937_64& rng, const StudyLedger& history, const SamplerOptions& opts) {
    space.validate();
    std::vector<const TrialRecord*> done;
    for (const auto& t : history.trials)
        if (t.status == TrialStatus::complete && t.objective && space.contains(t.config)) done.push_back(&t);

    Config out = Config::object();
    if (done.size() < std::max<std::size_t>(opts.n_startup, 2)) {
        for (const auto& d : space.dims) out[d.name] = sample_uniform(d, rng);
        return out;
    }

    std::stable_sort(done.begin(), done.end(), [](const TrialRecord* a, const TrialRecord* b) { return *a->objective > *b->objective; });
    const auto n_good = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(opts.gamma * static_cast<double>(done.size()))), 1,
                                                done.size() - 1);
    const std::span<const TrialRecord* const> good(done.data(), n_good), bad(done.data() + n_good, done.size() - n_good);

    for (const auto& d : space.dims) {
        if (d.kind == Dimension::Kind::categorical) {
            const std::size_t K = d.choices.size();
            if (K == 1) {
                out[d.name] = d.choices[0];
                continue;
            }
            std::vector<double> pg(K, 1.0), pb(K, 1.0);
            for (const auto* t : good) pg[choice_index(d, t->config.at(d.name))] += 1.0;
            for (const auto* t : bad) pb[choice_index(d, t->config.at(d.name))] += 1.0;
            const double sg = std::accumulate(pg.begin(), pg.end(), 0.0), sb = std::accumulate(pb.begin(), pb.end(), 0.0);
            std::discrete_distribution<std::size_t> draw(pg.begin(), pg.end());
            std::size_t best = 0;
            double best_ratio = -1.0;
            for (std::size_t c = 0; c < opts.candidates; ++c) {
                const std::size_t k = draw(rng);
                const double ratio = (pg[k] / sg) / (pb[k] / sb);
                if (ratio > best_ratio) best_ratio = ratio, best = k;
            }
            out[d.name] = d.choices[best];
            continue;
        }
        const auto [lo, hi] = internal_range(d);
        if (d.low == d.high) {
            out[d.name] = from_internal(d, to_internal(d, d.low));
            continue;
        }
        auto coords = [&](std::span<const TrialRecord* const> set) {
            std::vector<double> v;
            for (const auto* t : set) v.push_back(to_internal(d, t->config.at(d.name).get<double>()));
            return v;
        };
        const Parzen l(coords(good), lo, hi), g(coords(bad), lo, hi);
        double best_u = lo, best_ratio = -1.0;
        for (std::size_t c = 0; c < opts.candidates; ++c) {
            const double u = l.sample(rng);
            const double ratio = l.density(u) / g.density(u);
            if (ratio > best_ratio) best_ratio = ratio, best_u = u;
        }
        out[d.name] = from_internal(d, best_u);
    }
    return out;
}

// ---------------------------------------------------------------- pruner ---

bool should_prune(std::size_t epoch, double value, const StudyLedger& history) {
    if (epoch < kPrunerWarmupEpochs) return false;
    std::vector<double> prior;
    for (const auto& t : history.trials) {
        if (t.status == TrialStatus::failed) continue;
        for (const auto& [e, v] : t.intermediate)
            if (e == epoch) prior.push_back(v);
    }
    if (prior.empty()) return false;
    std::sort(prior.begin(), prior.end());
    const std::size_t n = prior.size();
    const double median = n % 2 ? prior[n / 2] : 0.5 * (prior[n / 2 - 1] + prior[n / 2]);
    return value < median;
}

// ----------------------------------------------------------------- study ---

Clock steady_clock() {
    return [] { return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count(); };
}

std::uint64_t trial_seed(std::uint64_t study_seed, std::size_t trial_id) {
    // splitmix64 finaliser
    std::uint64_t z = study_seed + 0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(trial_id) + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

TrialRecord run_trial(const Config& config, const TrialRunner& runner, std::size_t trial_id, std::uint64_t seed,
                      const Pruner& pruner, const StudyLedger& history, const Clock& clock) {
    TrialRecord rec;
    rec.trial_id = trial_id;
    rec.seed = seed;
    rec.config = config;
    const double t0 = clock();
    bool pruned = false;
    const ReportFn report = [&](std::size_t epoch, double value) {
        rec.intermediate.emplace_back(epoch, value);
        if (pruner && pruner(epoch, value, history)) pruned = true;
        return !pruned;
    };
    try {
        const double objective = runner(config, seed, report);
        if (pruned) {
            rec.status = TrialStatus::pruned;
        } else if (!std::isfinite(objective)) {
            rec.status = TrialStatus::failed;
            rec.error = "objective is not finite";
        } else {
            rec.status = TrialStatus::complete;
            rec.objective = objective;
        }
    } catch (const std::exception& e) {
        rec.status = TrialStatus::failed;
        rec.error = e.what();
    }
    rec.wall_time = clock() - t0;
    return rec;
}

StudyResult study(const SearchSpace& space, const TrialRunner& runner, std::size_t n_trials, std::uint64_t seed,
                  const StudyOptions& opts) {
    space.validate();
    if (n_trials == 0) throw Error(Errc::invalid_argument, "a study needs at least one trial");
    StudyResult res;
    res.ledger.seed = seed;
    std::ofstream ledger_file;
    if (opts.dir) {
        std::filesystem::create_directories(*opts.dir);
        ledger_file.open(*opts.dir / "trials.jsonl", std::ios::trunc);
        if (!ledger_file) throw Error(Errc::io_failure, "cannot write " + (*opts.dir / "trials.jsonl").string());
    }
    for (std::size_t id = 0; id < n_trials; ++id) {
        const std::uint64_t ts = trial_seed(seed, id);
        std::mt19937_64 rng(ts ^ 0x5bd1e995ull);
        const Config cfg = sample_config(space, rng, res.ledger, opts.sampler);
        auto rec = run_trial(cfg, runner, id, ts, opts.pruner, res.ledger, opts.clock);
        res.ledger.trials.push_back(std::move(rec));
        if (ledger_file) ledger_file << to_json(res.ledger.trials.back()).dump() << "\n" << std::flush;
        if (opts.on_trial) opts.on_trial(res.ledger.trials.back());
    }
    const auto best = res.ledger.best_trial_id();
    if (!best) throw Error(Errc::all_trials_failed, "none of the " + std::to_string(n_trials) + " trials completed");
    res.best_trial = *best;
    res.best_config = res.ledger.trials[*best].config;
    res.best_objective = *res.ledger.trials[*best].objective;
    if (opts.dir) {
        std::ofstream out(*opts.dir / "best.config.json", std::ios::trunc);
        if (!out) throw Error(Errc::io_failure, "cannot write " + (*opts.dir / "best.config.json").string());
        out << nlohmann::json{{"trial_id", res.best_trial}, {"objective", res.best_objective}, {"config", res.best_config}}.dump(2)
            << "\n";
    }
    return res;
}

// ------------------------------------------------------------ importance ---

namespace {

double spearman(std::span<const double> x, std::span<const double> y) {
    const auto rx = midranks(x), ry = midranks(y);
    const double n = static_cast<double>(rx.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace

std::vector<std::pair<std::string, double>> param_importance(const StudyLedger& ledger, const SearchSpace& space) {
    std::vector<const TrialRecord*> done;
    for (const auto& t : ledger.trials)
        if (t.status == TrialStatus::complete && t.objective) done.push_back(&t);
    if (done.size() < 10) {
        throw Error(Errc::insufficient_trials, "importance needs 10 complete trials, have " + std::to_string(done.size()));
    }
    std::vector<double> y;
    for (const auto* t : done) y.push_back(*t->objective);

    std::vector<std::pair<std::string, double>> out;
    double total = 0.0;
    for (const auto& d : space.dims) {
        double w = 0.0;
        if (is_numeric(d)) {
            std::vector<double> x;
            for (const auto* t : done) x.push_back(t->config.at(d.name).get<double>());
            w = std::abs(spearman(x, y));
        } else {
            for (const auto& level : d.choices) {
                std::vector<double> x;
                for (const auto* t : done) x.push_back(t->config.at(d.name) == level ? 1.0 : 0.0);
                w = std::max(w, std::abs(spearman(x, y)));
            }
        }
        out.emplace_back(d.name, w);
        total += w;
    }
    for (auto& [_, w] : out) w = total > 0 ? w / total : 1.0 / static_cast<double>(out.size());
    return out;
}

// ------------------------------------------------------ detector objective ---

TrainConfig apply_config(const Config& config, const TrainConfig& base) { return train_config_from_json(config, base); }

TrialRunner detector_runner(std::shared_ptr<const DetectorObjective> objective) {
    return [objective](const Config& config, std::uint64_t seed, const ReportFn& report) {
        const auto& obj = *objective;
        TrainConfig tc = apply_config(config, obj.base);
        tc.epochs = obj.budget_epochs;
        tc.seed = seed;
        ModelConfig mc = obj.model;
        if (config.contains("imgsz") && config.at("imgsz").get<std::size_t>() != mc.input_size) {
            throw Error(Errc::training_failure, "imgsz " + config.at("imgsz").dump() + " does not match the dataset image size " +
                                                    std::to_string(mc.input_size));
        }
        Model model = build_model(mc, seed);
        TrainHooks hooks;
        hooks.on_epoch = [&](const EpochRecord& r) { return report(r.epoch + 1, r.val_map5095); };
        const auto result = train(model, obj.train_set, obj.val_set, tc, hooks);
        return result.history.back().val_map5095;
    };
}

}  // namespace mdf::hpo
