#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mdf/error.hpp"
#include "mdf/hpo.hpp"

using namespace mdf;
using namespace mdf::hpo;
namespace fs = std::filesystem;

namespace {

Errc code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("no error raised");
    return Errc::invalid_argument;
}

Clock ticking_clock() {
    auto t = std::make_shared<double>(0.0);
    return [t] { return *t += 1.0; };
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

TrialRecord reported(std::size_t id, std::vector<double> values, TrialStatus status = TrialStatus::complete) {
    TrialRecord r;
    r.trial_id = id;
    for (std::size_t e = 0; e < values.size(); ++e) r.intermediate.emplace_back(e + 1, values[e]);
    r.status = status;
    if (status == TrialStatus::complete) r.objective = values.back();
    return r;
}

/// Three epochs of a smooth function of the config; no training involved.
TrialRunner analytic_runner() {
    return [](const Config& c, std::uint64_t, const ReportFn& report) {
        const double lr = std::log10(c.at("lr0").get<double>());
        const double v = -(lr + 3.0) * (lr + 3.0) - 4.0 * std::pow(c.at("mosaic").get<double>() - 0.3, 2) +
                         (c.at("optimizer") == "adamw" ? 0.5 : 0.0);
        for (std::size_t e = 1; e <= 3; ++e)
            if (!report(e, v * (1.0 + 1.0 / static_cast<double>(e)))) return v;
        return v;
    };
}

SearchSpace small_space() {
    return {{Dimension::log_real("lr0", 1e-5, 1e-2), Dimension::real("mosaic", 0.0, 1.0),
             Dimension::categorical("optimizer", {"sgd-momentum", "adamw"}), Dimension::integer("batch", 2, 16)}};
}

}  // namespace

TEST_CASE("default space covers the reference best configuration") {
    const auto space = default_space();
    const auto best = reference_best_config();
    CHECK(space.dims.size() == 15);
    CHECK(best.size() == 15);
    for (const auto& d : space.dims) {
        CAPTURE(d.name);
        REQUIRE(best.contains(d.name));
        CHECK(d.contains(best.at(d.name)));
    }
    CHECK(space.contains(best));
    CHECK(best.at("imgsz") == 960);
    CHECK(best.at("batch") == 10);
    CHECK(best.at("optimizer") == "adamw");
    CHECK(best.at("lr0").get<double>() == doctest::Approx(0.00108));
    CHECK(best.at("lrf").get<double>() == doctest::Approx(0.05947));
    CHECK(best.at("momentum").get<double>() == doctest::Approx(0.90001));
    CHECK(best.at("weight_decay").get<double>() == doctest::Approx(0.000282));
    CHECK(best.at("warmup_epochs").get<double>() == doctest::Approx(3.487));
    CHECK(best.at("hsv_h").get<double>() == doctest::Approx(0.05574));
    CHECK(best.at("hsv_s").get<double>() == doctest::Approx(0.44839));
    CHECK(best.at("hsv_v").get<double>() == doctest::Approx(0.69333));
    CHECK(best.at("mosaic").get<double>() == doctest::Approx(0.45098));
    CHECK(best.at("mixup").get<double>() == doctest::Approx(0.20653));
    CHECK(best.at("degrees").get<double>() == doctest::Approx(1.64896));
    CHECK(best.at("translate").get<double>() == doctest::Approx(0.18933));

    const auto desk = desk_space(64);
    CHECK(desk.find("imgsz")->choices == std::vector<nlohmann::json>{64});
}

TEST_CASE("dimension membership") {
    const auto b = Dimension::integer("batch", 2, 16);
    CHECK(b.contains(2));
    CHECK(b.contains(16));
    CHECK_FALSE(b.contains(17));
    CHECK_FALSE(b.contains(4.5));
    CHECK_FALSE(b.contains("4"));
    const auto o = Dimension::categorical("optimizer", {"sgd-momentum", "adamw"});
    CHECK(o.contains("adamw"));
    CHECK_FALSE(o.contains("adam"));
}

TEST_CASE("empty spaces are rejected") {
    std::mt19937_64 rng(0);
    CHECK(code_of([&] { sample_config(SearchSpace{}, rng, {}); }) == Errc::empty_space);
    CHECK(code_of([&] { sample_config({{Dimension::real("x", 1.0, 0.0)}}, rng, {}); }) == Errc::empty_space);
    CHECK(code_of([&] { sample_config({{Dimension::categorical("c", {})}}, rng, {}); }) == Errc::empty_space);
}

TEST_CASE("singleton space yields that exact config") {
    const SearchSpace s{{Dimension::integer("batch", 8, 8), Dimension::real("lrf", 0.1, 0.1),
                         Dimension::log_real("lr0", 1e-3, 1e-3), Dimension::categorical("optimizer", {"adamw"})}};
    const Config expected{{"batch", 8}, {"lrf", 0.1}, {"lr0", 1e-3}, {"optimizer", "adamw"}};
    StudyLedger history;
    for (std::size_t i = 0; i < 15; ++i) {
        std::mt19937_64 rng(i);
        const auto c = sample_config(s, rng, history);
        CHECK(c == expected);
        auto r = reported(i, {static_cast<double>(i)});
        r.config = c;
        history.trials.push_back(r);
    }
}

TEST_CASE("sampling is deterministic given seed and history and stays in bounds") {
    const auto space = default_space();
    const auto res = study(space, analytic_runner(), 25, 3, {.pruner = {}, .clock = ticking_clock()});
    for (const auto& t : res.ledger.trials) CHECK(space.contains(t.config));
    std::mt19937_64 a(11), b(11);
    CHECK(sample_config(space, a, res.ledger) == sample_config(space, b, res.ledger));
}

TEST_CASE("the sampler exploits a log-scale optimum") {
    const SearchSpace space{{Dimension::log_real("lr0", 1e-5, 1e-2)}};
    const TrialRunner runner = [](const Config& c, std::uint64_t, const ReportFn&) {
        const double d = c.at("lr0").get<double>() - 0.001;
        return -d * d;
    };
    std::size_t improved = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto res = study(space, runner, 50, seed, {.pruner = {}, .clock = ticking_clock()});
        std::vector<double> first, last;
        for (std::size_t i = 0; i < 10; ++i) {
            first.push_back(std::abs(res.ledger.trials[i].config.at("lr0").get<double>() - 0.001));
            last.push_back(std::abs(res.ledger.trials[40 + i].config.at("lr0").get<double>() - 0.001));
        }
        improved += median_of(last) < median_of(first);
    }
    CHECK(improved == 5);
}

TEST_CASE("median pruner") {
    StudyLedger h;
    CHECK_FALSE(should_prune(3, 0.0, h));

    // Five prior trials at epoch 3: 1 2 3 4 5, median 3.
    for (std::size_t i = 0; i < 5; ++i) {
        const double v = static_cast<double>(i + 1);
        h.trials.push_back(reported(i, {v, v, v}, i == 0 ? TrialStatus::pruned : TrialStatus::complete));
    }
    CHECK(should_prune(3, 2.9, h));
    CHECK_FALSE(should_prune(3, 3.0, h));
    CHECK_FALSE(should_prune(3, 9.0, h));
    CHECK_FALSE(should_prune(1, 0.0, h));  // warmup
    CHECK(should_prune(2, 0.0, h));
    CHECK_FALSE(should_prune(4, 0.0, h));  // nobody reported at epoch 4

    // Even count: mean of the middle pair (3, 4).
    h.trials.push_back(reported(5, {6.0, 6.0, 6.0}));
    CHECK(should_prune(3, 3.4, h));
    CHECK_FALSE(should_prune(3, 3.5, h));

    // Failed trials do not count.
    h.trials.push_back(reported(6, {9.0, 9.0, 9.0}, TrialStatus::failed));
    CHECK_FALSE(should_prune(3, 3.5, h));
}

TEST_CASE("run_trial contracts") {
    const Config cfg{{"x", 1}};
    const TrialRunner runner = [](const Config&, std::uint64_t seed, const ReportFn& report) {
        const double v = static_cast<double>(seed % 7);
        for (std::size_t e = 1; e <= 4; ++e)
            if (!report(e, v + static_cast<double>(e))) break;
        return v + 4.0;
    };
    const TrialRunner one_epoch = [](const Config&, std::uint64_t, const ReportFn& report) {
        report(1, 0.5);
        return 0.5;
    };

    SUBCASE("budget of one epoch gives one report") {
        const auto r = run_trial(cfg, one_epoch, 0, 1, should_prune, {}, ticking_clock());
        CHECK(r.intermediate.size() == 1);
        CHECK(r.status == TrialStatus::complete);
        CHECK(r.objective == 0.5);
        CHECK(r.wall_time == 1.0);
    }
    SUBCASE("a pruner that always fires stops after the first report") {
        const Pruner always = [](std::size_t, double, const StudyLedger&) { return true; };
        const auto r = run_trial(cfg, runner, 0, 1, always, {}, ticking_clock());
        CHECK(r.status == TrialStatus::pruned);
        CHECK(r.intermediate.size() == 1);
        CHECK_FALSE(r.objective.has_value());
    }
    SUBCASE("repeat runs give identical records") {
        const auto a = run_trial(cfg, runner, 3, 12, should_prune, {}, ticking_clock());
        const auto b = run_trial(cfg, runner, 3, 12, should_prune, {}, ticking_clock());
        CHECK(to_json(a) == to_json(b));
        CHECK(a.objective == a.intermediate.back().second);
    }
    SUBCASE("runner failures are recorded") {
        const TrialRunner bad = [](const Config&, std::uint64_t, const ReportFn&) -> double {
            throw Error(Errc::training_failure, "diverged");
        };
        const auto r = run_trial(cfg, bad, 0, 1, should_prune, {}, ticking_clock());
        CHECK(r.status == TrialStatus::failed);
        CHECK(r.error.find("diverged") != std::string::npos);
        const TrialRunner nan = [](const Config&, std::uint64_t, const ReportFn&) { return std::nan(""); };
        CHECK(run_trial(cfg, nan, 0, 1, should_prune, {}, ticking_clock()).status == TrialStatus::failed);
    }
}

TEST_CASE("study ledger is append-only, monotone and replayable") {
    const auto dir = fs::temp_directory_path() / "mdf_test_hpo_study";
    fs::remove_all(dir);
    std::vector<std::string> snapshots;
    StudyOptions opts{.clock = ticking_clock(), .dir = dir};
    opts.on_trial = [&](const TrialRecord&) {
        std::ifstream in(dir / "trials.jsonl");
        std::stringstream ss;
        ss << in.rdbuf();
        snapshots.push_back(ss.str());
    };
    const auto res = study(small_space(), analytic_runner(), 30, 5, opts);
    REQUIRE(snapshots.size() == 30);
    for (std::size_t k = 1; k < snapshots.size(); ++k) CHECK(snapshots[k].starts_with(snapshots[k - 1]));
    CHECK(snapshots.back() == to_jsonl(res.ledger));

    const auto loaded = load_ledger(dir / "trials.jsonl", 5);
    CHECK(to_jsonl(loaded) == to_jsonl(res.ledger));

    std::ifstream best_in(dir / "best.config.json");
    const auto best = nlohmann::json::parse(best_in);
    CHECK(best.at("config") == res.best_config);

    const auto curve = res.ledger.best_so_far();
    for (std::size_t i = 1; i < curve.size(); ++i)
        if (!std::isnan(curve[i - 1])) CHECK(curve[i] >= curve[i - 1]);

    double best_value = -1e300;
    for (const auto& t : res.ledger.trials) {
        if (t.status == TrialStatus::complete) {
            best_value = std::max(best_value, *t.objective);
            CHECK(*t.objective == doctest::Approx(t.intermediate.back().second / (1.0 + 1.0 / 3.0)));
        }
        if (t.status == TrialStatus::pruned) CHECK(!t.intermediate.empty());
    }
    CHECK(res.best_objective == best_value);
    CHECK(curve.back() == best_value);

    const auto again = study(small_space(), analytic_runner(), 30, 5, {.clock = ticking_clock()});
    CHECK(to_jsonl(again.ledger) == to_jsonl(res.ledger));
    const auto other = study(small_space(), analytic_runner(), 30, 6, {.clock = ticking_clock()});
    CHECK(to_jsonl(other.ledger) != to_jsonl(res.ledger));
}

TEST_CASE("the pruner fires on a real study") {
    const auto res = study(small_space(), analytic_runner(), 30, 1, {.clock = ticking_clock()});
    const auto pruned = std::count_if(res.ledger.trials.begin(), res.ledger.trials.end(),
                                      [](const TrialRecord& t) { return t.status == TrialStatus::pruned; });
    CHECK(pruned > 0);
}

TEST_CASE("study edge cases") {
    const auto one = study(small_space(), analytic_runner(), 1, 2, {.clock = ticking_clock()});
    CHECK(one.ledger.trials.size() == 1);
    CHECK(one.best_config == one.ledger.trials[0].config);
    CHECK(one.best_trial == 0);

    const TrialRunner bad = [](const Config&, std::uint64_t, const ReportFn&) -> double {
        throw std::runtime_error("boom");
    };
    CHECK(code_of([&] { study(small_space(), bad, 3, 0, {.clock = ticking_clock()}); }) == Errc::all_trials_failed);
    CHECK(code_of([&] { study(small_space(), analytic_runner(), 0, 0); }) == Errc::invalid_argument);
}

TEST_CASE("twenty-trial studies beat their first trial") {
    std::size_t wins = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto res = study(small_space(), analytic_runner(), 20, seed, {.pruner = {}, .clock = ticking_clock()});
        wins += res.best_objective > *res.ledger.trials[0].objective;
    }
    CHECK(wins >= 8);
}

TEST_CASE("trial records round trip through json") {
    auto r = reported(4, {0.1, 0.25});
    r.seed = 99;
    r.config = {{"lr0", 0.001}, {"optimizer", "adamw"}};
    r.wall_time = 2.5;
    CHECK(to_json(trial_from_json(to_json(r))) == to_json(r));
    auto f = reported(5, {0.1}, TrialStatus::failed);
    f.error = "x";
    const auto back = trial_from_json(to_json(f));
    CHECK(back.status == TrialStatus::failed);
    CHECK(back.error == "x");
    CHECK_FALSE(back.objective.has_value());
    CHECK(code_of([] { trial_from_json({{"trial_id", 1}}); }) == Errc::invalid_argument);
}

TEST_CASE("parameter importance") {
    const SearchSpace space{{Dimension::real("a", 0, 1), Dimension::real("b", 0, 1), Dimension::integer("c", 0, 9),
                             Dimension::categorical("d", {"x", "y", "z"})}};
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    auto ledger_for = [&](auto objective) {
        StudyLedger l;
        for (std::size_t i = 0; i < 40; ++i) {
            TrialRecord r;
            r.trial_id = i;
            r.config = {{"a", u(rng)}, {"b", u(rng)}, {"c", static_cast<int>(rng() % 10)}, {"d", std::string(1, "xyz"[rng() % 3])}};
            r.objective = objective(r.config);
            l.trials.push_back(r);
        }
        return l;
    };
    auto weight = [](const auto& w, std::string_view name) {
        return std::find_if(w.begin(), w.end(), [&](const auto& p) { return p.first == name; })->second;
    };
    auto sum = [](const auto& w) {
        return std::accumulate(w.begin(), w.end(), 0.0, [](double s, const auto& p) { return s + p.second; });
    };

    const auto w = param_importance(ledger_for([](const Config& c) { return c.at("b").get<double>(); }), space);
    CHECK(sum(w) == doctest::Approx(1.0).epsilon(1e-9));
    for (const auto& [name, v] : w) {
        CHECK(v >= 0.0);
        if (name != "b") CHECK(v < weight(w, "b"));
    }

    const auto wd = param_importance(ledger_for([](const Config& c) { return c.at("d") == "y" ? 1.0 : 0.0; }), space);
    for (const auto& [name, v] : wd)
        if (name != "d") CHECK(v < weight(wd, "d"));

    const auto flat = param_importance(ledger_for([](const Config&) { return 0.5; }), space);
    for (const auto& [name, v] : flat) CHECK(v == doctest::Approx(0.25));

    for (std::uint64_t s = 0; s < 10; ++s) {
        rng.seed(s);
        const auto any = param_importance(ledger_for([&](const Config&) { return u(rng); }), space);
        CHECK(std::abs(sum(any) - 1.0) < 1e-9);
    }

    StudyLedger few = ledger_for([](const Config&) { return 0.0; });
    few.trials.resize(9);
    CHECK(code_of([&] { param_importance(few, space); }) == Errc::insufficient_trials);
}

TEST_CASE("detector objective reports every epoch") {
    SyntheticSpec spec;
    spec.seed = 2;
    std::vector<LabeledImage> tr, va;
    for (std::size_t i = 0; i < 8; ++i) tr.push_back(synthesize_image(spec, "train", i));
    for (std::size_t i = 0; i < 4; ++i) va.push_back(synthesize_image(spec, "val", i));
    auto obj = std::make_shared<DetectorObjective>();
    obj->train_set = tr;
    obj->val_set = va;
    obj->budget_epochs = 2;
    obj->base.batch = 4;
    const auto runner = detector_runner(obj);

    Config cfg = reference_best_config();
    cfg["imgsz"] = 64;
    cfg["batch"] = 4;
    const auto a = run_trial(cfg, runner, 0, 7, should_prune, {}, ticking_clock());
    const auto b = run_trial(cfg, runner, 0, 7, should_prune, {}, ticking_clock());
    REQUIRE(a.status == TrialStatus::complete);
    CHECK(a.intermediate.size() == 2);
    CHECK(a.intermediate[0].first == 1);
    CHECK(a.objective == a.intermediate.back().second);
    CHECK(to_json(a) == to_json(b));

    CHECK(apply_config(cfg, obj->base).optimizer == OptimizerKind::adamw);
    CHECK(apply_config(cfg, obj->base).augment.mosaic == doctest::Approx(0.45098));

    cfg["imgsz"] = 960;
    const auto wrong = run_trial(cfg, runner, 1, 7, should_prune, {}, ticking_clock());
    CHECK(wrong.status == TrialStatus::failed);
}
