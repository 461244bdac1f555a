#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mdf/agent.hpp"
#include "mdf/error.hpp"
#include "mdf/hpo.hpp"

namespace mdf::cli {

namespace fs = std::filesystem;

fs::path runs_root() {
    if (const char* v = std::getenv("MDF_RUNS_DIR"); v && *v) return v;
    return "runs";
}

fs::path run_dir(const fs::path& root, const std::string& stage, const std::string& name) {
    if (!name.empty()) return root / stage / name;
    for (std::size_t i = 1;; ++i) {
        auto p = root / stage / (i == 1 ? std::string("exp") : "exp" + std::to_string(i));
        if (!fs::exists(p)) return p;
    }
}

MetricTable load_metric_table(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        MetricTable t;
        t.name = j.value("name", path.stem().string());
        t.seeds = j.at("seeds").get<std::vector<std::int64_t>>();
        for (const auto& [k, v] : j.at("metrics").items()) t.metrics[k] = v.get<std::vector<double>>();
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
    }
}

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(Errc::io_failure, "cannot write " + path.string());
    out << j.dump(2) << "\n";
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(Errc::invalid_argument, path.string() + ": " + e.what());
    }
}

void require_file(const std::string& path) {
    if (!fs::is_regular_file(path)) throw Error(Errc::io_failure, "no such file: " + path);
}

int exit_code_for(Errc c) {
    switch (c) {
        case Errc::io_failure:
        case Errc::bad_checkpoint: return kIoError;
        case Errc::invalid_argument: return kBadArgument;
        default: return kFailure;
    }
}

struct Options {
    // synth
    std::string out;
    std::uint64_t seed = 0;
    std::size_t n_train = 120, n_val = 40, n_test = 40, size = 64;
    // shared
    std::string data, weights, source, config, name, variant = "baseline", split = "test", policy = "scripted";
    std::size_t trials = 20, epochs = 0, tune_epochs = 5, batch = 16, max_images = 8;
    double conf = 0.25, iou = 0.5;
    // stats
    std::string input, a;
    std::vector<std::string> b, metrics;
    std::vector<double> values;
    bool json = false;
};

agent::PipelineConfig pipeline(const Options& o) {
    agent::PipelineConfig p;
    p.model.variant = parse_variant(o.variant);
    p.seed = o.seed;
    p.base.batch = o.batch;
    p.tune_epochs = o.tune_epochs;
    if (o.epochs) p.final_epochs = o.epochs;
    p.eval_conf = o.conf;
    p.eval_iou = o.iou;
    return p;
}

int cmd_synth(const Options& o, std::ostream& out) {
    SyntheticSpec spec;
    spec.train = o.n_train;
    spec.val = o.n_val;
    spec.test = o.n_test;
    spec.image_size = o.size;
    spec.seed = o.seed;
    const auto ds = generate_synthetic(spec, o.out);
    out << ds.yaml_path.string() << "\n";
    return kOk;
}

int cmd_tune(const Options& o, std::ostream& out) {
    require_file(o.data);
    const auto dir = run_dir(runs_root(), "tune", o.name);
    auto cfg = pipeline(o);
    const nlohmann::json args{{"data", o.data}, {"trials", o.trials}, {"epochs", o.tune_epochs}, {"seed", o.seed}};
    auto obs = agent::run_tune(cfg, args, dir);
    const auto ledger = hpo::load_ledger(dir / "trials.jsonl", o.seed);
    if (ledger.complete_count() >= 10) {
        nlohmann::json imp = nlohmann::json::object();
        for (const auto& [k, v] : hpo::param_importance(ledger, hpo::desk_space(load_dataset_yaml(o.data).image_size))) imp[k] = v;
        write_json(dir / "importance.json", imp);
        obs["importance"] = (dir / "importance.json").string();
    }
    write_json(dir / "summary.json", obs);
    out << obs.dump(2) << "\n";
    return kOk;
}

int cmd_train(const Options& o, std::ostream& out) {
    require_file(o.data);
    nlohmann::json params = nlohmann::json::object();
    if (!o.config.empty()) {
        params = read_json(o.config);
        if (params.contains("config") && params.at("config").is_object()) params = params.at("config");
    }
    nlohmann::json args{{"data", o.data}, {"params", params}};
    if (o.epochs) args["epochs"] = o.epochs;
    const auto obs = agent::run_train_final(pipeline(o), args, run_dir(runs_root(), "train", o.name));
    out << obs.dump(2) << "\n";
    return kOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
    require_file(o.weights);
    if (o.data.empty()) throw CLI::RequiredError("--data is required");
    require_file(o.data);
    const nlohmann::json args{{"data", o.data}, {"checkpoint", o.weights}, {"split", o.split}, {"conf", o.conf}, {"iou", o.iou}};
    const auto obs = agent::run_eval(pipeline(o), args);
    write_json(run_dir(runs_root(), "eval", o.name) / "report.json", obs);
    out << obs.dump(2) << "\n";
    return kOk;
}

int cmd_infer(const Options& o, std::ostream& out) {
    require_file(o.weights);
    const nlohmann::json args{{"checkpoint", o.weights}, {"source", o.source}, {"max_images", o.max_images}, {"conf", o.conf}};
    const auto obs = agent::run_visualize(pipeline(o), args, run_dir(runs_root(), "detect", o.name));
    out << obs.dump(2) << "\n";
    return kOk;
}

int cmd_describe(const Options& o, std::ostream& out) {
    std::vector<std::pair<std::string, SummaryStats>> cols;
    if (!o.values.empty()) cols.emplace_back("values", describe(o.values));
    if (!o.input.empty()) {
        const auto t = load_metric_table(o.input);
        for (const auto& [m, v] : t.metrics)
            if (o.metrics.empty() || std::find(o.metrics.begin(), o.metrics.end(), m) != o.metrics.end()) cols.emplace_back(m, describe(v));
    }
    if (cols.empty()) throw CLI::RequiredError("--input or --values is required");
    if (o.json) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [m, s] : cols) j[m] = to_json(s);
        out << j.dump(2) << "\n";
    } else {
        out << format_summary_table(cols);
    }
    return kOk;
}

int cmd_compare(const Options& o, std::ostream& out) {
    const auto a = load_metric_table(o.a);
    std::vector<MetricTable> bs;
    for (const auto& p : o.b) bs.push_back(load_metric_table(p));
    auto metrics = o.metrics;
    if (metrics.empty())
        for (const auto& [m, _] : a.metrics) metrics.push_back(m);
    const auto rows = paired_report(a, bs, metrics);
    if (o.json) {
        auto j = nlohmann::json::array();
        for (const auto& r : rows) j.push_back(to_json(r));
        out << j.dump(2) << "\n";
    } else {
        out << format_paired_table(rows);
    }
    return kOk;
}

int cmd_agent(const Options& o, std::ostream& out) {
    require_file(o.data);
    const auto dir = run_dir(runs_root(), "session", o.name);
    auto cfg = pipeline(o);
    cfg.runs_dir = dir;
    const auto reg = agent::pipeline_registry(cfg);
    agent::SessionOptions so;
    so.seed = o.seed;
    so.session_dir = dir;

    std::unique_ptr<agent::Policy> policy;
    if (o.policy == "scripted") {
        policy = std::make_unique<agent::ScriptedPolicy>(agent::pipeline_script(o.data, o.trials, o.source.empty() ? o.data : o.source));
    } else {
        auto hc = agent::HttpPolicyConfig::from_env();
        hc.seed = o.seed;
        hc.log = dir / "llm.jsonl";
        fs::create_directories(dir);
        policy = std::make_unique<agent::HttpPolicy>(hc);
    }
    const auto result = agent::run_session(*policy, reg, so);
    write_json(dir / "session.json", agent::to_json(result));
    out << agent::to_json(result).dump(2) << "\n";
    return result.complete() ? kOk : kFailure;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Detector training, tuning and evaluation toolkit", "mdf"};
    app.require_subcommand(1);
    Options o;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--out", o.out, "output directory")->required();
    synth->add_option("--seed", o.seed);
    synth->add_option("--train", o.n_train)->check(CLI::PositiveNumber);
    synth->add_option("--val", o.n_val)->check(CLI::PositiveNumber);
    synth->add_option("--test", o.n_test)->check(CLI::PositiveNumber);
    synth->add_option("--size", o.size)->check(CLI::PositiveNumber);

    auto add_model = [&](CLI::App* c) {
        c->add_option("--variant", o.variant)->check(CLI::IsMember({"baseline", "moe"}));
        c->add_option("--seed", o.seed);
        c->add_option("--batch", o.batch)->check(CLI::PositiveNumber);
        c->add_option("--name", o.name, "run name under the stage directory");
    };

    auto* tune = app.add_subcommand("tune", "hyperparameter study");
    tune->add_option("--data", o.data, "dataset YAML")->required();
    tune->add_option("--trials", o.trials)->check(CLI::PositiveNumber);
    tune->add_option("--epochs", o.tune_epochs, "epochs per trial")->check(CLI::PositiveNumber);
    add_model(tune);

    auto* train = app.add_subcommand("train", "train a detector");
    train->add_option("--data", o.data, "dataset YAML")->required();
    train->add_option("--config", o.config, "hyperparameter JSON (best.config.json works)");
    train->add_option("--epochs", o.epochs)->check(CLI::PositiveNumber);
    add_model(train);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--weights", o.weights)->required();
    eval->add_option("--data", o.data, "dataset YAML");
    eval->add_option("--split", o.split)->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--conf", o.conf)->check(CLI::Range(0.0, 1.0));
    eval->add_option("--iou", o.iou)->check(CLI::Range(0.0, 1.0));
    eval->add_option("--name", o.name);

    auto* infer = app.add_subcommand("infer", "write annotated predictions");
    infer->add_option("--weights", o.weights)->required();
    infer->add_option("--source", o.source, "image, directory or dataset YAML")->required();
    infer->add_option("--conf", o.conf)->check(CLI::Range(0.0, 1.0));
    infer->add_option("--max-images", o.max_images)->check(CLI::PositiveNumber);
    infer->add_option("--name", o.name);

    auto* stats = app.add_subcommand("stats", "run statistics");
    stats->require_subcommand(1);
    auto* desc = stats->add_subcommand("describe", "summary statistics");
    desc->add_option("--input", o.input, "metric table JSON");
    desc->add_option("--values", o.values)->delimiter(',');
    desc->add_option("--metric", o.metrics);
    desc->add_flag("--json", o.json);
    auto* cmp = stats->add_subcommand("compare", "paired Wilcoxon with Holm correction");
    cmp->add_option("--a", o.a, "proposed model table")->required();
    cmp->add_option("--b", o.b, "baseline tables")->required();
    cmp->add_option("--metric", o.metrics);
    cmp->add_flag("--json", o.json);

    auto* ag = app.add_subcommand("agent", "tool-driven pipeline session");
    ag->require_subcommand(1);
    auto* run = ag->add_subcommand("run", "run one session");
    run->add_option("--policy", o.policy)->check(CLI::IsMember({"scripted", "llm"}));
    run->add_option("--data", o.data, "dataset YAML")->required();
    run->add_option("--trials", o.trials)->check(CLI::PositiveNumber);
    run->add_option("--tune-epochs", o.tune_epochs)->check(CLI::PositiveNumber);
    run->add_option("--epochs", o.epochs, "final training epochs")->check(CLI::PositiveNumber);
    run->add_option("--source", o.source, "visualization source (defaults to the test split)");
    add_model(run);

    const auto is_subcommand = [&](const std::string& s) {
        for (const auto* sc : app.get_subcommands({}))
            if (sc->get_name() == s) return true;
        return false;
    };
    if (args.empty()) {
        err << "mdf: a subcommand is required (synth, tune, train, eval, infer, stats, agent)\n";
        return kUnknownSubcommand;
    }
    if (!args[0].starts_with("-") && !is_subcommand(args[0])) {
        err << "mdf: unknown subcommand '" << args[0] << "'\n";
        return kUnknownSubcommand;
    }

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::RequiredError& e) {
        err << "mdf: " << e.what() << "\n";
        return kMissingFlag;
    } catch (const CLI::ExtrasError& e) {
        err << "mdf: " << e.what() << "\n";
        return kBadArgument;
    } catch (const CLI::ParseError& e) {
        err << "mdf: " << e.what() << "\n";
        return kBadArgument;
    }

    try {
        if (*synth) return cmd_synth(o, out);
        if (*tune) return cmd_tune(o, out);
        if (*train) return cmd_train(o, out);
        if (*eval) return cmd_eval(o, out);
        if (*infer) return cmd_infer(o, out);
        if (*desc) return cmd_describe(o, out);
        if (*cmp) return cmd_compare(o, out);
        if (*run) return cmd_agent(o, out);
    } catch (const CLI::RequiredError& e) {
        err << "mdf: " << e.what() << "\n";
        return kMissingFlag;
    } catch (const Error& e) {
        err << "mdf: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "mdf: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}

}  // namespace mdf::cli
