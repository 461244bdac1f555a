#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"

using namespace mdf::cli;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run mdf_run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli_main(args, out, err);
    return {code, out.str(), err.str()};
}

/// Fresh working area with MDF_RUNS_DIR pointing inside it.
struct Workspace {
    fs::path root;
    explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / name) {
        fs::remove_all(root);
        fs::create_directories(root);
        setenv("MDF_RUNS_DIR", (root / "runs").c_str(), 1);
    }
    ~Workspace() { unsetenv("MDF_RUNS_DIR"); }
    [[nodiscard]] std::string yaml() const { return (root / "d" / "data.yaml").string(); }
    void synth() const {
        const auto r = mdf_run({"synth", "--out", (root / "d").string(), "--seed", "7", "--train", "16", "--val", "6", "--test", "6"});
        REQUIRE(r.code == kOk);
    }
};

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line)) n += !line.empty();
    return n;
}

}  // namespace

TEST_CASE("synth then train") {
    Workspace ws("mdf_test_cli_train");
    ws.synth();
    CHECK(fs::exists(ws.yaml()));
    const auto r = mdf_run({"train", "--data", ws.yaml(), "--epochs", "2", "--batch", "8"});
    CHECK(r.code == kOk);
    CHECK(fs::exists(ws.root / "runs" / "train" / "exp" / "history.jsonl"));
    CHECK(line_count(ws.root / "runs" / "train" / "exp" / "history.jsonl") == 2);

    const auto ckpt = (ws.root / "runs" / "train" / "exp" / "best.ckpt").string();
    const auto ev = mdf_run({"eval", "--weights", ckpt, "--data", ws.yaml()});
    CHECK(ev.code == kOk);
    const auto report = nlohmann::json::parse(ev.out);
    for (const char* k : {"map50", "map5095", "confusion"}) CHECK(report.contains(k));
    CHECK(fs::exists(ws.root / "runs" / "eval" / "exp" / "report.json"));

    const auto inf = mdf_run({"infer", "--weights", ckpt, "--source", ws.yaml(), "--max-images", "2", "--name", "viz"});
    CHECK(inf.code == kOk);
    CHECK(nlohmann::json::parse(inf.out).at("artifacts").size() == 2);
    CHECK(fs::exists(ws.root / "runs" / "detect" / "viz"));

    CHECK(mdf_run({"train", "--data", ws.yaml(), "--epochs", "1", "--batch", "8"}).code == kOk);
    CHECK(fs::exists(ws.root / "runs" / "train" / "exp2" / "best.ckpt"));
}

TEST_CASE("diagnostics and exit codes") {
    Workspace ws("mdf_test_cli_errors");
    const auto missing = mdf_run({"eval", "--weights", "missing.ckpt"});
    CHECK(missing.code != kOk);
    CHECK(missing.code == kIoError);
    CHECK(missing.err.find("missing.ckpt") != std::string::npos);
    CHECK(std::count(missing.err.begin(), missing.err.end(), '\n') == 1);

    CHECK(mdf_run({"frobnicate"}).code == kUnknownSubcommand);
    CHECK(mdf_run({}).code == kUnknownSubcommand);
    CHECK(mdf_run({"tune"}).code == kMissingFlag);
    CHECK(mdf_run({"synth"}).code == kMissingFlag);
    CHECK(mdf_run({"stats", "compare", "--a", "x.json"}).code == kMissingFlag);
    CHECK(mdf_run({"train", "--data", "d.yaml", "--epochs", "many"}).code == kBadArgument);
    CHECK(mdf_run({"train", "--data", "d.yaml", "--variant", "huge"}).code == kBadArgument);
    CHECK(mdf_run({"train", "--data", "nowhere.yaml"}).code == kIoError);
    CHECK(mdf_run({"--help"}).code == kOk);

    // every distinct failure family has a distinct code
    const std::set<int> codes{kFailure, kUnknownSubcommand, kMissingFlag, kBadArgument, kIoError};
    CHECK(codes.size() == 5);
    CHECK_FALSE(codes.contains(kOk));
}

TEST_CASE("run directories") {
    const auto root = fs::temp_directory_path() / "mdf_test_cli_rundir";
    fs::remove_all(root);
    CHECK(run_dir(root, "tune", "") == root / "tune" / "exp");
    fs::create_directories(root / "tune" / "exp");
    fs::create_directories(root / "tune" / "exp2");
    CHECK(run_dir(root, "tune", "") == root / "tune" / "exp3");
    CHECK(run_dir(root, "tune", "mine") == root / "tune" / "mine");
    unsetenv("MDF_RUNS_DIR");
    CHECK(runs_root() == "runs");
    setenv("MDF_RUNS_DIR", "/x/y", 1);
    CHECK(runs_root() == "/x/y");
    unsetenv("MDF_RUNS_DIR");
}

TEST_CASE("stats subcommands") {
    Workspace ws("mdf_test_cli_stats");
    const auto d = mdf_run({"stats", "describe", "--values", "1,2,3,4,5", "--json"});
    REQUIRE(d.code == kOk);
    const auto j = nlohmann::json::parse(d.out).at("values");
    CHECK(j.at("mean") == 3.0);
    CHECK(j.at("variance") == 2.5);
    CHECK(mdf_run({"stats", "describe"}).code == kMissingFlag);

    const nlohmann::json a{{"name", "A"}, {"seeds", {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}},
                           {"metrics", {{"map50", {0.91, 0.92, 0.93, 0.94, 0.95, 0.96, 0.97, 0.98, 0.99, 0.995}}}}};
    nlohmann::json b = a;
    b["name"] = "B";
    for (std::size_t i = 0; i < 10; ++i) b["metrics"]["map50"][i] = a["metrics"]["map50"][i].get<double>() - 0.01 * static_cast<double>(i + 1);
    std::ofstream(ws.root / "a.json") << a.dump();
    std::ofstream(ws.root / "b.json") << b.dump();
    const auto c = mdf_run({"stats", "compare", "--a", (ws.root / "a.json").string(), "--b", (ws.root / "b.json").string(), "--json"});
    REQUIRE(c.code == kOk);
    const auto rows = nlohmann::json::parse(c.out);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].at("raw_p").get<double>() == doctest::Approx(0.001953).epsilon(1e-3));
    CHECK(rows[0].at("reject") == true);

    const auto text = mdf_run({"stats", "compare", "--a", (ws.root / "a.json").string(), "--b", (ws.root / "b.json").string()});
    CHECK(text.code == kOk);
    CHECK(text.out.find("A vs B") != std::string::npos);

    std::ofstream(ws.root / "bad.json") << "{";
    CHECK(mdf_run({"stats", "describe", "--input", (ws.root / "bad.json").string()}).code == kBadArgument);
}

TEST_CASE("tune, then train from the best config") {
    Workspace ws("mdf_test_cli_tune");
    ws.synth();
    const auto t = mdf_run({"tune", "--data", ws.yaml(), "--trials", "2", "--epochs", "1", "--batch", "8", "--name", "s"});
    REQUIRE(t.code == kOk);
    const auto dir = ws.root / "runs" / "tune" / "s";
    CHECK(line_count(dir / "trials.jsonl") == 2);
    CHECK(fs::exists(dir / "best.config.json"));
    CHECK(fs::exists(dir / "summary.json"));
    const auto tr = mdf_run({"train", "--data", ws.yaml(), "--config", (dir / "best.config.json").string(), "--epochs", "1"});
    CHECK(tr.code == kOk);
}

TEST_CASE("scripted agent session") {
    Workspace ws("mdf_test_cli_agent");
    ws.synth();
    const auto r = mdf_run({"agent", "run", "--policy", "scripted", "--data", ws.yaml(), "--trials", "2", "--tune-epochs", "1",
                            "--epochs", "2", "--batch", "8", "--name", "s1"});
    REQUIRE(r.code == kOk);
    const auto dir = ws.root / "runs" / "session" / "s1";
    CHECK(fs::exists(dir / "session.json"));
    std::ifstream in(dir / "transcript.jsonl");
    std::vector<std::string> calls;
    std::string line;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        if (j.contains("tool_call")) calls.push_back(j.at("tool_call").at("name"));
    }
    CHECK(calls == std::vector<std::string>{"yolo_optuna_tune", "yolo_train_final", "yolo_eval_test", "yolo_infer_visualize"});
    const auto session = nlohmann::json::parse(std::ifstream(dir / "session.json"));
    for (const auto& a : session.at("artifacts")) CHECK(fs::exists(a.get<std::string>()));
}
