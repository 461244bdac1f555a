#include "mdf/agent.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <regex>
#include <set>

#include <httplib.h>

#include "mdf/error.hpp"

namespace mdf::agent {

namespace fs = std::filesystem;

std::string_view to_string(ArgType t) noexcept {
    switch (t) {
        case ArgType::string: return "string";
        case ArgType::integer: return "integer";
        case ArgType::number: return "number";
        case ArgType::boolean: return "boolean";
        case ArgType::object: return "object";
        case ArgType::array: return "array";
    }
    return "string";
}

std::string_view to_string(Role r) noexcept {
    switch (r) {
        case Role::user: return "user";
        case Role::agent: return "agent";
        case Role::tool: return "tool";
    }
    return "user";
}

// -------------------------------------------------------------- registry ---

namespace {

bool has_type(const nlohmann::json& v, ArgType t) {
    switch (t) {
        case ArgType::string: return v.is_string();
        case ArgType::integer: return v.is_number_integer();
        case ArgType::number: return v.is_number();
        case ArgType::boolean: return v.is_boolean();
        case ArgType::object: return v.is_object();
        case ArgType::array: return v.is_array();
    }
    return false;
}

}  // namespace

void ToolRegistry::add(ToolSpec spec, Executor executor) {
    if (tools_.contains(spec.name)) throw Error(Errc::invalid_argument, "tool '" + spec.name + "' is already registered");
    auto name = spec.name;
    tools_.emplace(std::move(name), Entry{std::move(spec), std::move(executor)});
}

bool ToolRegistry::contains(std::string_view name) const { return tools_.find(name) != tools_.end(); }

const ToolSpec& ToolRegistry::spec(std::string_view name) const {
    const auto it = tools_.find(name);
    if (it == tools_.end()) throw Error(Errc::unknown_tool, "unknown tool '" + std::string(name) + "'");
    return it->second.spec;
}

std::vector<std::string> ToolRegistry::names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : tools_) out.push_back(name);
    return out;
}

std::string ToolRegistry::catalog() const {
    std::string out;
    for (const auto& [name, e] : tools_) {
        out += name + "(";
        for (std::size_t i = 0; i < e.spec.args.size(); ++i) {
            const auto& a = e.spec.args[i];
            if (i) out += ", ";
            out += a.required ? a.name : "[" + a.name;
            out += ": " + std::string(to_string(a.type));
            if (!a.required) out += "]";
        }
        out += ") - " + e.spec.description + "\n";
    }
    return out;
}

void ToolRegistry::validate(const ToolCall& call) const {
    const auto& s = spec(call.name);
    if (!call.arguments.is_object()) throw Error(Errc::argument_schema_violation, "arguments must be an object");
    for (const auto& [key, value] : call.arguments.items()) {
        const auto it = std::find_if(s.args.begin(), s.args.end(), [&](const ArgSpec& a) { return a.name == key; });
        if (it == s.args.end()) {
            throw Error(Errc::argument_schema_violation, call.name + ": unknown argument '" + key + "'");
        }
        if (!has_type(value, it->type)) {
            throw Error(Errc::argument_schema_violation,
                        call.name + ": argument '" + key + "' must be " + std::string(to_string(it->type)));
        }
    }
    for (const auto& a : s.args) {
        if (a.required && !call.arguments.contains(a.name)) {
            throw Error(Errc::argument_schema_violation, call.name + ": missing argument '" + a.name + "'");
        }
    }
}

Observation ToolRegistry::execute(const ToolCall& call) const {
    validate(call);
    ++executions_;
    return tools_.find(call.name)->second.executor(call.arguments);
}

ToolCall parse_tool_call(std::string_view text, const ToolRegistry& registry) {
    std::vector<std::set<std::string>> keys;
    std::string duplicate;
    const nlohmann::json::parser_callback_t cb = [&](int, nlohmann::json::parse_event_t ev, nlohmann::json& parsed) {
        using E = nlohmann::json::parse_event_t;
        if (ev == E::object_start) keys.emplace_back();
        if (ev == E::object_end) keys.pop_back();
        if (ev == E::key && !keys.back().insert(parsed.get<std::string>()).second && duplicate.empty()) {
            duplicate = parsed.get<std::string>();
        }
        return true;
    };
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text.begin(), text.end(), cb);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(Errc::malformed_json, std::string("not a JSON document: ") + e.what());
    }
    if (!duplicate.empty()) throw Error(Errc::malformed_json, "duplicate key '" + duplicate + "'");
    if (!j.is_object()) throw Error(Errc::malformed_json, "the action must be a JSON object");
    if (!j.contains("tool_call")) throw Error(Errc::malformed_json, "missing \"tool_call\"");
    if (j.size() != 1) throw Error(Errc::extra_top_level_keys, "only \"tool_call\" is allowed at the top level");

    const auto& tc = j.at("tool_call");
    if (!tc.is_object() || tc.size() != 2 || !tc.contains("name") || !tc.contains("arguments")) {
        throw Error(Errc::malformed_json, "\"tool_call\" must hold exactly \"name\" and \"arguments\"");
    }
    if (!tc.at("name").is_string()) throw Error(Errc::malformed_json, "\"name\" must be a string");
    ToolCall call{tc.at("name").get<std::string>(), tc.at("arguments")};
    if (!registry.contains(call.name)) throw Error(Errc::unknown_tool, "unknown tool '" + call.name + "'");
    registry.validate(call);
    return call;
}

std::string format_tool_call(const ToolCall& call) {
    return nlohmann::json{{"tool_call", {{"name", call.name}, {"arguments", call.arguments}}}}.dump();
}

// ---------------------------------------------------------------- memory ---

std::vector<std::string> word_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c == '_') {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::vector<double> hashed_bow_embedding(std::string_view text, std::size_t dim) {
    if (dim == 0) throw Error(Errc::invalid_argument, "embedding dimension must be positive");
    std::vector<double> v(dim, 0.0);
    for (const auto& tok : word_tokens(text)) {
        std::uint64_t h = 14695981039346656037ull;
        for (char c : tok) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
        v[h % dim] += 1.0;
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm > 0) for (auto& x : v) x /= norm;
    return v;
}

const MemoryRecord& Memory::append(Role role, std::string content) {
    tokens_ += word_tokens(content).size();
    MemoryRecord r{role, std::move(content), records_.size(), {}};
    r.embedding = embedder_(r.content);
    records_.push_back(std::move(r));
    return records_.back();
}

std::vector<MemoryRecord> retrieve_context(std::string_view query, std::span<const MemoryRecord> memory, std::size_t k,
                                           const Embedder& embedder) {
    if (k >= memory.size()) {
        std::vector<MemoryRecord> all(memory.begin(), memory.end());
        std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
        return all;
    }
    const auto q = embedder(query);
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < memory.size(); ++i) {
        const auto& e = memory[i].embedding;
        const double dot = std::inner_product(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(std::min(q.size(), e.size())),
                                              e.begin(), 0.0);
        const double nq = std::sqrt(std::inner_product(q.begin(), q.end(), q.begin(), 0.0));
        const double ne = std::sqrt(std::inner_product(e.begin(), e.end(), e.begin(), 0.0));
        scored.emplace_back(nq > 0 && ne > 0 ? dot / (nq * ne) : 0.0, i);
    }
    std::stable_sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return memory[a.second].index < memory[b.second].index;
    });
    std::vector<MemoryRecord> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(memory[scored[i].second]);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
    return out;
}

// ---------------------------------------------------------------- policy ---

std::string expand_placeholders(std::string_view text, const std::map<std::string, Observation>& observations) {
    static const std::regex re(R"("?\$\{([A-Za-z0-9_]+):([^}]*)\}"?)");
    std::string out;
    std::string s(text);
    auto it = std::sregex_iterator(s.begin(), s.end(), re);
    std::size_t last = 0;
    for (; it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        out.append(s, last, static_cast<std::size_t>(m.position()) - last);
        const auto obs = observations.find(m[1].str());
        if (obs == observations.end()) throw Error(Errc::invalid_argument, "no observation from " + m[1].str());
        try {
            out += obs->second.at(nlohmann::json::json_pointer(m[2].str())).dump();
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::invalid_argument, "cannot resolve " + m.str() + ": " + e.what());
        }
        last = static_cast<std::size_t>(m.position() + m.length());
    }
    out.append(s, last);
    return out;
}

std::optional<std::string> ScriptedPolicy::next(const PolicyRequest& request) {
    if (pos_ >= script_.size()) return std::nullopt;
    const auto& line = script_[pos_++];
    try {
        return expand_placeholders(line, request.observations);
    } catch (const Error&) {
        return line;
    }
}

std::vector<std::string> pipeline_script(const std::string& data_yaml, std::size_t trials, const std::string& source) {
    auto call = [](std::string_view name, nlohmann::json args) {
        return nlohmann::json{{"tool_call", {{"name", name}, {"arguments", std::move(args)}}}}.dump();
    };
    const auto data = nlohmann::json(data_yaml);
    return {
        call(kTuneTool, {{"data", data_yaml}, {"trials", trials}}),
        R"({"tool_call":{"name":"yolo_train_final","arguments":{"data":)" + data.dump() +
            R"(,"params":"${yolo_optuna_tune:/best_params}"}}})",
        R"({"tool_call":{"name":"yolo_eval_test","arguments":{"data":)" + data.dump() +
            R"(,"checkpoint":"${yolo_train_final:/checkpoint}"}}})",
        R"({"tool_call":{"name":"yolo_infer_visualize","arguments":{"checkpoint":"${yolo_train_final:/checkpoint}","source":)" +
            nlohmann::json(source).dump() + "}}}",
    };
}

HttpPolicyConfig HttpPolicyConfig::from_env() {
    HttpPolicyConfig c;
    if (const char* v = std::getenv("MDF_LLM_BASE_URL")) c.base_url = v;
    if (const char* v = std::getenv("MDF_LLM_MODEL")) c.model = v;
    if (const char* v = std::getenv("MDF_LLM_API_KEY")) c.api_key = v;
    return c;
}

nlohmann::json HttpPolicy::build_request(const PolicyRequest& request) const {
    auto messages = nlohmann::json::array();
    messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
    for (const auto& r : request.context) {
        const char* role = r.role == Role::agent ? "assistant" : "user";
        const std::string content = r.role == Role::tool ? "Observation: " + r.content : r.content;
        messages.push_back({{"role", role}, {"content", content}});
    }
    messages.push_back({{"role", "user"}, {"content", request.instruction}});
    return {{"model", config_.model}, {"messages", messages}, {"temperature", 0}, {"seed", config_.seed}};
}

std::optional<std::string> HttpPolicy::next(const PolicyRequest& request) {
    const auto body = build_request(request);
    httplib::Client client(config_.base_url);
    const auto secs = static_cast<time_t>(config_.timeout_s);
    client.set_connection_timeout(secs, 0);
    client.set_read_timeout(secs, 0);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    const auto res = client.Post(config_.path, headers, body.dump(), "application/json");

    std::ofstream log;
    if (config_.log) log.open(*config_.log, std::ios::app);
    nlohmann::json entry{{"turn", request.turn}, {"request", body}};
    if (!res) {
        entry["error"] = httplib::to_string(res.error());
        if (log) log << entry.dump() << "\n";
        throw Error(Errc::io_failure, "policy service unreachable: " + httplib::to_string(res.error()));
    }
    entry["status"] = res->status;
    entry["response"] = res->body;
    if (log) log << entry.dump() << "\n";
    if (res->status != 200) throw Error(Errc::io_failure, "policy service returned HTTP " + std::to_string(res->status));
    try {
        return nlohmann::json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::io_failure, std::string("unexpected policy service response: ") + e.what());
    }
}

// ----------------------------------------------------------------- tools ---

namespace {

template <class T>
T arg_or(const nlohmann::json& args, const char* key, T fallback) {
    return args.contains(key) ? args.at(key).get<T>() : fallback;
}

std::size_t positive_arg(const nlohmann::json& args, const char* key, std::size_t fallback) {
    if (!args.contains(key)) return fallback;
    const auto v = args.at(key).get<std::int64_t>();
    if (v < 1) throw Error(Errc::invalid_argument, std::string(key) + " must be at least 1");
    return static_cast<std::size_t>(v);
}

ModelConfig model_for(const PipelineConfig& cfg, const DatasetSpec& spec) {
    ModelConfig mc = cfg.model;
    mc.input_size = spec.image_size;
    mc.num_classes = spec.names.size();
    return mc;
}

}  // namespace

Observation run_tune(const PipelineConfig& cfg, const nlohmann::json& args, const fs::path& dir) {
    const auto spec = load_dataset_yaml(args.at("data").get<std::string>());
    const auto trials = positive_arg(args, "trials", 1);
    auto obj = std::make_shared<hpo::DetectorObjective>();
    obj->train_set = load_split(spec, "train");
    obj->val_set = load_split(spec, "val");
    obj->model = model_for(cfg, spec);
    obj->base = cfg.base;
    obj->budget_epochs = positive_arg(args, "epochs", cfg.tune_epochs);
    const auto seed = arg_or<std::uint64_t>(args, "seed", cfg.seed);

    hpo::StudyOptions opts;
    opts.clock = cfg.clock;
    opts.dir = dir;
    const auto res = hpo::study(hpo::desk_space(spec.image_size), hpo::detector_runner(obj), trials, seed, opts);
    std::size_t pruned = 0, failed = 0;
    for (const auto& t : res.ledger.trials) {
        pruned += t.status == hpo::TrialStatus::pruned;
        failed += t.status == hpo::TrialStatus::failed;
    }
    return {{"best_value", res.best_objective},
            {"best_params", res.best_config},
            {"best_trial", res.best_trial},
            {"trials", trials},
            {"complete", res.ledger.complete_count()},
            {"pruned", pruned},
            {"failed", failed},
            {"ledger", (dir / "trials.jsonl").string()},
            {"best_config", (dir / "best.config.json").string()}};
}

Observation run_train_final(const PipelineConfig& cfg, const nlohmann::json& args, const fs::path& dir) {
    const auto spec = load_dataset_yaml(args.at("data").get<std::string>());
    const auto params = arg_or<nlohmann::json>(args, "params", nlohmann::json::object());
    if (params.contains("imgsz") && params.at("imgsz") != spec.image_size) {
        throw Error(Errc::invalid_argument, "imgsz " + params.at("imgsz").dump() + " does not match the dataset");
    }
    TrainConfig tc = hpo::apply_config(params, cfg.base);
    tc.epochs = positive_arg(args, "epochs", cfg.final_epochs);
    tc.seed = cfg.seed;
    fs::create_directories(dir);

    Model model = build_model(model_for(cfg, spec), cfg.seed);
    TrainHooks hooks;
    hooks.dir = dir;
    const auto res = train(model, load_split(spec, "train"), load_split(spec, "val"), tc, hooks);
    {
        std::ofstream out(dir / "config.json");
        out << to_json(tc).dump(2) << "\n";
    }
    return {{"checkpoint", (dir / "best.ckpt").string()},
            {"last_checkpoint", (dir / "last.ckpt").string()},
            {"history_path", (dir / "history.jsonl").string()},
            {"best_epoch", res.best_epoch},
            {"best_value", res.best_objective},
            {"epochs_run", res.history.size()},
            {"stopped_early", res.stopped_early}};
}

Observation run_eval(const PipelineConfig& cfg, const nlohmann::json& args) {
    const auto spec = load_dataset_yaml(args.at("data").get<std::string>());
    const auto split = arg_or<std::string>(args, "split", "test");
    const auto conf = arg_or<double>(args, "conf", cfg.eval_conf);
    const auto iou = arg_or<double>(args, "iou", cfg.eval_iou);
    Model model = load_model(args.at("checkpoint").get<std::string>());
    const auto items = load_split(spec, split);
    if (items.empty()) throw Error(Errc::empty_dataset, "split '" + split + "' has no images");
    const auto dets = predict(model, items, {0.001, true, 0.6});
    const auto report = evaluate_detections(dets, ground_truth(items), spec.names, conf, iou);
    auto obs = to_json(report);
    obs["checkpoint"] = args.at("checkpoint");
    obs["split"] = split;
    obs["images"] = items.size();
    obs["conf"] = conf;
    obs["iou"] = iou;
    return obs;
}

Observation run_visualize(const PipelineConfig& cfg, const nlohmann::json& args, const fs::path& out_dir) {
    Model model = load_model(args.at("checkpoint").get<std::string>());
    const auto images = resolve_source(args.at("source").get<std::string>());
    const auto limit = positive_arg(args, "max_images", 8);
    const auto conf = arg_or<double>(args, "conf", cfg.eval_conf);
    fs::remove_all(out_dir);
    fs::create_directories(out_dir);

    auto artifacts = nlohmann::json::array();
    std::size_t count = 0;
    for (std::size_t i = 0; i < std::min(limit, images.size()); ++i) {
        LabeledImage item{read_ppm(images[i]), {}};
        if (item.image.width != model.config.input_size || item.image.height != model.config.input_size) {
            throw Error(Errc::invalid_size, images[i].string() + " is not " + std::to_string(model.config.input_size) + " px square");
        }
        const auto dets = predict(model, {item}, {conf, true, 0.5});
        const auto path = out_dir / images[i].filename();
        write_annotations(path, item.image, dets);
        artifacts.push_back(path.string());
        count += dets.size();
    }
    return {{"output_dir", out_dir.string()}, {"artifacts", artifacts}, {"detections", count}};
}

ToolRegistry pipeline_registry(const PipelineConfig& config) {
    using A = ArgType;
    ToolRegistry reg;
    reg.add({std::string(kTuneTool),
             "hyperparameter search maximising validation mAP@[0.5:0.95]; returns best_value and best_params",
             {{"data", A::string, true, "dataset YAML"},
              {"trials", A::integer, true, "number of trials"},
              {"epochs", A::integer, false, "epochs per trial"},
              {"seed", A::integer, false, "study seed"}}},
            [config](const nlohmann::json& a) { return run_tune(config, a, config.runs_dir / "tune"); });
    reg.add({std::string(kTrainTool),
             "final training with the selected configuration; returns the best checkpoint",
             {{"data", A::string, true, "dataset YAML"},
              {"params", A::object, false, "hyperparameters"},
              {"epochs", A::integer, false, "training epochs"},
              {"name", A::string, false, "run name"}}},
            [config](const nlohmann::json& a) { return run_train_final(config, a, config.runs_dir / "train" / arg_or<std::string>(a, "name", "final")); });
    reg.add({std::string(kEvalTool),
             "evaluates a checkpoint on the held-out split; returns map50, map5095 and the confusion matrix",
             {{"data", A::string, true, "dataset YAML"},
              {"checkpoint", A::string, true, "checkpoint path"},
              {"split", A::string, false, "split name"},
              {"conf", A::number, false, "confidence threshold"},
              {"iou", A::number, false, "match IoU threshold"}}},
            [config](const nlohmann::json& a) { return run_eval(config, a); });
    reg.add({std::string(kVisualizeTool),
             "writes annotated predictions; returns output_dir and artifacts",
             {{"checkpoint", A::string, true, "checkpoint path"},
              {"source", A::string, true, "image, directory or dataset YAML"},
              {"max_images", A::integer, false, "image limit"},
              {"conf", A::number, false, "confidence threshold"},
              {"name", A::string, false, "output name"}}},
            [config](const nlohmann::json& a) { return run_visualize(config, a, config.runs_dir / "detect" / arg_or<std::string>(a, "name", "predict")); });
    return reg;
}

// --------------------------------------------------------------- session ---

nlohmann::json to_json(const TranscriptEntry& e) {
    nlohmann::json j{{"turn", e.turn}, {"role", to_string(e.role)}, {"content", e.content}};
    if (e.call) j["tool_call"] = {{"name", e.call->name}, {"arguments", e.call->arguments}};
    if (e.observation) j["observation"] = *e.observation;
    return j;
}

bool SessionResult::complete() const {
    return !best_config.is_null() && !best_checkpoint.empty() && !test_metrics.is_null() && !artifacts.empty();
}

nlohmann::json to_json(const SessionResult& r) {
    auto artifacts = nlohmann::json::array();
    for (const auto& a : r.artifacts) artifacts.push_back(a.string());
    return {{"best_config", r.best_config},
            {"best_value", r.best_value ? nlohmann::json(*r.best_value) : nlohmann::json()},
            {"best_checkpoint", r.best_checkpoint.string()},
            {"test_metrics", r.test_metrics},
            {"artifacts", artifacts},
            {"tool_calls", r.tool_calls},
            {"transcript", r.transcript_path.string()},
            {"turns", r.turns}};
}

std::string build_system_prompt(const ToolRegistry& registry) {
    std::string p =
        "You operate an object detection pipeline for power-grid insulator defects.\n"
        "Classes: 0: no_issues, 1: broken, 2: flashover_damage.\n"
        "Procedure: tune hyperparameters to maximise validation mAP@[0.5:0.95], train the final model with the best "
        "configuration, evaluate it on the held-out test split, then write annotated predictions.\n"
        "Each reply must be exactly one JSON object and nothing else:\n"
        "{\"tool_call\": {\"name\": \"<tool_name>\", \"arguments\": {\"<arg>\": <value>}}}\n"
        "Tools:\n";
    return p + registry.catalog();
}

namespace {

const std::array<std::string_view, 4> kStages{kTuneTool, kTrainTool, kEvalTool, kVisualizeTool};

const std::array<const char*, 4> kStageInstructions{
    "Tune the detector hyperparameters on the dataset and report the best configuration.",
    "Train the final model with the best configuration found by tuning.",
    "Evaluate the best checkpoint on the held-out test split.",
    "Run inference with the best checkpoint and write annotated images for inspection.",
};

}  // namespace

SessionResult run_session(Policy& policy, const ToolRegistry& registry, const SessionOptions& opts) {
    SessionResult result;
    Memory memory;
    std::map<std::string, Observation> latest;
    const auto system_prompt = build_system_prompt(registry);
    result.transcript.push_back({0, Role::user, system_prompt, {}, {}});

    fs::create_directories(opts.session_dir);
    result.transcript_path = opts.session_dir / "transcript.jsonl";
    auto flush = [&] {
        std::ofstream out(result.transcript_path, std::ios::trunc);
        if (!out) throw Error(Errc::io_failure, "cannot write " + result.transcript_path.string());
        for (const auto& e : result.transcript) out << to_json(e).dump() << "\n";
    };

    std::size_t stage = 0, failures = 0;
    std::string feedback;
    bool done = false;
    try {
        for (std::size_t turn = 1; turn <= opts.max_turns && !done; ++turn) {
            result.turns = turn;
            const std::string instruction = feedback.empty() ? kStageInstructions[stage] : feedback;
            memory.append(Role::user, instruction);
            result.transcript.push_back({turn, Role::user, instruction, {}, {}});

            PolicyRequest req{system_prompt, {}, instruction, latest, turn};
            const auto& history = memory.records();
            const std::span<const MemoryRecord> prior(history.data(), history.size() - 1);
            if (memory.token_count() > opts.retrieval_threshold) {
                req.context = retrieve_context(instruction, prior, opts.retrieval_k, memory.embedder());
            } else {
                req.context.assign(prior.begin(), prior.end());
            }

            const auto action = policy.next(req);
            if (!action) break;
            memory.append(Role::agent, *action);
            result.transcript.push_back({turn, Role::agent, *action, {}, {}});

            ToolCall call;
            try {
                call = parse_tool_call(*action, registry);
            } catch (const Error& e) {
                const std::string diag = std::string(to_string(e.code())) + ": " + e.what();
                result.transcript.push_back({turn, Role::tool, diag, {}, nlohmann::json{{"error", diag}}});
                if (++failures >= opts.retry_budget) {
                    throw Error(Errc::policy_protocol_violation,
                                std::to_string(failures) + " consecutive unparseable actions; last: " + diag);
                }
                feedback = "Your last reply was rejected (" + diag + "). Reply with exactly one JSON tool call.";
                continue;
            }
            failures = 0;
            feedback.clear();

            Observation obs;
            bool ok = true;
            try {
                obs = registry.execute(call);
            } catch (const std::exception& e) {
                ok = false;
                obs = {{"error", {{"code", to_string(Errc::tool_execution_failure)}, {"message", e.what()}}}};
            }
            result.tool_calls.push_back(call.name);
            memory.append(Role::tool, obs.dump());
            result.transcript.push_back({turn, Role::tool, obs.dump(), call, obs});
            if (!ok) {
                if (opts.abort_on_tool_failure) {
                    throw Error(Errc::tool_execution_failure, call.name + " failed: " + obs["error"]["message"].get<std::string>());
                }
                continue;
            }
            latest[call.name] = obs;

            if (call.name == kTuneTool) {
                result.best_config = obs.at("best_params");
                result.best_value = obs.at("best_value").get<double>();
            } else if (call.name == kTrainTool) {
                result.best_checkpoint = obs.at("checkpoint").get<std::string>();
            } else if (call.name == kEvalTool) {
                result.test_metrics = obs;
            } else if (call.name == kVisualizeTool) {
                result.artifacts.clear();
                for (const auto& a : obs.at("artifacts")) result.artifacts.emplace_back(a.get<std::string>());
                done = true;
            }
            const auto pos = std::find(kStages.begin(), kStages.end(), call.name);
            if (pos != kStages.end()) stage = std::min<std::size_t>(static_cast<std::size_t>(pos - kStages.begin()) + 1, 3);
        }
    } catch (...) {
        flush();
        throw;
    }
    flush();
    return result;
}

}  // namespace mdf::agent
