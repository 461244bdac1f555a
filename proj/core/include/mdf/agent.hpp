#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdf/detector.hpp"
#include "mdf/hpo.hpp"

namespace mdf::agent {

using Observation = nlohmann::json;

enum class ArgType { string, integer, number, boolean, object, array };
std::string_view to_string(ArgType t) noexcept;

struct ArgSpec {
    std::string name;
    ArgType type = ArgType::string;
    bool required = true;
    std::string description;
};

struct ToolSpec {
    std::string name;
    std::string description;
    std::vector<ArgSpec> args;
};

struct ToolCall {
    std::string name;
    nlohmann::json arguments = nlohmann::json::object();
};

using Executor = std::function<Observation(const nlohmann::json& arguments)>;

class ToolRegistry {
public:
    /// Throws invalid_argument on a duplicate name.
    void add(ToolSpec spec, Executor executor);

    [[nodiscard]] bool contains(std::string_view name) const;
    [[nodiscard]] const ToolSpec& spec(std::string_view name) const;
    [[nodiscard]] std::vector<std::string> names() const;
    /// One line per tool: name(arg: type, [opt: type]) - description.
    [[nodiscard]] std::string catalog() const;

    /// Checks required keys, JSON types and unknown keys.
    void validate(const ToolCall& call) const;
    /// Validates, then runs the executor. Executor exceptions propagate.
    Observation execute(const ToolCall& call) const;
    /// Executor invocations so far.
    [[nodiscard]] std::size_t executions() const noexcept { return executions_; }

private:
    struct Entry {
        ToolSpec spec;
        Executor executor;
    };
    std::map<std::string, Entry, std::less<>> tools_;
    mutable std::size_t executions_ = 0;
};

/// Exactly {"tool_call": {"name": ..., "arguments": {...}}}. Errors:
/// malformed_json (not JSON, wrong shape, duplicate keys), extra_top_level_keys,
/// unknown_tool, argument_schema_violation.
ToolCall parse_tool_call(std::string_view text, const ToolRegistry& registry);
std::string format_tool_call(const ToolCall& call);

// ---------------------------------------------------------------- memory ---

enum class Role { user, agent, tool };
std::string_view to_string(Role r) noexcept;

struct MemoryRecord {
    Role role = Role::user;
    std::string content;
    std::size_t index = 0;
    std::vector<double> embedding;
};

using Embedder = std::function<std::vector<double>(std::string_view)>;

inline constexpr std::size_t kEmbeddingDim = 256;

/// Lowercase [a-z0-9_] word tokens hashed into `dim` buckets, L2 normalised.
/// Text without tokens maps to the zero vector.
std::vector<double> hashed_bow_embedding(std::string_view text, std::size_t dim = kEmbeddingDim);
std::vector<std::string> word_tokens(std::string_view text);

class Memory {
public:
    explicit Memory(Embedder embedder = [](std::string_view t) { return hashed_bow_embedding(t); })
        : embedder_(std::move(embedder)) {}

    const MemoryRecord& append(Role role, std::string content);
    [[nodiscard]] const std::vector<MemoryRecord>& records() const noexcept { return records_; }
    [[nodiscard]] std::size_t token_count() const noexcept { return tokens_; }
    [[nodiscard]] const Embedder& embedder() const noexcept { return embedder_; }

private:
    Embedder embedder_;
    std::vector<MemoryRecord> records_;
    std::size_t tokens_ = 0;
};

/// Top-k records by cosine similarity to the query (earlier record on ties),
/// returned in chronological order.
std::vector<MemoryRecord> retrieve_context(std::string_view query, std::span<const MemoryRecord> memory, std::size_t k,
                                           const Embedder& embedder = [](std::string_view t) {
                                               return hashed_bow_embedding(t);
                                           });

// ---------------------------------------------------------------- policy ---

struct PolicyRequest {
    std::string system_prompt;
    std::vector<MemoryRecord> context;
    std::string instruction;
    /// Latest observation per tool name.
    std::map<std::string, Observation> observations;
    std::size_t turn = 0;
};

class Policy {
public:
    virtual ~Policy() = default;
    /// The next action text; nullopt stops the session.
    virtual std::optional<std::string> next(const PolicyRequest& request) = 0;
};

/// Replays fixed responses. A "${tool:/json/pointer}" placeholder, quoted or
/// not, is replaced by the JSON value at that pointer in the tool's latest
/// observation. Stops when the script is exhausted.
class ScriptedPolicy final : public Policy {
public:
    explicit ScriptedPolicy(std::vector<std::string> script) : script_(std::move(script)) {}
    std::optional<std::string> next(const PolicyRequest& request) override;

private:
    std::vector<std::string> script_;
    std::size_t pos_ = 0;
};

/// Fills placeholders as ScriptedPolicy does; unresolvable ones throw invalid_argument.
std::string expand_placeholders(std::string_view text, const std::map<std::string, Observation>& observations);

/// The tune -> train -> eval -> visualize script for a dataset YAML.
std::vector<std::string> pipeline_script(const std::string& data_yaml, std::size_t trials, const std::string& source);

struct HttpPolicyConfig {
    std::string base_url = "http://127.0.0.1:8080";
    std::string path = "/v1/chat/completions";
    std::string model = "local";
    std::string api_key;
    double timeout_s = 120.0;
    std::uint64_t seed = 0;
    /// Requests and responses are appended here as JSON lines when set.
    std::optional<std::filesystem::path> log;

    /// MDF_LLM_BASE_URL, MDF_LLM_MODEL, MDF_LLM_API_KEY override the defaults.
    static HttpPolicyConfig from_env();
};

/// Chat-completions client: the system prompt, retrieved context and the
/// instruction go out as messages; the first choice's content is the action.
class HttpPolicy final : public Policy {
public:
    explicit HttpPolicy(HttpPolicyConfig config) : config_(std::move(config)) {}
    std::optional<std::string> next(const PolicyRequest& request) override;

    [[nodiscard]] nlohmann::json build_request(const PolicyRequest& request) const;

private:
    HttpPolicyConfig config_;
};

// ----------------------------------------------------------------- tools ---

inline constexpr std::string_view kTuneTool = "yolo_optuna_tune";
inline constexpr std::string_view kTrainTool = "yolo_train_final";
inline constexpr std::string_view kEvalTool = "yolo_eval_test";
inline constexpr std::string_view kVisualizeTool = "yolo_infer_visualize";

struct PipelineConfig {
    /// Artefacts go under tune/, train/ and detect/ here.
    std::filesystem::path runs_dir = "runs";
    ModelConfig model;
    TrainConfig base;
    std::uint64_t seed = 0;
    std::size_t tune_epochs = 5;
    std::size_t final_epochs = 30;
    double eval_conf = 0.25;
    double eval_iou = 0.5;
    hpo::Clock clock = hpo::steady_clock();
};

/// Tool bodies with explicit output directories; arguments as in the registry.
Observation run_tune(const PipelineConfig& config, const nlohmann::json& args, const std::filesystem::path& dir);
Observation run_train_final(const PipelineConfig& config, const nlohmann::json& args, const std::filesystem::path& dir);
Observation run_eval(const PipelineConfig& config, const nlohmann::json& args);
Observation run_visualize(const PipelineConfig& config, const nlohmann::json& args, const std::filesystem::path& dir);

/// The four pipeline tools over datasets described by YAML files, writing
/// under tune/, train/<name> and detect/<name> of runs_dir.
ToolRegistry pipeline_registry(const PipelineConfig& config);

// --------------------------------------------------------------- session ---

inline constexpr std::size_t kRetryBudget = 3;
inline constexpr std::size_t kRetrievalThresholdTokens = 4096;

struct SessionOptions {
    std::uint64_t seed = 0;
    std::size_t max_turns = 16;
    std::size_t retry_budget = kRetryBudget;
    /// Retrieval replaces the full history once memory exceeds this many tokens.
    std::size_t retrieval_threshold = kRetrievalThresholdTokens;
    std::size_t retrieval_k = 8;
    bool abort_on_tool_failure = false;
    /// transcript.jsonl is written here.
    std::filesystem::path session_dir = "runs/session/0";
};

struct TranscriptEntry {
    std::size_t turn = 0;
    Role role = Role::user;
    std::string content;
    std::optional<ToolCall> call;
    std::optional<Observation> observation;
};

nlohmann::json to_json(const TranscriptEntry& e);

struct SessionResult {
    nlohmann::json best_config;
    std::filesystem::path best_checkpoint;
    nlohmann::json test_metrics;
    std::vector<std::filesystem::path> artifacts;
    std::optional<double> best_value;
    std::vector<std::string> tool_calls;
    std::vector<TranscriptEntry> transcript;
    std::filesystem::path transcript_path;
    std::size_t turns = 0;

    [[nodiscard]] bool complete() const;
};

nlohmann::json to_json(const SessionResult& r);

std::string build_system_prompt(const ToolRegistry& registry);

/// Runs turns until the visualization tool succeeds, the policy stops or
/// max_turns is reached. Throws policy_protocol_violation after retry_budget
/// consecutive unparseable actions, and tool_execution_failure on a failed
/// tool when abort_on_tool_failure is set. The transcript is written either way.
SessionResult run_session(Policy& policy, const ToolRegistry& registry, const SessionOptions& opts = {});

}  // namespace mdf::agent
