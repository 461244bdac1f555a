#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdf/detector.hpp"

namespace mdf::hpo {

/// A sampled configuration: dimension name -> value (number or string).
using Config = nlohmann::json;

struct Dimension {
    enum class Kind { integer, real, log_real, categorical };

    std::string name;
    Kind kind = Kind::real;
    double low = 0.0, high = 0.0;
    std::vector<nlohmann::json> choices;

    static Dimension integer(std::string name, std::int64_t low, std::int64_t high);
    static Dimension real(std::string name, double low, double high);
    static Dimension log_real(std::string name, double low, double high);
    static Dimension categorical(std::string name, std::vector<nlohmann::json> choices);

    [[nodiscard]] bool contains(const nlohmann::json& value) const;
};

struct SearchSpace {
    std::vector<Dimension> dims;

    /// Throws empty_space when there are no dimensions or one of them is empty.
    void validate() const;
    [[nodiscard]] bool contains(const Config& config) const;
    [[nodiscard]] const Dimension* find(std::string_view name) const;
};

/// Fifteen dimensions: imgsz, batch, optimizer, lr0, lrf, momentum,
/// weight_decay, warmup_epochs and the seven augmentation magnitudes.
SearchSpace default_space();
/// default_space with imgsz pinned to the native synthetic image size.
SearchSpace desk_space(std::size_t image_size = 64);

/// A known-good full configuration; every value lies inside default_space().
Config reference_best_config();

enum class TrialStatus { complete, pruned, failed };
std::string_view to_string(TrialStatus s) noexcept;

struct TrialRecord {
    std::size_t trial_id = 0;
    std::uint64_t seed = 0;
    Config config = Config::object();
    std::vector<std::pair<std::size_t, double>> intermediate;  // (epoch, value), epochs from 1
    std::optional<double> objective;
    TrialStatus status = TrialStatus::complete;
    double wall_time = 0.0;
    std::string error;
};

nlohmann::json to_json(const TrialRecord& r);
TrialRecord trial_from_json(const nlohmann::json& j);

struct StudyLedger {
    std::uint64_t seed = 0;
    std::vector<TrialRecord> trials;

    [[nodiscard]] std::optional<std::size_t> best_trial_id() const;
    /// Running maximum of complete objectives; NaN until the first complete trial.
    [[nodiscard]] std::vector<double> best_so_far() const;
    [[nodiscard]] std::size_t complete_count() const;
};

/// One JSON line per trial.
std::string to_jsonl(const StudyLedger& ledger);
StudyLedger load_ledger(const std::filesystem::path& path, std::uint64_t seed = 0);

struct SamplerOptions {
    std::size_t n_startup = 10;
    double gamma = 0.25;
    std::size_t candidates = 24;
};

/// Independent uniform draws until `n_startup` trials are complete, then a
/// univariate Parzen good/bad density ratio per dimension.
Config sample_config(const SearchSpace& space, std::mt19937_64& rng, const StudyLedger& history,
                     const SamplerOptions& opts = {});

inline constexpr std::size_t kPrunerWarmupEpochs = 2;

/// Median rule over prior complete or pruned trials reporting at the same epoch.
bool should_prune(std::size_t epoch, double value, const StudyLedger& history);

/// Returns true when the trial should stop.
using Pruner = std::function<bool(std::size_t epoch, double value, const StudyLedger& history)>;
/// Records an intermediate value; returns false when the trial must stop.
using ReportFn = std::function<bool(std::size_t epoch, double value)>;
/// Trains one configuration and returns its final objective.
using TrialRunner = std::function<double(const Config& config, std::uint64_t seed, const ReportFn& report)>;
/// Seconds since an arbitrary origin.
using Clock = std::function<double()>;

Clock steady_clock();

TrialRecord run_trial(const Config& config, const TrialRunner& runner, std::size_t trial_id, std::uint64_t seed,
                      const Pruner& pruner, const StudyLedger& history, const Clock& clock);

struct StudyOptions {
    SamplerOptions sampler;
    /// Empty disables pruning.
    Pruner pruner = should_prune;
    Clock clock = steady_clock();
    /// When set: trials.jsonl is appended per trial and best.config.json written.
    std::optional<std::filesystem::path> dir;
    /// Called after each trial is appended.
    std::function<void(const TrialRecord&)> on_trial;
};

struct StudyResult {
    Config best_config;
    std::size_t best_trial = 0;
    double best_objective = 0.0;
    StudyLedger ledger;
};

/// Trial seeds and sampler streams derive from (seed, trial id).
StudyResult study(const SearchSpace& space, const TrialRunner& runner, std::size_t n_trials, std::uint64_t seed,
                  const StudyOptions& opts = {});

std::uint64_t trial_seed(std::uint64_t study_seed, std::size_t trial_id);

/// Normalised |Spearman| between each dimension and the objective over
/// complete trials; needs at least 10 of them.
std::vector<std::pair<std::string, double>> param_importance(const StudyLedger& ledger, const SearchSpace& space);

/// Training objective on a fixed dataset: each trial trains for `budget_epochs`
/// and reports validation mAP@[0.5:0.95] after every epoch.
struct DetectorObjective {
    std::vector<LabeledImage> train_set, val_set;
    ModelConfig model;
    TrainConfig base;
    std::size_t budget_epochs = 5;
};

/// Applies `config` on top of base settings.
TrainConfig apply_config(const Config& config, const TrainConfig& base);

TrialRunner detector_runner(std::shared_ptr<const DetectorObjective> objective);

}  // namespace mdf::hpo
