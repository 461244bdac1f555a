#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdf/data.hpp"
#include "mdf/metrics.hpp"
#include "mdf/moe.hpp"
#include "mdf/params.hpp"

namespace mdf {

enum class Variant { baseline, moe };

std::string_view to_string(Variant v) noexcept;
Variant parse_variant(std::string_view name);

inline constexpr std::array<std::size_t, 3> kStrides{8, 16, 32};
inline constexpr std::array<const char*, 3> kLevelNames{"p3", "p4", "p5"};

struct ModelConfig {
    Variant variant = Variant::baseline;
    std::size_t input_size = 64;
    std::size_t num_classes = 3;
    /// Stem (stride 2), stride 4, P3, P4, P5.
    std::array<std::size_t, 5> widths{8, 16, 24, 32, 48};
    MoEConfig moe;

    /// Throws invalid_size unless input_size is a positive multiple of 32.
    void validate() const;
    /// MoE config with the P3 channel count filled in.
    [[nodiscard]] MoEConfig moe_config() const;
};

struct Model {
    ModelConfig config;
    ParamStore store;
};

/// Kaiming-uniform convs, unit norm scale, zero norm shift and biases.
Model build_model(const ModelConfig& config, std::uint64_t seed);

struct LevelOutput {
    Var obj, box, cls;
    std::size_t stride = 0;
};

struct HeadOutput {
    std::array<LevelOutput, 3> levels;
};

/// Values of a HeadOutput detached from the graph.
struct LevelTensors {
    Tensor obj, box, cls;
    std::size_t stride = 0;
};

struct HeadTensors {
    std::array<LevelTensors, 3> levels;
    std::size_t input_size = 64;
};

HeadTensors head_values(const Graph& g, const HeadOutput& out, std::size_t input_size);

/// images is (B, 3, S, S). In training mode with the MoE variant a collector is required.
HeadOutput forward(Context& ctx, const ModelConfig& config, Var images, AuxLossCollector* collector = nullptr,
                   std::size_t iter = 0, MoETrace* trace = nullptr);

struct DetectionLoss {
    Var box, obj, cls, total;
    std::size_t positives = 0;
};

inline constexpr double kBoxLossWeight = 5.0;
inline constexpr double kObjLossWeight = 1.0;
inline constexpr double kClsLossWeight = 1.0;

/// Level whose stride * 4 is nearest to the box side sqrt(w h) * input_size.
std::size_t assign_level(const LabeledBox& box, std::size_t input_size);

/// box: mean (1 - GIoU) over positives; cls: mean cross-entropy over positives;
/// obj: BCE summed over every cell of every level, divided by the positive
/// count (at least 1). A second target landing on a claimed cell is ignored.
DetectionLoss detection_loss(Graph& g, const HeadOutput& out, const std::vector<std::vector<LabeledBox>>& targets,
                             std::size_t input_size, std::size_t num_classes);

/// det + drained balancing terms.
Var total_loss(Graph& g, Var det, AuxLossCollector& collector);

/// Raw (tx, ty, tw, th) that decode exactly onto `box` at the given cell.
std::array<double, 4> encode_box(const LabeledBox& box, std::size_t stride, std::size_t input_size, std::size_t gx,
                                 std::size_t gy);
Box decode_box(std::span<const double, 4> t, std::size_t stride, std::size_t input_size, std::size_t gx, std::size_t gy);

struct DecodeOptions {
    double conf_threshold = 0.25;
    bool nms = true;
    double iou_nms = 0.5;
};

/// Confidence is sigmoid(obj) times the top class probability. Image indices
/// start at `image_offset`.
std::vector<Detection> decode(const HeadTensors& out, const DecodeOptions& opts, std::size_t image_offset = 0);

/// Greedy per-class suppression of boxes overlapping a higher-confidence box by more than iou.
std::vector<Detection> nms(std::vector<Detection> dets, double iou);

enum class OptimizerKind { sgd_momentum, adamw };

std::string_view to_string(OptimizerKind k) noexcept;
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch = 16;
    OptimizerKind optimizer = OptimizerKind::adamw;
    double lr0 = 0.01;
    double lrf = 0.01;
    double momentum = 0.937;
    double weight_decay = 5e-4;
    double warmup_epochs = 3.0;
    std::size_t patience = 50;
    std::uint64_t seed = 0;
    AugmentParams augment;
    /// Stop after this many optimizer steps; 0 means no cap.
    std::size_t max_steps = 0;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& tc);
/// Missing keys keep their defaults; unknown keys are ignored.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Linear warmup factor times a cosine decay from 1 to lrf over all epochs.
double learning_rate(const TrainConfig& tc, std::size_t epoch);

class Optimizer {
public:
    explicit Optimizer(const TrainConfig& tc) : tc_(tc) {}
    /// Decay applies to weights of rank >= 2 only.
    void step(ParamStore& store, const NamedTensors& grads, double lr);

private:
    TrainConfig tc_;
    std::size_t t_ = 0;
    NamedTensors m_, v_;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0.0;
    std::size_t steps = 0;
    double box = 0, obj = 0, cls = 0, aux = 0, total = 0;
    double val_map50 = 0, val_map5095 = 0;
    /// Entropy (nats) of the epoch's summed expert load; MoE only.
    std::optional<double> load_entropy;
    std::vector<double> expert_load;
};

nlohmann::json to_json(const EpochRecord& r);

struct TrainResult {
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_objective = 0.0;
    ParamStore best;
    std::size_t steps = 0;
    bool stopped_early = false;
    bool stopped_by_callback = false;
};

/// Eval-mode forward over `items` in batches.
std::vector<Detection> predict(Model& model, const std::vector<LabeledImage>& items, const DecodeOptions& opts,
                               std::size_t batch = 16);

struct SplitScore {
    double map50 = 0, map5095 = 0;
};
/// mAP over a split; detections use conf 0.001 and NMS at 0.6.
SplitScore score_split(Model& model, const std::vector<LabeledImage>& items);

struct TrainHooks {
    /// Called after every epoch; returning false stops training.
    std::function<bool(const EpochRecord&)> on_epoch;
    /// Replaces the validation scorer (defaults to score_split on the val split).
    std::function<SplitScore(Model&)> evaluate;
    /// When set: history.jsonl, best.ckpt and last.ckpt are written here.
    std::optional<std::filesystem::path> dir;
};

/// Validation objective: mAP@[0.5:0.95]. Model parameters end at the last epoch.
TrainResult train(Model& model, const std::vector<LabeledImage>& train_set, const std::vector<LabeledImage>& val_set,
                  const TrainConfig& tc, const TrainHooks& hooks = {});

std::vector<GroundTruth> ground_truth(const std::vector<LabeledImage>& items);

nlohmann::json model_meta(const ModelConfig& config);
ModelConfig model_config_from_meta(const nlohmann::json& meta);

void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra = {});
/// Rebuilds the config from the checkpoint metadata.
Model load_model(const std::filesystem::path& path);

}  // namespace mdf
