#include "mdf/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "layers.hpp"
#include "mdf/checkpoint.hpp"
#include "mdf/error.hpp"

namespace mdf {

std::string_view to_string(Variant v) noexcept { return v == Variant::moe ? "moe" : "baseline"; }

Variant parse_variant(std::string_view name) {
    if (name == "baseline") return Variant::baseline;
    if (name == "moe") return Variant::moe;
    throw Error(Errc::invalid_argument, "unknown model variant '" + std::string(name) + "'");
}

std::string_view to_string(OptimizerKind k) noexcept { return k == OptimizerKind::adamw ? "adamw" : "sgd-momentum"; }

OptimizerKind parse_optimizer(std::string_view name) {
    if (name == "adamw" || name == "AdamW") return OptimizerKind::adamw;
    if (name == "sgd-momentum" || name == "sgd" || name == "SGD") return OptimizerKind::sgd_momentum;
    throw Error(Errc::invalid_argument, "unknown optimizer '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
    if (input_size == 0 || input_size % 32 != 0) {
        throw Error(Errc::invalid_size, "input size " + std::to_string(input_size) + " is not a positive multiple of 32");
    }
    if (num_classes == 0) throw Error(Errc::invalid_argument, "model needs at least one class");
    for (std::size_t w : widths)
        if (w == 0) throw Error(Errc::invalid_argument, "channel widths must be positive");
    if (variant == Variant::moe) moe_config().validate();
}

MoEConfig ModelConfig::moe_config() const {
    MoEConfig m = moe;
    m.in_channels = widths[2];
    if (m.hidden_channels == 0) m.hidden_channels = widths[2];
    m.out_channels = widths[2];
    return m;
}

namespace {

std::string head_name(std::size_t level, const char* part) {
    return std::string("head.") + kLevelNames[level] + "." + part;
}

std::array<std::size_t, 3> level_widths(const ModelConfig& c) { return {c.widths[2], c.widths[3], c.widths[4]}; }

}  // namespace

Model build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    std::mt19937_64 rng(seed);
    auto& s = m.store;
    const auto& w = config.widths;
    layers::add_conv_bn_silu(s, "backbone.stem", w[0], 3, rng);
    layers::add_conv_bn_silu(s, "backbone.stage1", w[1], w[0], rng);
    layers::add_conv_bn_silu(s, "backbone.stage2", w[2], w[1], rng);
    layers::add_conv_bn_silu(s, "backbone.stage3", w[3], w[2], rng);
    layers::add_conv_bn_silu(s, "backbone.stage4", w[4], w[3], rng);
    layers::add_conv_bn_silu(s, "neck.p4", w[3], w[4] + w[3], rng);
    layers::add_conv_bn_silu(s, "neck.p3", w[2], w[3] + w[2], rng);
    if (config.variant == Variant::moe) {
        init_moe_params(s, config.moe_config(), rng, "moe");
    } else {
        layers::add_conv_bn_silu(s, "neck.p3_refine", w[2], w[2], rng);
    }
    const auto lw = level_widths(config);
    for (std::size_t l = 0; l < 3; ++l) {
        layers::add_conv_bn_silu(s, head_name(l, "stem"), lw[l], lw[l], rng);
        layers::add_pointwise(s, head_name(l, "obj"), 1, lw[l], rng);
        layers::add_pointwise(s, head_name(l, "box"), 4, lw[l], rng);
        layers::add_pointwise(s, head_name(l, "cls"), config.num_classes, lw[l], rng);
    }
    return m;
}

HeadOutput forward(Context& ctx, const ModelConfig& config, Var images, AuxLossCollector* collector, std::size_t iter,
                   MoETrace* trace) {
    Graph& g = ctx.graph();
    const Tensor& iv = g.value(images);
    if (iv.rank() != 4 || iv.dim(1) != 3 || iv.dim(2) != config.input_size || iv.dim(3) != config.input_size) {
        throw Error(Errc::invalid_size, "expected images of shape (B, 3, " + std::to_string(config.input_size) + ", " +
                                            std::to_string(config.input_size) + "), got " + shape_str(iv.shape()));
    }
    Var c1 = layers::conv_bn_silu(ctx, images, "backbone.stem", 2);
    Var c2 = layers::conv_bn_silu(ctx, c1, "backbone.stage1", 2);
    Var c3 = layers::conv_bn_silu(ctx, c2, "backbone.stage2", 2);
    Var c4 = layers::conv_bn_silu(ctx, c3, "backbone.stage3", 2);
    Var c5 = layers::conv_bn_silu(ctx, c4, "backbone.stage4", 2);

    const Var up5[] = {ops::upsample_nearest2x(g, c5), c4};
    Var p4 = layers::conv_bn_silu(ctx, ops::concat_channels(g, up5), "neck.p4", 1);
    const Var up4[] = {ops::upsample_nearest2x(g, p4), c3};
    Var p3 = layers::conv_bn_silu(ctx, ops::concat_channels(g, up4), "neck.p3", 1);
    if (config.variant == Variant::moe) {
        p3 = moe_forward(ctx, p3, config.moe_config(), collector, iter, trace, "moe");
    } else {
        p3 = layers::conv_bn_silu(ctx, p3, "neck.p3_refine", 1);
    }

    HeadOutput out;
    const Var feats[] = {p3, p4, c5};
    for (std::size_t l = 0; l < 3; ++l) {
        Var h = layers::conv_bn_silu(ctx, feats[l], head_name(l, "stem"), 1);
        out.levels[l] = {layers::pointwise(ctx, h, head_name(l, "obj")), layers::pointwise(ctx, h, head_name(l, "box")),
                         layers::pointwise(ctx, h, head_name(l, "cls")), kStrides[l]};
    }
    return out;
}

HeadTensors head_values(const Graph& g, const HeadOutput& out, std::size_t input_size) {
    HeadTensors t;
    t.input_size = input_size;
    for (std::size_t l = 0; l < 3; ++l) {
        t.levels[l] = {g.value(out.levels[l].obj), g.value(out.levels[l].box), g.value(out.levels[l].cls),
                       out.levels[l].stride};
    }
    return t;
}

// ------------------------------------------------------------------ loss ---

std::size_t assign_level(const LabeledBox& box, std::size_t input_size) {
    const double side = std::sqrt(box.w * box.h) * static_cast<double>(input_size);
    std::size_t best = 0;
    double best_gap = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < kStrides.size(); ++l) {
        const double gap = std::abs(side - 4.0 * static_cast<double>(kStrides[l]));
        if (gap < best_gap) best_gap = gap, best = l;
    }
    return best;
}

namespace {

void check_target(const LabeledBox& b, std::size_t num_classes) {
    const bool coords_ok = b.cx >= 0 && b.cx <= 1 && b.cy >= 0 && b.cy <= 1 && b.w > 0 && b.w <= 1 && b.h > 0 && b.h <= 1;
    if (!coords_ok || b.class_id < 0 || static_cast<std::size_t>(b.class_id) >= num_classes) {
        throw Error(Errc::out_of_range_target, "target " + format_yolo_label(b) + " is outside [0, 1] or the class range");
    }
}

std::size_t grid_index(double v, std::size_t input_size, std::size_t stride) {
    const std::size_t grid = input_size / stride;
    const auto i = static_cast<std::size_t>(std::max(0.0, std::floor(v * static_cast<double>(input_size) / static_cast<double>(stride))));
    return std::min(i, grid - 1);
}

}  // namespace

DetectionLoss detection_loss(Graph& g, const HeadOutput& out, const std::vector<std::vector<LabeledBox>>& targets,
                             std::size_t input_size, std::size_t num_classes) {
    const std::size_t B = g.value(out.levels[0].obj).dim(0);
    if (targets.size() != B) throw Error(Errc::shape_mismatch, "one target list per image required");

    struct LevelPositives {
        std::vector<ops::Cell> cells;
        std::vector<ops::BoxAnchor> anchors;
        std::vector<ops::BoxTarget> boxes;
        std::vector<std::size_t> labels;
    };
    std::array<LevelPositives, 3> pos;
    std::array<Tensor, 3> obj_targets;
    for (std::size_t l = 0; l < 3; ++l) {
        obj_targets[l] = Tensor(g.value(out.levels[l].obj).shape(), 0.0);
    }
    for (std::size_t b = 0; b < B; ++b) {
        for (const auto& box : targets[b]) {
            check_target(box, num_classes);
            const std::size_t l = assign_level(box, input_size);
            const std::size_t stride = kStrides[l];
            const std::size_t grid = input_size / stride;
            const std::size_t gx = grid_index(box.cx, input_size, stride), gy = grid_index(box.cy, input_size, stride);
            double& slot = obj_targets[l][(b * grid + gy) * grid + gx];
            if (slot == 1.0) continue;
            slot = 1.0;
            pos[l].cells.push_back({b, gy, gx});
            pos[l].anchors.push_back({static_cast<double>(gx), static_cast<double>(gy), static_cast<double>(stride),
                                      static_cast<double>(input_size)});
            pos[l].boxes.push_back({box.cx, box.cy, box.w, box.h});
            pos[l].labels.push_back(static_cast<std::size_t>(box.class_id));
        }
    }

    DetectionLoss loss;
    std::vector<Var> obj_terms, box_terms, cls_terms;
    for (std::size_t l = 0; l < 3; ++l) {
        obj_terms.push_back(ops::bce_with_logits(g, out.levels[l].obj, obj_targets[l]));
        if (pos[l].cells.empty()) continue;
        loss.positives += pos[l].cells.size();
        Var tb = ops::gather_cells(g, out.levels[l].box, pos[l].cells);
        box_terms.push_back(ops::giou_loss(g, tb, pos[l].anchors, pos[l].boxes));
        Var tc = ops::gather_cells(g, out.levels[l].cls, pos[l].cells);
        cls_terms.push_back(ops::cross_entropy(g, tc, pos[l].labels));
    }
    auto sum = [&](const std::vector<Var>& terms) {
        Var s = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) s = ops::add(g, s, terms[i]);
        return s;
    };
    loss.obj = ops::scale(g, sum(obj_terms), 1.0 / static_cast<double>(std::max<std::size_t>(1, loss.positives)));
    if (loss.positives == 0) {
        loss.box = g.constant(Tensor::scalar(0.0));
        loss.cls = g.constant(Tensor::scalar(0.0));
    } else {
        const double inv = 1.0 / static_cast<double>(loss.positives);
        loss.box = ops::scale(g, sum(box_terms), inv);
        loss.cls = ops::scale(g, sum(cls_terms), inv);
    }
    Var t = ops::add(g, ops::scale(g, loss.box, kBoxLossWeight), ops::scale(g, loss.obj, kObjLossWeight));
    loss.total = ops::add(g, t, ops::scale(g, loss.cls, kClsLossWeight));
    return loss;
}

Var total_loss(Graph& g, Var det, AuxLossCollector& collector) {
    if (collector.empty()) return det;
    return ops::add(g, det, drain_collector(g, collector));
}

// ---------------------------------------------------------------- decode ---

std::array<double, 4> encode_box(const LabeledBox& box, std::size_t stride, std::size_t input_size, std::size_t gx,
                                 std::size_t gy) {
    const double unit = static_cast<double>(stride) / static_cast<double>(input_size);
    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    return {logit(box.cx / unit - static_cast<double>(gx)), logit(box.cy / unit - static_cast<double>(gy)),
            std::log(box.w / (4.0 * unit)), std::log(box.h / (4.0 * unit))};
}

Box decode_box(std::span<const double, 4> t, std::size_t stride, std::size_t input_size, std::size_t gx, std::size_t gy) {
    const double unit = static_cast<double>(stride) / static_cast<double>(input_size);
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    return {(static_cast<double>(gx) + sig(t[0])) * unit, (static_cast<double>(gy) + sig(t[1])) * unit,
            std::exp(t[2]) * 4.0 * unit, std::exp(t[3]) * 4.0 * unit};
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thr) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
    std::vector<Detection> kept;
    for (const auto& d : dets) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.image == d.image && k.class_id == d.class_id && iou(k.box, d.box) > iou_thr) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

std::vector<Detection> decode(const HeadTensors& out, const DecodeOptions& opts, std::size_t image_offset) {
    std::vector<Detection> dets;
    const std::size_t B = out.levels[0].obj.dim(0);
    for (const auto& lv : out.levels) {
        const std::size_t C = lv.cls.dim(1), H = lv.obj.dim(2), W = lv.obj.dim(3), HW = H * W;
        std::vector<double> probs(C);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    const std::size_t cell = y * W + x;
                    const double p_obj = 1.0 / (1.0 + std::exp(-lv.obj[b * HW + cell]));
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, lv.cls[(b * C + c) * HW + cell]);
                    double z = 0.0;
                    for (std::size_t c = 0; c < C; ++c) z += probs[c] = std::exp(lv.cls[(b * C + c) * HW + cell] - mx);
                    const auto best = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
                    const double conf = p_obj * probs[best] / z;
                    if (conf < opts.conf_threshold) continue;
                    const std::array<double, 4> t{lv.box[(b * 4 + 0) * HW + cell], lv.box[(b * 4 + 1) * HW + cell],
                                                  lv.box[(b * 4 + 2) * HW + cell], lv.box[(b * 4 + 3) * HW + cell]};
                    dets.push_back({b + image_offset, static_cast<int>(best), conf,
                                    decode_box(t, lv.stride, out.input_size, x, y)});
                }
    }
    if (opts.nms) dets = nms(std::move(dets), opts.iou_nms);
    return dets;
}

// ------------------------------------------------------------- optimiser ---

void TrainConfig::validate() const {
    if (!(lr0 > 0)) throw Error(Errc::invalid_argument, "lr0 must be positive");
    if (!(lrf > 0 && lrf <= 1)) throw Error(Errc::invalid_argument, "lrf must lie in (0, 1]");
    if (patience < 1) throw Error(Errc::invalid_argument, "patience must be at least 1");
    if (batch < 1) throw Error(Errc::invalid_argument, "batch must be at least 1");
    if (epochs < 1) throw Error(Errc::invalid_argument, "epochs must be at least 1");
    if (warmup_epochs < 0) throw Error(Errc::invalid_argument, "warmup_epochs must be nonnegative");
    if (momentum < 0 || momentum >= 1) throw Error(Errc::invalid_argument, "momentum must lie in [0, 1)");
    if (weight_decay < 0) throw Error(Errc::invalid_argument, "weight_decay must be nonnegative");
}

nlohmann::json to_json(const TrainConfig& tc) {
    return {{"epochs", tc.epochs},
            {"batch", tc.batch},
            {"optimizer", to_string(tc.optimizer)},
            {"lr0", tc.lr0},
            {"lrf", tc.lrf},
            {"momentum", tc.momentum},
            {"weight_decay", tc.weight_decay},
            {"warmup_epochs", tc.warmup_epochs},
            {"patience", tc.patience},
            {"seed", tc.seed},
            {"hsv_h", tc.augment.hsv_h},
            {"hsv_s", tc.augment.hsv_s},
            {"hsv_v", tc.augment.hsv_v},
            {"mosaic", tc.augment.mosaic},
            {"mixup", tc.augment.mixup},
            {"degrees", tc.augment.degrees},
            {"translate", tc.augment.translate},
            {"max_steps", tc.max_steps}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig tc) {
    if (!j.is_object()) throw Error(Errc::invalid_argument, "training config must be a JSON object");
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    try {
        get("epochs", tc.epochs);
        get("batch", tc.batch);
        if (j.contains("optimizer")) tc.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
        get("lr0", tc.lr0);
        get("lrf", tc.lrf);
        get("momentum", tc.momentum);
        get("weight_decay", tc.weight_decay);
        get("warmup_epochs", tc.warmup_epochs);
        get("patience", tc.patience);
        get("seed", tc.seed);
        get("hsv_h", tc.augment.hsv_h);
        get("hsv_s", tc.augment.hsv_s);
        get("hsv_v", tc.augment.hsv_v);
        get("mosaic", tc.augment.mosaic);
        get("mixup", tc.augment.mixup);
        get("degrees", tc.augment.degrees);
        get("translate", tc.augment.translate);
        get("max_steps", tc.max_steps);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::invalid_argument, std::string("bad training config: ") + e.what());
    }
    return tc;
}

double learning_rate(const TrainConfig& tc, std::size_t epoch) {
    const double e = static_cast<double>(epoch);
    const double warm = std::min(1.0, (e + 1.0) / (tc.warmup_epochs + 1.0));
    const double span = tc.epochs > 1 ? static_cast<double>(tc.epochs - 1) : 1.0;
    const double cosine = tc.lrf + (1.0 - tc.lrf) * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(e, span) / span));
    return tc.lr0 * warm * cosine;
}

void Optimizer::step(ParamStore& store, const NamedTensors& grads, double lr) {
    ++t_;
    const double b1 = tc_.momentum, b2 = 0.999, eps = 1e-8;
    for (const auto& [name, grad] : grads) {
        auto it = store.params.find(name);
        if (it == store.params.end()) continue;
        Tensor& p = it->second;
        const double wd = p.rank() >= 2 ? tc_.weight_decay : 0.0;
        auto& m = m_.try_emplace(name, p.shape(), 0.0).first->second;
        if (tc_.optimizer == OptimizerKind::sgd_momentum) {
            for (std::size_t i = 0; i < p.numel(); ++i) {
                m[i] = b1 * m[i] + grad[i] + wd * p[i];
                p[i] -= lr * m[i];
            }
        } else {
            auto& v = v_.try_emplace(name, p.shape(), 0.0).first->second;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_)), c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
            for (std::size_t i = 0; i < p.numel(); ++i) {
                m[i] = b1 * m[i] + (1 - b1) * grad[i];
                v[i] = b2 * v[i] + (1 - b2) * grad[i] * grad[i];
                p[i] -= lr * ((m[i] / c1) / (std::sqrt(v[i] / c2) + eps) + wd * p[i]);
            }
        }
    }
}

// -------------------------------------------------------------- training ---

nlohmann::json to_json(const EpochRecord& r) {
    nlohmann::json j{{"epoch", r.epoch},
                     {"lr", r.lr},
                     {"steps", r.steps},
                     {"losses", {{"box", r.box}, {"obj", r.obj}, {"cls", r.cls}, {"aux", r.aux}, {"total", r.total}}},
                     {"val_map50", r.val_map50},
                     {"val_map5095", r.val_map5095}};
    if (r.load_entropy) {
        j["load_entropy"] = *r.load_entropy;
        j["expert_load"] = r.expert_load;
    }
    return j;
}

std::vector<GroundTruth> ground_truth(const std::vector<LabeledImage>& items) {
    std::vector<GroundTruth> gts;
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto g = to_ground_truth(items[i].boxes, i);
        gts.insert(gts.end(), g.begin(), g.end());
    }
    return gts;
}

std::vector<Detection> predict(Model& model, const std::vector<LabeledImage>& items, const DecodeOptions& opts,
                               std::size_t batch) {
    std::vector<Detection> dets;
    for (std::size_t start = 0; start < items.size(); start += batch) {
        const std::size_t end = std::min(items.size(), start + batch);
        std::vector<const LabeledImage*> ptrs;
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&items[i]);
        Graph g;
        Context ctx(g, model.store, false);
        Var x = g.input("images", images_to_tensor(ptrs));
        const auto out = forward(ctx, model.config, x);
        auto d = decode(head_values(g, out, model.config.input_size), opts, start);
        dets.insert(dets.end(), d.begin(), d.end());
    }
    return dets;
}

SplitScore score_split(Model& model, const std::vector<LabeledImage>& items) {
    const auto dets = predict(model, items, {0.001, true, 0.6});
    const auto gts = ground_truth(items);
    return {map_at(dets, gts, {0.5}).map, map_at(dets, gts, coco_thresholds()).map};
}

TrainResult train(Model& model, const std::vector<LabeledImage>& train_set, const std::vector<LabeledImage>& val_set,
                  const TrainConfig& tc, const TrainHooks& hooks) {
    tc.validate();
    if (train_set.empty()) throw Error(Errc::empty_dataset, "training split is empty");
    if (val_set.empty()) throw Error(Errc::empty_dataset, "validation split is empty");
    const ModelConfig& cfg = model.config;
    const bool is_moe = cfg.variant == Variant::moe;
    const std::size_t E = is_moe ? cfg.moe.num_experts : 0;

    std::ofstream history;
    if (hooks.dir) {
        std::filesystem::create_directories(*hooks.dir);
        history.open(*hooks.dir / "history.jsonl", std::ios::trunc);
        if (!history) throw Error(Errc::io_failure, "cannot write " + (*hooks.dir / "history.jsonl").string());
    }

    TrainResult result;
    result.best = model.store;
    Optimizer opt(tc);
    std::mt19937_64 rng(tc.seed);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t since_best = 0;
    bool have_best = false;

    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = learning_rate(tc, epoch);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<double> load_counts(E, 0.0);

        for (std::size_t start = 0; start < order.size(); start += tc.batch) {
            if (tc.max_steps && result.steps >= tc.max_steps) break;
            const std::size_t end = std::min(order.size(), start + tc.batch);
            std::vector<LabeledImage> augmented;
            std::vector<const LabeledImage*> ptrs;
            if (tc.augment.all_zero()) {
                for (std::size_t i = start; i < end; ++i) ptrs.push_back(&train_set[order[i]]);
            } else {
                augmented.reserve(end - start);
                for (std::size_t i = start; i < end; ++i) augmented.push_back(augment(train_set[order[i]], tc.augment, rng, train_set));
                for (const auto& a : augmented) ptrs.push_back(&a);
            }
            std::vector<std::vector<LabeledBox>> targets;
            for (const auto* p : ptrs) targets.push_back(p->boxes);

            Graph g(tc.seed);
            Context ctx(g, model.store, true);
            AuxLossCollector collector;
            MoETrace trace;
            Var x = g.input("images", images_to_tensor(ptrs));
            const auto out = forward(ctx, cfg, x, is_moe ? &collector : nullptr, result.steps, is_moe ? &trace : nullptr);
            const auto det = detection_loss(g, out, targets, cfg.input_size, cfg.num_classes);
            Var total = total_loss(g, det.total, collector);
            const double tv = g.value(total)[0];
            if (!std::isfinite(tv)) {
                throw Error(Errc::non_finite_loss, "loss became " + std::to_string(tv) + " at epoch " + std::to_string(epoch) +
                                                       ", step " + std::to_string(result.steps));
            }
            g.backward(total);
            opt.step(model.store, ctx.gradients(), rec.lr);

            rec.box += g.value(det.box)[0];
            rec.obj += g.value(det.obj)[0];
            rec.cls += g.value(det.cls)[0];
            rec.total += tv;
            rec.aux += tv - g.value(det.total)[0];
            for (std::size_t e = 0; e < E; ++e) {
                load_counts[e] += trace.stats.load[e] * static_cast<double>(ptrs.size() * cfg.moe.top_k);
            }
            ++rec.steps;
            ++result.steps;
        }
        if (rec.steps > 0) {
            const double n = static_cast<double>(rec.steps);
            rec.box /= n, rec.obj /= n, rec.cls /= n, rec.aux /= n, rec.total /= n;
        }
        if (is_moe) {
            rec.expert_load = load_counts;
            rec.load_entropy = load_entropy(load_counts);
        }
        const auto score = hooks.evaluate ? hooks.evaluate(model) : score_split(model, val_set);
        rec.val_map50 = score.map50;
        rec.val_map5095 = score.map5095;
        result.history.push_back(rec);
        if (history) history << to_json(rec).dump() << "\n" << std::flush;

        if (!have_best || rec.val_map5095 > result.best_objective) {
            have_best = true;
            result.best_objective = rec.val_map5095;
            result.best_epoch = epoch;
            result.best = model.store;
            since_best = 0;
            if (hooks.dir) save_model(*hooks.dir / "best.ckpt", model, {{"epoch", epoch}});
        } else {
            ++since_best;
        }
        const bool keep_going = hooks.on_epoch ? hooks.on_epoch(rec) : true;
        if (!keep_going) {
            result.stopped_by_callback = true;
            break;
        }
        if (since_best >= tc.patience) {
            result.stopped_early = true;
            break;
        }
        if (tc.max_steps && result.steps >= tc.max_steps) break;
    }
    if (hooks.dir) save_model(*hooks.dir / "last.ckpt", model, {{"epoch", result.history.back().epoch}});
    return result;
}

// ----------------------------------------------------------- checkpoints ---

nlohmann::json model_meta(const ModelConfig& c) {
    return {{"variant", to_string(c.variant)},
            {"input_size", c.input_size},
            {"num_classes", c.num_classes},
            {"widths", c.widths},
            {"moe",
             {{"num_experts", c.moe.num_experts},
              {"top_k", c.moe.top_k},
              {"hidden_channels", c.moe.hidden_channels},
              {"lambda0", c.moe.lambda0},
              {"warmup_iters", c.moe.warmup_iters}}}};
}

ModelConfig model_config_from_meta(const nlohmann::json& meta) {
    try {
        ModelConfig c;
        c.variant = parse_variant(meta.at("variant").get<std::string>());
        c.input_size = meta.at("input_size").get<std::size_t>();
        c.num_classes = meta.at("num_classes").get<std::size_t>();
        c.widths = meta.at("widths").get<std::array<std::size_t, 5>>();
        const auto& m = meta.at("moe");
        c.moe.num_experts = m.at("num_experts").get<std::size_t>();
        c.moe.top_k = m.at("top_k").get<std::size_t>();
        c.moe.hidden_channels = m.at("hidden_channels").get<std::size_t>();
        c.moe.lambda0 = m.at("lambda0").get<double>();
        c.moe.warmup_iters = m.at("warmup_iters").get<std::size_t>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::bad_checkpoint, std::string("checkpoint lacks a model description: ") + e.what());
    }
}

void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra) {
    nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
    meta["model"] = model_meta(model.config);
    save_checkpoint(path, model.store, meta);
}

Model load_model(const std::filesystem::path& path) {
    auto ck = load_checkpoint(path);
    if (!ck.meta.contains("model")) throw Error(Errc::bad_checkpoint, path.string() + " has no model description");
    Model m;
    m.config = model_config_from_meta(ck.meta.at("model"));
    m.store = std::move(ck.store);
    const auto expected = build_model(m.config, 0).store;
    for (const auto& [name, t] : expected.params) {
        auto it = m.store.params.find(name);
        if (it == m.store.params.end() || it->second.shape() != t.shape()) {
            throw Error(Errc::bad_checkpoint, path.string() + ": parameter '" + name + "' missing or mis-shaped");
        }
    }
    return m;
}

}  // namespace mdf
