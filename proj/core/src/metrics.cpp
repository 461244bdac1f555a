#include "mdf/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "mdf/error.hpp"

namespace mdf {

namespace {

std::vector<std::size_t> by_confidence(const std::vector<Detection>& dets) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
    return order;
}

/// Greedy claims in confidence order. When `class_aware` is false a detection
/// may claim a gt of any class.
std::vector<std::pair<std::size_t, std::size_t>> greedy_claims(const std::vector<Detection>& dets,
                                                               const std::vector<GroundTruth>& gts, double thr,
                                                               bool class_aware, std::vector<bool>& gt_used,
                                                               const std::vector<std::size_t>& order) {
    std::vector<std::pair<std::size_t, std::size_t>> claims;
    gt_used.assign(gts.size(), false);
    for (std::size_t d : order) {
        double best = -1.0;
        std::size_t best_gt = gts.size();
        for (std::size_t k = 0; k < gts.size(); ++k) {
            if (gt_used[k] || gts[k].image != dets[d].image) continue;
            if (class_aware && gts[k].class_id != dets[d].class_id) continue;
            const double v = iou(dets[d].box, gts[k].box);
            if (v >= thr && v > best) {
                best = v;
                best_gt = k;
            }
        }
        if (best_gt < gts.size()) {
            gt_used[best_gt] = true;
            claims.emplace_back(d, best_gt);
        }
    }
    return claims;
}

}  // namespace

double iou(const Box& a, const Box& b) {
    const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2, ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
    const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2, by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
    const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = iw * ih;
    const double uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

ClassCounts MatchResult::totals() const {
    ClassCounts t;
    for (const auto& [_, c] : per_class) {
        t.tp += c.tp;
        t.fp += c.fp;
        t.fn += c.fn;
    }
    return t;
}

MatchResult match(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, double iou_threshold) {
    MatchResult m;
    m.iou_threshold = iou_threshold;
    m.det_matched.assign(dets.size(), false);
    auto claims = greedy_claims(dets, gts, iou_threshold, true, m.gt_matched, by_confidence(dets));
    for (const auto& [d, k] : claims) {
        m.det_matched[d] = true;
        m.pairs.push_back({d, k, iou(dets[d].box, gts[k].box)});
    }
    for (std::size_t d = 0; d < dets.size(); ++d) {
        auto& c = m.per_class[dets[d].class_id];
        (m.det_matched[d] ? c.tp : c.fp) += 1;
    }
    for (std::size_t k = 0; k < gts.size(); ++k) {
        auto& c = m.per_class[gts[k].class_id];
        if (!m.gt_matched[k]) c.fn += 1;
    }
    return m;
}

double f1_score(double precision, double recall) {
    if (precision + recall <= 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

PRF1 precision_recall_f1(const ClassCounts& c) {
    PRF1 r;
    r.precision = c.tp + c.fp == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    r.recall = c.tp + c.fn == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    r.f1 = f1_score(r.precision, r.recall);
    return r;
}

PRF1 precision_recall_f1(const MatchResult& m) { return precision_recall_f1(m.totals()); }

PRCurve average_precision(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, double iou_threshold) {
    PRCurve curve;
    const auto order = by_confidence(dets);
    std::vector<bool> gt_used;
    auto claims = greedy_claims(dets, gts, iou_threshold, true, gt_used, order);
    std::vector<bool> is_tp(dets.size(), false);
    for (const auto& [d, _] : claims) is_tp[d] = true;
    if (gts.empty()) return curve;

    const double n_gt = static_cast<double>(gts.size());
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const std::size_t d = order[i];
        (is_tp[d] ? tp : fp) += 1;
        const bool last_of_level = i + 1 == order.size() || dets[order[i + 1]].confidence != dets[d].confidence;
        if (last_of_level) {
            curve.points.push_back({dets[d].confidence, static_cast<double>(tp) / n_gt,
                                    static_cast<double>(tp) / static_cast<double>(tp + fp)});
        }
    }
    double envelope = 0.0;
    std::vector<double> interp(curve.points.size());
    for (std::size_t i = curve.points.size(); i-- > 0;) {
        envelope = std::max(envelope, curve.points[i].precision);
        interp[i] = envelope;
    }
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < curve.points.size(); ++i) {
        curve.ap += (curve.points[i].recall - prev_recall) * interp[i];
        prev_recall = curve.points[i].recall;
    }
    return curve;
}

std::vector<double> coco_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back((50.0 + 5.0 * i) / 100.0);
    return t;
}

MapResult map_at(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                 const std::vector<double>& thresholds) {
    if (thresholds.empty()) throw Error(Errc::invalid_argument, "map_at needs at least one IoU threshold");
    std::set<int> with_gt;
    for (const auto& g : gts) with_gt.insert(g.class_id);
    if (with_gt.empty()) throw Error(Errc::no_classes_with_ground_truth, "no ground-truth boxes to evaluate against");

    MapResult r;
    r.thresholds = thresholds;
    for (int c : with_gt) {
        std::vector<Detection> cd;
        std::vector<GroundTruth> cg;
        for (const auto& d : dets)
            if (d.class_id == c) cd.push_back(d);
        for (const auto& g : gts)
            if (g.class_id == c) cg.push_back(g);
        std::vector<double> row;
        double sum = 0.0;
        for (double t : thresholds) {
            row.push_back(average_precision(cd, cg, t).ap);
            sum += row.back();
        }
        r.classes.push_back(c);
        r.ap.push_back(std::move(row));
        r.class_ap.push_back(sum / static_cast<double>(thresholds.size()));
    }
    r.map = std::accumulate(r.class_ap.begin(), r.class_ap.end(), 0.0) / static_cast<double>(r.class_ap.size());
    return r;
}

double tradeoff_score(double map, const TradeoffParams& params) {
    if (!(params.reference_ms > 0.0)) throw Error(Errc::invalid_argument, "reference latency must be positive");
    return map - params.latency_alpha * params.latency_ms / params.reference_ms;
}

std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<Detection>& dets,
                                                       const std::vector<GroundTruth>& gts, std::size_t num_classes,
                                                       double iou_threshold, double conf_threshold) {
    std::vector<std::vector<std::size_t>> cm(num_classes + 1, std::vector<std::size_t>(num_classes + 1, 0));
    auto index = [num_classes](int c) {
        if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
            throw Error(Errc::out_of_range, "class id " + std::to_string(c) + " outside " + std::to_string(num_classes));
        }
        return static_cast<std::size_t>(c);
    };
    std::vector<Detection> kept;
    for (const auto& d : dets)
        if (d.confidence >= conf_threshold) kept.push_back(d);
    std::vector<bool> gt_used;
    auto claims = greedy_claims(kept, gts, iou_threshold, false, gt_used, by_confidence(kept));
    std::vector<bool> det_used(kept.size(), false);
    for (const auto& [d, k] : claims) {
        det_used[d] = true;
        cm[index(gts[k].class_id)][index(kept[d].class_id)] += 1;
    }
    for (std::size_t k = 0; k < gts.size(); ++k)
        if (!gt_used[k]) cm[index(gts[k].class_id)][num_classes] += 1;
    for (std::size_t d = 0; d < kept.size(); ++d)
        if (!det_used[d]) cm[num_classes][index(kept[d].class_id)] += 1;
    return cm;
}

EvalReport evaluate_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                               const std::vector<std::string>& class_names, double conf_threshold, double iou_threshold) {
    EvalReport rep;
    const auto m50 = map_at(dets, gts, {0.5});
    const auto m5095 = map_at(dets, gts, coco_thresholds());
    rep.map50 = m50.map;
    rep.map5095 = m5095.map;

    std::vector<Detection> kept;
    for (const auto& d : dets)
        if (d.confidence >= conf_threshold) kept.push_back(d);
    const auto m = match(kept, gts, iou_threshold);
    rep.overall = precision_recall_f1(m);

    for (std::size_t c = 0; c < class_names.size(); ++c) {
        ClassReport cr;
        cr.class_id = static_cast<int>(c);
        cr.name = class_names[c];
        for (const auto& g : gts)
            if (g.class_id == cr.class_id) ++cr.gt_count;
        for (std::size_t i = 0; i < m50.classes.size(); ++i) {
            if (m50.classes[i] == cr.class_id) {
                cr.ap50 = m50.class_ap[i];
                cr.ap5095 = m5095.class_ap[i];
            }
        }
        if (auto it = m.per_class.find(cr.class_id); it != m.per_class.end()) cr.prf = precision_recall_f1(it->second);
        rep.per_class.push_back(cr);
    }
    rep.confusion = confusion_matrix(dets, gts, class_names.size(), iou_threshold, conf_threshold);
    return rep;
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& c : r.per_class) {
        per_class.push_back({{"class_id", c.class_id},
                             {"name", c.name},
                             {"gt_count", c.gt_count},
                             {"ap50", c.ap50},
                             {"ap5095", c.ap5095},
                             {"precision", c.prf.precision},
                             {"recall", c.prf.recall},
                             {"f1", c.prf.f1}});
    }
    return {{"map50", r.map50},         {"map5095", r.map5095}, {"precision", r.overall.precision},
            {"recall", r.overall.recall}, {"f1", r.overall.f1},   {"per_class", per_class},
            {"confusion", r.confusion}};
}

}  // namespace mdf
