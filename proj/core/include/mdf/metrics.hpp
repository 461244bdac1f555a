#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mdf {

/// Axis-aligned box in normalised (cx, cy, w, h) form.
struct Box {
    double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
    friend bool operator==(const Box&, const Box&) = default;
};

struct Detection {
    std::size_t image = 0;
    int class_id = 0;
    double confidence = 0.0;
    Box box;
};

struct GroundTruth {
    std::size_t image = 0;
    int class_id = 0;
    Box box;
};

double iou(const Box& a, const Box& b);

struct ClassCounts {
    std::size_t tp = 0, fp = 0, fn = 0;
};

struct MatchedPair {
    std::size_t det = 0;
    std::size_t gt = 0;
    double iou = 0.0;
};

struct MatchResult {
    double iou_threshold = 0.5;
    std::map<int, ClassCounts> per_class;
    std::vector<MatchedPair> pairs;
    std::vector<bool> det_matched;  // indexed like the input detections
    std::vector<bool> gt_matched;

    [[nodiscard]] ClassCounts totals() const;
};

/// Greedy matching within each (image, class): detections in descending
/// confidence (input order on ties) claim the unmatched gt of highest IoU that
/// reaches the threshold.
MatchResult match(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, double iou_threshold);

struct PRF1 {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
};

/// Harmonic mean; 0 when p + r == 0.
double f1_score(double precision, double recall);
PRF1 precision_recall_f1(const ClassCounts& c);
PRF1 precision_recall_f1(const MatchResult& m);

struct PRPoint {
    double confidence = 0.0;
    double recall = 0.0;
    double precision = 0.0;
};

struct PRCurve {
    std::vector<PRPoint> points;  // one per distinct confidence, descending
    double ap = 0.0;
};

/// All-point AP with the monotone precision envelope. Detections and ground
/// truths of every class are matched class-wise but pooled into one curve, so
/// callers pass a single class for per-class AP.
PRCurve average_precision(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, double iou_threshold);

struct MapResult {
    std::vector<double> thresholds;
    std::vector<int> classes;               // classes with at least one gt
    std::vector<std::vector<double>> ap;    // [class][threshold]
    std::vector<double> class_ap;           // mean over thresholds per class
    double map = 0.0;
};

/// Mean over classes (with gt) of mean over thresholds of AP.
MapResult map_at(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                 const std::vector<double>& thresholds);

/// {0.5, 0.55, ..., 0.95}.
std::vector<double> coco_thresholds();

struct TradeoffParams {
    double latency_alpha = 0.0;
    double latency_ms = 0.0;
    double reference_ms = 1.0;
};

/// mAP - alpha * T / T0.
double tradeoff_score(double map, const TradeoffParams& params);

/// (num_classes + 1)^2 counts indexed [gt_class][det_class]; index
/// num_classes is background. Matching ignores class so confusions are visible.
std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<Detection>& dets,
                                                       const std::vector<GroundTruth>& gts, std::size_t num_classes,
                                                       double iou_threshold, double conf_threshold);

struct ClassReport {
    int class_id = 0;
    std::string name;
    std::size_t gt_count = 0;
    double ap50 = 0.0, ap5095 = 0.0;
    PRF1 prf;
};

struct EvalReport {
    double map50 = 0.0, map5095 = 0.0;
    PRF1 overall;
    std::vector<ClassReport> per_class;
    std::vector<std::vector<std::size_t>> confusion;
};

/// mAP uses every detection; precision/recall/F1 and the confusion matrix use
/// detections at or above conf_threshold, matched at iou_threshold.
EvalReport evaluate_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                               const std::vector<std::string>& class_names, double conf_threshold, double iou_threshold);

nlohmann::json to_json(const EvalReport& report);

}  // namespace mdf
