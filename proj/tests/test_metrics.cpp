#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mdf/error.hpp"
#include "mdf/metrics.hpp"

using namespace mdf;

namespace {

Box random_box(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> c(0.3, 0.7), s(0.1, 0.4);
    return {c(rng), c(rng), s(rng), s(rng)};
}

// Brute force over every claim order; keeps the orders whose confidences are
// non-increasing with input-index tie-break and replays the claims.
ClassCounts enumerate_greedy(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, double thr) {
    std::vector<std::size_t> perm(dets.size());
    std::iota(perm.begin(), perm.end(), 0);
    ClassCounts result;
    bool found = false;
    do {
        bool ordered = true;
        for (std::size_t i = 1; i < perm.size(); ++i) {
            const auto& a = dets[perm[i - 1]];
            const auto& b = dets[perm[i]];
            if (a.confidence < b.confidence || (a.confidence == b.confidence && perm[i - 1] > perm[i])) ordered = false;
        }
        if (!ordered) continue;
        REQUIRE_FALSE(found);
        found = true;
        std::vector<bool> used(gts.size(), false);
        for (std::size_t d : perm) {
            std::size_t pick = gts.size();
            double best = -1;
            for (std::size_t k = 0; k < gts.size(); ++k) {
                if (used[k] || gts[k].class_id != dets[d].class_id) continue;
                const double v = iou(dets[d].box, gts[k].box);
                if (v >= thr && v > best) best = v, pick = k;
            }
            if (pick < gts.size()) {
                used[pick] = true;
                ++result.tp;
            } else {
                ++result.fp;
            }
        }
        result.fn = static_cast<std::size_t>(std::count(used.begin(), used.end(), false));
    } while (std::next_permutation(perm.begin(), perm.end()));
    REQUIRE(found);
    return result;
}

}  // namespace

TEST_CASE("iou") {
    Box a{0.5, 0.5, 0.2, 0.2};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, Box{0.1, 0.1, 0.1, 0.1}) == 0.0);
    CHECK(iou(Box{0.5, 0.5, 1, 1}, Box{1.0, 0.5, 1, 1}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(iou(Box{0.5, 0.5, 0, 0}, Box{0.5, 0.5, 0, 0}) == 0.0);
}

TEST_CASE("match contracts") {
    std::vector<GroundTruth> g{{0, 1, {0.5, 0.5, 0.2, 0.2}}};
    auto m = match({{0, 1, 0.9, {0.5, 0.5, 0.2, 0.2}}}, g, 0.5);
    CHECK(m.totals().tp == 1);
    CHECK(m.totals().fp == 0);
    CHECK(m.totals().fn == 0);

    auto dup = match({{0, 1, 0.9, {0.5, 0.5, 0.2, 0.2}}, {0, 1, 0.8, {0.5, 0.5, 0.2, 0.2}}}, g, 0.5);
    CHECK(dup.totals().tp == 1);
    CHECK(dup.totals().fp == 1);
    CHECK(dup.det_matched == std::vector<bool>{true, false});

    // Same box in a different image cannot match.
    auto other = match({{1, 1, 0.9, {0.5, 0.5, 0.2, 0.2}}}, g, 0.5);
    CHECK(other.totals().tp == 0);
}

TEST_CASE("match equals brute-force claim enumeration") {
    std::mt19937_64 rng(12);
    std::uniform_int_distribution<int> cls(0, 1);
    std::uniform_real_distribution<double> conf(0, 1);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Detection> d;
        std::vector<GroundTruth> g;
        for (int i = 0; i < 3; ++i) d.push_back({0, cls(rng), trial % 5 == 0 ? 0.5 : conf(rng), random_box(rng)});
        for (int i = 0; i < 2; ++i) g.push_back({0, cls(rng), random_box(rng)});
        auto m = match(d, g, 0.3).totals();
        auto ref = enumerate_greedy(d, g, 0.3);
        CHECK(m.tp == ref.tp);
        CHECK(m.fp == ref.fp);
        CHECK(m.fn == ref.fn);
    }
}

TEST_CASE("tp + fn equals gt count per class") {
    std::mt19937_64 rng(13);
    std::uniform_int_distribution<int> cls(0, 2), count(0, 6);
    std::uniform_real_distribution<double> conf(0, 1);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Detection> d;
        std::vector<GroundTruth> g;
        for (int i = count(rng); i > 0; --i) d.push_back({0, cls(rng), conf(rng), random_box(rng)});
        for (int i = count(rng); i > 0; --i) g.push_back({0, cls(rng), random_box(rng)});
        auto m = match(d, g, 0.5);
        for (int c = 0; c < 3; ++c) {
            const auto n = static_cast<std::size_t>(std::count_if(g.begin(), g.end(), [c](auto& x) { return x.class_id == c; }));
            auto it = m.per_class.find(c);
            const std::size_t got = it == m.per_class.end() ? 0 : it->second.tp + it->second.fn;
            CHECK(got == n);
        }
    }
}

TEST_CASE("precision, recall and F1") {
    CHECK(std::abs(f1_score(0.9555, 0.9255) - 0.9403) <= 5e-5);
    CHECK(std::abs(f1_score(0.9701, 0.9635) - 0.9668) <= 5e-5);
    auto z = precision_recall_f1(ClassCounts{});
    CHECK(z.precision == 0.0);
    CHECK(z.recall == 0.0);
    CHECK(z.f1 == 0.0);

    for (std::size_t tp = 0; tp < 6; ++tp)
        for (std::size_t fp = 0; fp < 6; ++fp)
            for (std::size_t fn = 0; fn < 6; ++fn) {
                auto r = precision_recall_f1(ClassCounts{tp, fp, fn});
                if (r.precision + r.recall > 0)
                    CHECK(std::abs(r.f1 - 2.0 / (1.0 / r.precision + 1.0 / r.recall)) < 1e-12);
            }
}

TEST_CASE("average precision hand cases") {
    Box b{0.5, 0.5, 0.2, 0.2};
    Box far{0.1, 0.1, 0.05, 0.05};
    std::vector<GroundTruth> g{{0, 0, b}};
    CHECK(average_precision({{0, 0, 0.9, b}}, g, 0.5).ap == 1.0);
    CHECK(average_precision({{0, 0, 0.95, far}, {0, 0, 0.9, b}}, g, 0.5).ap == 0.5);
    CHECK(average_precision({{0, 0, 0.95, b}, {0, 0, 0.9, far}}, g, 0.5).ap == 1.0);
    CHECK(average_precision({}, g, 0.5).ap == 0.0);
}

TEST_CASE("AP is bounded and invariant to monotone confidence transforms") {
    std::mt19937_64 rng(14);
    std::uniform_real_distribution<double> conf(0.01, 1);
    std::uniform_int_distribution<int> img(0, 2);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Detection> d;
        std::vector<GroundTruth> g;
        for (int i = 0; i < 8; ++i) d.push_back({static_cast<std::size_t>(img(rng)), 0, conf(rng), random_box(rng)});
        for (int i = 0; i < 4; ++i) g.push_back({static_cast<std::size_t>(img(rng)), 0, random_box(rng)});
        const double ap = average_precision(d, g, 0.3).ap;
        CHECK(ap >= 0.0);
        CHECK(ap <= 1.0);
        auto t = d;
        for (auto& x : t) x.confidence = std::log(x.confidence) * 3.0 + 7.0;
        CHECK(average_precision(t, g, 0.3).ap == ap);

        const auto m50 = map_at(d, g, {0.5}).map;
        const auto m5095 = map_at(d, g, coco_thresholds()).map;
        CHECK(m5095 <= m50);
    }
}

TEST_CASE("mAP cases") {
    std::vector<GroundTruth> g{{0, 0, {0.3, 0.3, 0.2, 0.2}}, {0, 1, {0.7, 0.7, 0.2, 0.3}}, {1, 2, {0.5, 0.5, 0.4, 0.4}}};
    std::vector<Detection> perfect;
    for (const auto& x : g) perfect.push_back({x.image, x.class_id, 0.8, x.box});
    CHECK(map_at(perfect, g, {0.5}).map == 1.0);
    CHECK(map_at(perfect, g, coco_thresholds()).map == 1.0);
    CHECK(map_at({}, g, coco_thresholds()).map == 0.0);

    // IoU exactly 0.6: 0.5, 0.55 and 0.6 pass out of ten thresholds.
    GroundTruth gt{0, 0, {0.3125, 0.5, 0.625, 0.5}};
    Detection det{0, 0, 0.9, {0.1875, 0.5, 0.375, 0.5}};
    REQUIRE(iou(det.box, gt.box) == 0.6);
    auto th = coco_thresholds();
    std::size_t passing = 0;
    for (double t : th) passing += iou(det.box, gt.box) >= t ? 1 : 0;
    const auto r = map_at({det}, {gt}, th);
    CHECK(r.map == static_cast<double>(passing) / 10.0);
    CHECK(r.map == 0.3);
    CHECK(r.ap[0][0] == 1.0);
    CHECK(r.ap[0][3] == 0.0);

    CHECK_THROWS_AS(map_at(perfect, {}, {0.5}), Error);
}

TEST_CASE("classes without ground truth are excluded") {
    std::vector<GroundTruth> g{{0, 0, {0.3, 0.3, 0.2, 0.2}}};
    std::vector<Detection> d{{0, 0, 0.9, {0.3, 0.3, 0.2, 0.2}}, {0, 2, 0.9, {0.7, 0.7, 0.2, 0.2}}};
    auto r = map_at(d, g, {0.5});
    CHECK(r.classes == std::vector<int>{0});
    CHECK(r.map == 1.0);
}

TEST_CASE("trade-off score") {
    CHECK(tradeoff_score(0.95, {0.1, 5.0, 5.0}) == doctest::Approx(0.85).epsilon(1e-15));
    CHECK(tradeoff_score(0.95, {0.0, 5.0, 2.0}) == 0.95);
    CHECK(tradeoff_score(0.9, {0.05, 4.0, 2.0}) == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("confusion matrix") {
    std::vector<GroundTruth> g{{0, 0, {0.3, 0.3, 0.2, 0.2}}, {0, 1, {0.7, 0.7, 0.2, 0.2}}};
    std::vector<Detection> right{{0, 0, 0.9, {0.3, 0.3, 0.2, 0.2}}, {0, 1, 0.9, {0.7, 0.7, 0.2, 0.2}}};
    auto cm = confusion_matrix(right, g, 2, 0.5, 0.25);
    CHECK(cm == std::vector<std::vector<std::size_t>>{{1, 0, 0}, {0, 1, 0}, {0, 0, 0}});

    std::vector<Detection> wrong{{0, 1, 0.9, {0.3, 0.3, 0.2, 0.2}}};
    auto cw = confusion_matrix(wrong, {g[0]}, 2, 0.5, 0.25);
    CHECK(cw == std::vector<std::vector<std::size_t>>{{0, 1, 0}, {0, 0, 0}, {0, 0, 0}});
}

TEST_CASE("confusion matrix equals an independent recount") {
    std::mt19937_64 rng(15);
    std::uniform_int_distribution<int> cls(0, 2);
    std::uniform_real_distribution<double> conf(0, 1);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Detection> d;
        std::vector<GroundTruth> g;
        for (int i = 0; i < 5; ++i) d.push_back({0, cls(rng), conf(rng), random_box(rng)});
        for (int i = 0; i < 3; ++i) g.push_back({0, cls(rng), random_box(rng)});
        auto cm = confusion_matrix(d, g, 3, 0.3, 0.2);

        // Recount: walk detections from most to least confident.
        std::vector<std::vector<std::size_t>> ref(4, std::vector<std::size_t>(4, 0));
        std::vector<std::size_t> order(d.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](auto a, auto b) {
            return d[a].confidence != d[b].confidence ? d[a].confidence > d[b].confidence : a < b;
        });
        std::vector<bool> used(g.size(), false);
        for (auto i : order) {
            if (d[i].confidence < 0.2) continue;
            int best = -1;
            double bv = 0;
            for (std::size_t k = 0; k < g.size(); ++k) {
                const double v = iou(d[i].box, g[k].box);
                if (!used[k] && v >= 0.3 && v > bv) bv = v, best = static_cast<int>(k);
            }
            if (best < 0) {
                ref[3][d[i].class_id]++;
            } else {
                used[best] = true;
                ref[g[best].class_id][d[i].class_id]++;
            }
        }
        for (std::size_t k = 0; k < g.size(); ++k)
            if (!used[k]) ref[g[k].class_id][3]++;
        CHECK(cm == ref);
    }
}

TEST_CASE("evaluation report payload") {
    std::vector<GroundTruth> g{{0, 0, {0.3, 0.3, 0.2, 0.2}}, {1, 1, {0.7, 0.7, 0.2, 0.2}}};
    std::vector<Detection> d{{0, 0, 0.9, {0.3, 0.3, 0.2, 0.2}}, {1, 1, 0.1, {0.7, 0.7, 0.2, 0.2}}};
    auto rep = evaluate_detections(d, g, {"no_issues", "broken", "flashover_damage"}, 0.25, 0.5);
    auto j = to_json(rep);
    for (const char* key : {"map50", "map5095", "precision", "recall", "f1", "per_class", "confusion"}) CHECK(j.contains(key));
    CHECK(rep.map50 == 1.0);
    CHECK(rep.overall.recall == 0.5);
    CHECK(rep.overall.precision == 1.0);
    CHECK(j["per_class"].size() == 3);
    CHECK(j["confusion"].size() == 4);
}
