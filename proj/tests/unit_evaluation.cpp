#include <catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <set>

#include "dsodetect/evaluation.hpp"

using namespace dso;

namespace {

Polygon rect(double x0, double y0, double x1, double y1) {
    return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
}

Annotation make_annotation(int w, int h, std::vector<AnnObject> objs) {
    Annotation a;
    a.image_id = "img";
    a.width = w;
    a.height = h;
    a.objects = std::move(objs);
    return a;
}

AnnObject obj(Polygon poly, double conf = 1.0, std::string label = "dso") {
    AnnObject o;
    o.label = std::move(label);
    o.polygon = std::move(poly);
    o.confidence = conf;
    o.has_confidence = true;
    return o;
}

// Exhaustive oracle: enumerates every match set reachable by a greedy
// matcher that takes predictions in descending confidence (ties in any
// order), each claiming an unmatched truth of maximal IoU >= thr (ties in
// any order).
void enumerate_greedy(const std::vector<AnnObject>& preds, const Annotation& truth, double thr,
                      std::vector<bool>& used_pred, std::vector<bool>& used_truth,
                      std::set<std::pair<int, int>> current,
                      std::set<std::set<std::pair<int, int>>>& out, int w, int h) {
    double best_conf = -1.0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (!used_pred[i]) best_conf = std::max(best_conf, preds[i].confidence);
    if (best_conf < 0.0) {
        out.insert(current);
        return;
    }
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (used_pred[i] || preds[i].confidence != best_conf) continue;
        double best_iou = -1.0;
        for (std::size_t t = 0; t < truth.objects.size(); ++t) {
            if (used_truth[t]) continue;
            const double v = iou(preds[i].polygon, truth.objects[t].polygon, w, h);
            if (v >= thr) best_iou = std::max(best_iou, v);
        }
        used_pred[i] = true;
        if (best_iou < 0.0) {
            enumerate_greedy(preds, truth, thr, used_pred, used_truth, current, out, w, h);
        } else {
            for (std::size_t t = 0; t < truth.objects.size(); ++t) {
                if (used_truth[t]) continue;
                const double v = iou(preds[i].polygon, truth.objects[t].polygon, w, h);
                if (v >= thr && v == best_iou) {
                    used_truth[t] = true;
                    auto next = current;
                    next.insert({static_cast<int>(i), static_cast<int>(t)});
                    enumerate_greedy(preds, truth, thr, used_pred, used_truth, next, out, w, h);
                    used_truth[t] = false;
                }
            }
        }
        used_pred[i] = false;
    }
}

std::set<std::set<std::pair<int, int>>> greedy_consistent_sets(const Annotation& preds,
                                                               const Annotation& truth, double thr) {
    std::vector<bool> up(preds.objects.size(), false), ut(truth.objects.size(), false);
    std::set<std::set<std::pair<int, int>>> out;
    enumerate_greedy(preds.objects, truth, thr, up, ut, {}, out, truth.width, truth.height);
    return out;
}

// Brute-force AP oracle: for every prefix length k of the ranked
// prediction list, rematch from scratch to get (precision_k, recall_k),
// then integrate the monotone envelope point by point.
double ap_oracle(const std::vector<Annotation>& preds, const std::vector<Annotation>& truths,
                 double thr) {
    struct Ranked {
        double conf;
        int image;
        int object;
    };
    std::vector<Ranked> ranked;
    long long n_truth = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        for (std::size_t k = 0; k < preds[i].objects.size(); ++k)
            ranked.push_back({preds[i].objects[k].confidence, static_cast<int>(i), static_cast<int>(k)});
        n_truth += static_cast<long long>(truths[i].objects.size());
    }
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
        if (a.conf != b.conf) return a.conf > b.conf;
        if (a.image != b.image) return a.image < b.image;
        return a.object < b.object;
    });
    if (ranked.empty() || n_truth == 0) return 0.0;

    std::vector<double> precision, recall;
    for (std::size_t k = 1; k <= ranked.size(); ++k) {
        std::vector<std::vector<bool>> taken(truths.size());
        for (std::size_t i = 0; i < truths.size(); ++i)
            taken[i].assign(truths[i].objects.size(), false);
        long long tp = 0;
        for (std::size_t r = 0; r < k; ++r) {
            const auto& rp = ranked[r];
            const auto& truth = truths[rp.image];
            int best_t = -1;
            double best_iou = 0.0;
            for (std::size_t t = 0; t < truth.objects.size(); ++t) {
                if (taken[rp.image][t]) continue;
                const double v = iou(preds[rp.image].objects[rp.object].polygon,
                                     truth.objects[t].polygon, truth.width, truth.height);
                if (v >= thr && v > best_iou) {
                    best_iou = v;
                    best_t = static_cast<int>(t);
                }
            }
            if (best_t >= 0) {
                taken[rp.image][best_t] = true;
                ++tp;
            }
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_truth));
    }
    double ap = 0.0, prev_r = 0.0;
    for (std::size_t k = 0; k < precision.size(); ++k) {
        double envelope = 0.0;
        for (std::size_t j = k; j < precision.size(); ++j) envelope = std::max(envelope, precision[j]);
        ap += (recall[k] - prev_r) * envelope;
        prev_r = recall[k];
    }
    return ap;
}

struct RandomInstance {
    std::vector<Annotation> preds, truths;
};

RandomInstance random_instance(std::mt19937& rng, int max_objs = 5) {
    auto rnd = [&](double lo, double hi) { return lo + (hi - lo) * (rng() % 10000) / 10000.0; };
    RandomInstance inst;
    const int n_images = 1 + static_cast<int>(rng() % 2);
    for (int i = 0; i < n_images; ++i) {
        Annotation truth, pred;
        truth.image_id = pred.image_id = "img" + std::to_string(i);
        truth.width = pred.width = 48;
        truth.height = pred.height = 48;
        const int nt = static_cast<int>(rng() % (max_objs + 1));
        const int np = static_cast<int>(rng() % (max_objs + 1));
        for (int t = 0; t < nt; ++t) {
            const double x = rnd(0, 28), y = rnd(0, 28);
            truth.objects.push_back(obj(rect(x, y, x + rnd(6, 18), y + rnd(6, 18))));
            truth.objects.back().has_confidence = false;
        }
        for (int p = 0; p < np; ++p) {
            const double x = rnd(0, 28), y = rnd(0, 28);
            pred.objects.push_back(obj(rect(x, y, x + rnd(6, 18), y + rnd(6, 18)), rnd(0.05, 1.0)));
        }
        inst.preds.push_back(std::move(pred));
        inst.truths.push_back(std::move(truth));
    }
    return inst;
}

}  // namespace

TEST_CASE("iou basics") {
    const int w = 32, h = 32;
    const Polygon a = rect(4, 4, 14, 14);
    CHECK(iou(a, a, w, h) == 1.0);
    CHECK(iou(a, rect(20, 20, 30, 30), w, h) == 0.0);
    // square vs the same square shifted by half its width: overlap 1/3
    CHECK(iou(rect(0, 0, 10, 10), rect(5, 0, 15, 10), 20, 16) == Catch::Approx(1.0 / 3.0));
    // zero-area union
    CHECK(iou({}, {}, w, h) == 0.0);
}

TEST_CASE("iou symmetry on random rectangles") {
    std::mt19937 rng(7);
    for (int t = 0; t < 50; ++t) {
        const double x0 = rng() % 20, y0 = rng() % 20;
        const double x1 = rng() % 20, y1 = rng() % 20;
        const Polygon a = rect(x0, y0, x0 + 5 + rng() % 10, y0 + 5 + rng() % 10);
        const Polygon b = rect(x1, y1, x1 + 5 + rng() % 10, y1 + 5 + rng() % 10);
        REQUIRE(iou(a, b, 48, 48) == iou(b, a, 48, 48));
    }
}

TEST_CASE("match_detections basics") {
    const Annotation truth =
        make_annotation(32, 32, {obj(rect(4, 4, 14, 14)), obj(rect(20, 4, 30, 14))});

    const Annotation no_preds = make_annotation(32, 32, {});
    const MatchResult empty = match_detections(no_preds, truth, 0.5);
    CHECK(empty.tp() == 0);
    CHECK(empty.fn() == 2);

    const Annotation exact = make_annotation(32, 32, {obj(rect(4, 4, 14, 14), 0.9)});
    const MatchResult one = match_detections(exact, truth, 0.5);
    REQUIRE(one.tp() == 1);
    CHECK(one.matches[0].iou == 1.0);
    CHECK(one.fn() == 1);

    CHECK_THROWS_AS(match_detections(exact, truth, 0.0), ConfigError);
}

TEST_CASE("match_detections equals greedy-consistent oracle on random instances") {
    std::mt19937 rng(2025);
    for (int trial = 0; trial < 60; ++trial) {
        const RandomInstance inst = random_instance(rng, 3);
        const auto& preds = inst.preds[0];
        const auto& truth = inst.truths[0];
        const MatchResult mr = match_detections(preds, truth, 0.5);
        std::set<std::pair<int, int>> ours;
        for (const auto& m : mr.matches) ours.insert({m.pred_index, m.truth_index});
        const auto valid = greedy_consistent_sets(preds, truth, 0.5);
        REQUIRE(valid.count(ours) == 1);
    }
}

TEST_CASE("match_detections tie cases stay within the oracle set") {
    const Annotation truth = make_annotation(32, 32, {obj(rect(8, 8, 24, 24))});
    const Annotation preds =
        make_annotation(32, 32, {obj(rect(8, 8, 24, 24), 0.5), obj(rect(10, 8, 26, 24), 0.5)});
    const MatchResult mr = match_detections(preds, truth, 0.3);
    std::set<std::pair<int, int>> ours;
    for (const auto& m : mr.matches) ours.insert({m.pred_index, m.truth_index});
    const auto valid = greedy_consistent_sets(preds, truth, 0.3);
    CHECK(valid.count(ours) == 1);
    CHECK(mr.tp() == 1);
    CHECK(mr.fp() == 1);
}

TEST_CASE("compute_pr follows the zero-denominator convention") {
    CHECK(compute_pr(5, 0, 0) == std::pair{1.0, 1.0});
    CHECK(compute_pr(0, 0, 5) == std::pair{0.0, 0.0});
    const auto [p, r] = compute_pr(2, 1, 3);
    CHECK(p == Catch::Approx(2.0 / 3.0));
    CHECK(r == Catch::Approx(2.0 / 5.0));
}

TEST_CASE("compute_map basics") {
    const Annotation truth = make_annotation(32, 32, {obj(rect(4, 4, 14, 14))});
    const Annotation perfect = make_annotation(32, 32, {obj(rect(4, 4, 14, 14), 0.8)});
    CHECK(compute_map({perfect}, {truth}, 0.5).map == Catch::Approx(1.0));

    const Annotation none = make_annotation(32, 32, {});
    CHECK(compute_map({none}, {truth}, 0.5).map == 0.0);

    // a class present only in predictions contributes only false positives
    Annotation cls_pred = make_annotation(32, 32, {obj(rect(4, 4, 14, 14), 0.8, "nebula"),
                                                   obj(rect(4, 4, 14, 14), 0.7, "galaxy")});
    Annotation cls_truth = make_annotation(32, 32, {obj(rect(4, 4, 14, 14), 1.0, "galaxy")});
    const MapResult by_class = compute_map({cls_pred}, {cls_truth}, 0.5, true);
    REQUIRE(by_class.per_class_ap.size() == 1);
    CHECK(by_class.per_class_ap.count("galaxy") == 1);
    CHECK(by_class.map == Catch::Approx(1.0));
}

TEST_CASE("compute_map equals the brute-force AP oracle on random instances") {
    std::mt19937 rng(31337);
    for (int trial = 0; trial < 300; ++trial) {
        const RandomInstance inst = random_instance(rng);
        const MapResult mr = compute_map(inst.preds, inst.truths, 0.5);
        const double oracle = ap_oracle(inst.preds, inst.truths, 0.5);
        long long n_truth = 0;
        for (const auto& t : inst.truths) n_truth += static_cast<long long>(t.objects.size());
        if (n_truth == 0) {
            CHECK(mr.map == 0.0);
        } else {
            REQUIRE(mr.map == Catch::Approx(oracle).margin(1e-9));
        }
    }
}

TEST_CASE("map threshold monotonicity: stricter IoU never raises mAP") {
    std::mt19937 rng(555);
    for (int trial = 0; trial < 100; ++trial) {
        const RandomInstance inst = random_instance(rng);
        const double m50 = compute_map(inst.preds, inst.truths, 0.5).map;
        const double m75 = compute_map(inst.preds, inst.truths, 0.75).map;
        REQUIRE(m75 <= m50 + 1e-12);
    }
}

TEST_CASE("adding a true positive never lowers recall; a false positive never raises precision") {
    std::mt19937 rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const int tp = static_cast<int>(rng() % 10), fp = static_cast<int>(rng() % 10);
        const int fn = static_cast<int>(rng() % 10);
        const auto [p0, r0] = compute_pr(tp, fp, fn);
        const auto [p1, r1] = compute_pr(tp + 1, fp, fn);
        const auto [p2, r2] = compute_pr(tp, fp + 1, fn);
        CHECK(r1 >= r0);
        CHECK(p2 <= p0 + 1e-12);
    }
}

TEST_CASE("annotation json round trip and schema errors") {
    Annotation ann = make_annotation(64, 48, {obj(rect(1, 2, 11, 12), 0.75, "nebula")});
    ann.image_id = "scene_007";

    const nlohmann::json j = annotation_to_json(ann);
    const Annotation back = annotation_from_json(j);
    CHECK(back.image_id == "scene_007");
    CHECK(back.width == 64);
    CHECK(back.height == 48);
    REQUIRE(back.objects.size() == 1);
    CHECK(back.objects[0].label == "nebula");
    CHECK(back.objects[0].confidence == 0.75);
    CHECK(back.objects[0].polygon == ann.objects[0].polygon);

    nlohmann::json bad1 = j;
    bad1["bogus"] = 1;
    CHECK_THROWS_WITH(annotation_from_json(bad1), Catch::Matchers::ContainsSubstring("bogus"));

    nlohmann::json bad2 = j;
    bad2.erase("width");
    CHECK_THROWS_WITH(annotation_from_json(bad2), Catch::Matchers::ContainsSubstring("width"));

    nlohmann::json bad3 = j;
    bad3["objects"][0]["polygon"] = {{1, 2}, {3}};
    CHECK_THROWS_WITH(annotation_from_json(bad3), Catch::Matchers::ContainsSubstring("polygon"));

    nlohmann::json bad4 = j;
    bad4["objects"][0]["confidence"] = "high";
    CHECK_THROWS_WITH(annotation_from_json(bad4), Catch::Matchers::ContainsSubstring("confidence"));
}

TEST_CASE("evaluate_detections aggregates per-image counts") {
    const Annotation truth =
        make_annotation(32, 32, {obj(rect(4, 4, 14, 14)), obj(rect(20, 4, 30, 14))});
    const Annotation pred = make_annotation(
        32, 32, {obj(rect(4, 4, 14, 14), 0.9), obj(rect(2, 20, 12, 30), 0.8)});
    const EvalReport report = evaluate_detections({pred}, {truth}, 0.5);
    CHECK(report.tp == 1);
    CHECK(report.fp == 1);
    CHECK(report.fn == 1);
    CHECK(report.precision == Catch::Approx(0.5));
    CHECK(report.recall == Catch::Approx(0.5));
    const std::string table = eval_report_table(report);
    CHECK(table.find("precision") != std::string::npos);
    const nlohmann::json rj = eval_report_to_json(report);
    CHECK(rj["tp"] == 1);
}
