#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsodetect/common.hpp"
#include "dsodetect/geometry.hpp"

namespace dso {

struct AnnObject {
    std::string label = "dso";
    Polygon polygon;
    double confidence = 1.0;
    bool has_confidence = false;
    bool difficult = false;
};

struct Annotation {
    std::string image_id;
    int width = 0;
    int height = 0;
    std::vector<AnnObject> objects;
};

// ---------------------------------------------------------------------------
// Annotation JSON schema (bit-exact contract):
// {"image": str, "width": int, "height": int,
//  "objects": [{"label": str, "polygon": [[x,y],...], "confidence"?: float}]}
// An optional per-object "difficult" flag is accepted on import.
// ---------------------------------------------------------------------------

inline nlohmann::json annotation_to_json(const Annotation& ann) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : ann.objects) {
        nlohmann::json jo;
        jo["label"] = o.label;
        nlohmann::json poly = nlohmann::json::array();
        for (const auto& v : o.polygon) poly.push_back({v[0], v[1]});
        jo["polygon"] = std::move(poly);
        if (o.has_confidence) jo["confidence"] = o.confidence;
        objs.push_back(std::move(jo));
    }
    nlohmann::json j;
    j["image"] = ann.image_id;
    j["width"] = ann.width;
    j["height"] = ann.height;
    j["objects"] = std::move(objs);
    return j;
}

inline Annotation annotation_from_json(const nlohmann::json& j) {
    auto fail = [](const std::string& field, const std::string& what) {
        throw IoError("annotation schema violation at '" + field + "': " + what);
    };
    Annotation ann;
    if (!j.is_object()) fail("$", "expected a JSON object");
    for (const auto& [key, _] : j.items())
        if (key != "image" && key != "width" && key != "height" && key != "objects")
            fail(key, "unknown field");
    if (!j.contains("image") || !j["image"].is_string()) fail("image", "expected string");
    if (!j.contains("width") || !j["width"].is_number_integer()) fail("width", "expected integer");
    if (!j.contains("height") || !j["height"].is_number_integer()) fail("height", "expected integer");
    if (!j.contains("objects") || !j["objects"].is_array()) fail("objects", "expected array");
    ann.image_id = j["image"].get<std::string>();
    ann.width = j["width"].get<int>();
    ann.height = j["height"].get<int>();
    int idx = 0;
    for (const auto& jo : j["objects"]) {
        const std::string where = "objects[" + std::to_string(idx) + "]";
        if (!jo.is_object()) fail(where, "expected object");
        for (const auto& [key, _] : jo.items())
            if (key != "label" && key != "polygon" && key != "confidence" && key != "difficult")
                fail(where + "." + key, "unknown field");
        AnnObject obj;
        if (!jo.contains("label") || !jo["label"].is_string()) fail(where + ".label", "expected string");
        obj.label = jo["label"].get<std::string>();
        if (!jo.contains("polygon") || !jo["polygon"].is_array())
            fail(where + ".polygon", "expected array of [x,y]");
        for (const auto& jv : jo["polygon"]) {
            if (!jv.is_array() || jv.size() != 2 || !jv[0].is_number() || !jv[1].is_number())
                fail(where + ".polygon", "expected [x,y] pairs");
            obj.polygon.push_back({jv[0].get<double>(), jv[1].get<double>()});
        }
        if (obj.polygon.size() < 3) fail(where + ".polygon", "needs at least 3 vertices");
        if (jo.contains("confidence")) {
            if (!jo["confidence"].is_number()) fail(where + ".confidence", "expected number");
            obj.confidence = jo["confidence"].get<double>();
            obj.has_confidence = true;
        }
        if (jo.contains("difficult")) {
            if (!jo["difficult"].is_boolean()) fail(where + ".difficult", "expected bool");
            obj.difficult = jo["difficult"].get<bool>();
        }
        ann.objects.push_back(std::move(obj));
        ++idx;
    }
    return ann;
}

// Pixel-count IoU: both polygons are rasterized onto the image grid.
// A zero-area union is defined as IoU 0.
inline double iou(const Polygon& a, const Polygon& b, int width, int height) {
    const auto ma = rasterize_polygon(a, height, width);
    const auto mb = rasterize_polygon(b, height, width);
    long long inter = 0, uni = 0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
        const bool pa = ma[i] != 0, pb = mb[i] != 0;
        inter += (pa && pb) ? 1 : 0;
        uni += (pa || pb) ? 1 : 0;
    }
    if (uni == 0) return 0.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

struct MatchRecord {
    int pred_index = -1;
    int truth_index = -1;
    double iou = 0.0;
};

struct MatchResult {
    std::vector<MatchRecord> matches;
    std::vector<int> unmatched_preds;
    std::vector<int> unmatched_truths;
    int tp() const { return static_cast<int>(matches.size()); }
    int fp() const { return static_cast<int>(unmatched_preds.size()); }
    int fn() const { return static_cast<int>(unmatched_truths.size()); }
};

// Greedy matching: predictions in descending confidence order, each taking
// the unmatched truth of highest IoU >= threshold. Ties break
// deterministically (equal confidence: original order; equal IoU: lowest
// truth index). When by_class is set only equal labels can match.
inline MatchResult match_detections(const Annotation& preds, const Annotation& truth,
                                    double iou_threshold, bool by_class = false) {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
        throw ConfigError("match_detections: iou_threshold must be in (0,1]");
    const int w = truth.width > 0 ? truth.width : preds.width;
    const int h = truth.height > 0 ? truth.height : preds.height;

    std::vector<int> order(preds.objects.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return preds.objects[a].confidence > preds.objects[b].confidence;
    });

    MatchResult out;
    std::vector<bool> truth_taken(truth.objects.size(), false);
    for (const int pi : order) {
        const auto& p = preds.objects[pi];
        int best_t = -1;
        double best_iou = 0.0;
        for (std::size_t ti = 0; ti < truth.objects.size(); ++ti) {
            if (truth_taken[ti]) continue;
            if (by_class && truth.objects[ti].label != p.label) continue;
            const double v = iou(p.polygon, truth.objects[ti].polygon, w, h);
            if (v >= iou_threshold && v > best_iou) {
                best_iou = v;
                best_t = static_cast<int>(ti);
            }
        }
        if (best_t >= 0) {
            truth_taken[best_t] = true;
            out.matches.push_back({pi, best_t, best_iou});
        } else {
            out.unmatched_preds.push_back(pi);
        }
    }
    for (std::size_t ti = 0; ti < truth.objects.size(); ++ti)
        if (!truth_taken[ti]) out.unmatched_truths.push_back(static_cast<int>(ti));
    return out;
}

// precision = TP/(TP+FP), recall = TP/(TP+FN); zero denominators give 0.
inline std::pair<double, double> compute_pr(int tp, int fp, int fn) {
    const double precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    return {precision, recall};
}

struct MapResult {
    double map = 0.0;
    std::map<std::string, double> per_class_ap;  // classes present in truth
};

namespace detail {

struct RankedPred {
    double confidence;
    int image;
    int object;
};

}  // namespace detail

// VOC-2010 style mAP: per class, predictions across all images are ranked
// by confidence and greedily matched; AP is the area under the monotone
// (interpolated) precision envelope; mAP averages classes present in the
// ground truth. When by_class is false everything is a single "dso" class.
inline MapResult compute_map(const std::vector<Annotation>& preds,
                             const std::vector<Annotation>& truths, double iou_threshold,
                             bool by_class = false) {
    if (preds.size() != truths.size())
        throw ConfigError("compute_map: preds/truths image counts differ");
    MapResult result;

    std::set<std::string> classes;
    for (const auto& t : truths)
        for (const auto& o : t.objects) classes.insert(by_class ? o.label : "dso");
    if (classes.empty()) return result;

    for (const auto& cls : classes) {
        long long n_truth = 0;
        std::vector<std::vector<bool>> taken(truths.size());
        for (std::size_t i = 0; i < truths.size(); ++i) {
            taken[i].assign(truths[i].objects.size(), false);
            for (const auto& o : truths[i].objects)
                if (!by_class || o.label == cls) ++n_truth;
        }
        std::vector<detail::RankedPred> ranked;
        for (std::size_t i = 0; i < preds.size(); ++i)
            for (std::size_t k = 0; k < preds[i].objects.size(); ++k)
                if (!by_class || preds[i].objects[k].label == cls)
                    ranked.push_back({preds[i].objects[k].confidence, static_cast<int>(i),
                                      static_cast<int>(k)});
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.confidence != b.confidence) return a.confidence > b.confidence;
            if (a.image != b.image) return a.image < b.image;
            return a.object < b.object;
        });

        std::vector<int> is_tp(ranked.size(), 0);
        for (std::size_t r = 0; r < ranked.size(); ++r) {
            const auto& rp = ranked[r];
            const auto& truth = truths[rp.image];
            const auto& pobj = preds[rp.image].objects[rp.object];
            const int w = truth.width, h = truth.height;
            int best_t = -1;
            double best_iou = 0.0;
            for (std::size_t ti = 0; ti < truth.objects.size(); ++ti) {
                if (taken[rp.image][ti]) continue;
                if (by_class && truth.objects[ti].label != cls) continue;
                const double v = iou(pobj.polygon, truth.objects[ti].polygon, w, h);
                if (v >= iou_threshold && v > best_iou) {
                    best_iou = v;
                    best_t = static_cast<int>(ti);
                }
            }
            if (best_t >= 0) {
                taken[rp.image][best_t] = true;
                is_tp[r] = 1;
            }
        }

        double ap = 0.0;
        if (n_truth > 0 && !ranked.empty()) {
            std::vector<double> precision(ranked.size()), recall(ranked.size());
            long long tp = 0;
            for (std::size_t r = 0; r < ranked.size(); ++r) {
                tp += is_tp[r];
                precision[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
                recall[r] = static_cast<double>(tp) / static_cast<double>(n_truth);
            }
            // monotone envelope (suffix max), then sum rectangle areas
            for (std::size_t r = precision.size() - 1; r-- > 0;)
                precision[r] = std::max(precision[r], precision[r + 1]);
            double prev_recall = 0.0;
            for (std::size_t r = 0; r < ranked.size(); ++r) {
                ap += (recall[r] - prev_recall) * precision[r];
                prev_recall = recall[r];
            }
        }
        result.per_class_ap[cls] = ap;
    }

    double acc = 0.0;
    for (const auto& [_, ap] : result.per_class_ap) acc += ap;
    result.map = acc / static_cast<double>(result.per_class_ap.size());
    return result;
}

struct EvalReport {
    double iou_threshold = 0.5;
    bool by_class = false;
    int tp = 0, fp = 0, fn = 0;
    double precision = 0.0;
    double recall = 0.0;
    MapResult map;
    struct ImageEntry {
        std::string image_id;
        int tp = 0, fp = 0, fn = 0;
        std::vector<MatchRecord> matches;
    };
    std::vector<ImageEntry> images;
    nlohmann::json stats;  // optional timing / call counts
};

inline EvalReport evaluate_detections(const std::vector<Annotation>& preds,
                                      const std::vector<Annotation>& truths,
                                      double iou_threshold, bool by_class = false) {
    if (preds.size() != truths.size())
        throw ConfigError("evaluate_detections: preds/truths image counts differ");
    EvalReport report;
    report.iou_threshold = iou_threshold;
    report.by_class = by_class;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const MatchResult mr = match_detections(preds[i], truths[i], iou_threshold, by_class);
        EvalReport::ImageEntry entry;
        entry.image_id = truths[i].image_id.empty() ? preds[i].image_id : truths[i].image_id;
        entry.tp = mr.tp();
        entry.fp = mr.fp();
        entry.fn = mr.fn();
        entry.matches = mr.matches;
        report.tp += entry.tp;
        report.fp += entry.fp;
        report.fn += entry.fn;
        report.images.push_back(std::move(entry));
    }
    std::tie(report.precision, report.recall) = compute_pr(report.tp, report.fp, report.fn);
    report.map = compute_map(preds, truths, iou_threshold, by_class);
    return report;
}

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["iou_threshold"] = r.iou_threshold;
    j["by_class"] = r.by_class;
    j["tp"] = r.tp;
    j["fp"] = r.fp;
    j["fn"] = r.fn;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["map"] = r.map.map;
    j["per_class_ap"] = r.map.per_class_ap;
    nlohmann::json imgs = nlohmann::json::array();
    for (const auto& e : r.images) {
        nlohmann::json je;
        je["image"] = e.image_id;
        je["tp"] = e.tp;
        je["fp"] = e.fp;
        je["fn"] = e.fn;
        nlohmann::json ms = nlohmann::json::array();
        for (const auto& m : e.matches)
            ms.push_back({{"pred", m.pred_index}, {"truth", m.truth_index}, {"iou", m.iou}});
        je["matches"] = std::move(ms);
        imgs.push_back(std::move(je));
    }
    j["per_image"] = std::move(imgs);
    if (!r.stats.is_null()) j["stats"] = r.stats;
    return j;
}

inline std::string eval_report_table(const EvalReport& r) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << "detection evaluation (IoU >= " << r.iou_threshold << ")\n";
    os << "  images:    " << r.images.size() << "\n";
    os << "  TP/FP/FN:  " << r.tp << "/" << r.fp << "/" << r.fn << "\n";
    os << "  precision: " << r.precision << "\n";
    os << "  recall:    " << r.recall << "\n";
    os << "  mAP:       " << r.map.map << "\n";
    if (!r.map.per_class_ap.empty()) {
        os << "  per-class AP:\n";
        for (const auto& [cls, ap] : r.map.per_class_ap)
            os << "    " << cls << ": " << ap << "\n";
    }
    return os.str();
}

}  // namespace dso
