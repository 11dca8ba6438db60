#pragma once

// COCO-style detection metrics: greedy score-ordered matching, 101-point
// interpolated average precision, mAP50 / mAP50:95, an operating-point
// precision/recall summary, and greedy NMS.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "pk/box.hpp"

namespace pk {

struct Detection {
    std::string image_id;
    int class_id = 0;
    Box box;
    double score = 0;

    void validate() const {
        box.validate();
        if (score < 0 || score > 1)
            throw std::invalid_argument("Detection: score " + std::to_string(score) +
                                        " outside [0, 1]");
    }
};

struct GroundTruth {
    std::string image_id;
    int class_id = 0;
    Box box;
};

struct EvalResult {
    std::map<int, std::map<double, double>> per_class_ap;  // class -> iou_thr -> AP
    double map50 = 0;
    double map50_95 = 0;
    double precision = 0;
    double recall = 0;
    std::int64_t tp = 0, fp = 0, fn = 0;
};

enum class ApInterpolation { Points101, Continuous };

struct EvalConfig {
    std::vector<double> iou_thresholds;  // default 0.50 .. 0.95 step 0.05
    double pr_score_threshold = 0.25;    // operating point for the P/R columns
    double pr_iou_threshold = 0.50;
    ApInterpolation interpolation = ApInterpolation::Points101;

    static EvalConfig defaults() {
        EvalConfig c;
        for (int i = 0; i < 10; ++i) c.iou_thresholds.push_back(0.50 + 0.05 * i);
        return c;
    }
};

// Greedy matching within one (image, class) partition. Detections are ranked
// by descending score (stable on ties); each picks the unmatched GT with the
// highest IoU >= iou_thr. Returns TP flags in the ranked detection order along
// with the ranking itself.
struct MatchResult {
    std::vector<std::size_t> order;  // indices into dets, by descending score
    std::vector<bool> tp;            // aligned with order
};

inline MatchResult match_detections(const std::vector<Detection>& dets,
                                    const std::vector<GroundTruth>& gts, double iou_thr) {
    for (std::size_t i = 1; i < dets.size(); ++i)
        if (dets[i].image_id != dets[0].image_id || dets[i].class_id != dets[0].class_id)
            throw std::invalid_argument("match_detections: mixed image/class partition");
    for (const auto& g : gts)
        if (!dets.empty() && (g.image_id != dets[0].image_id || g.class_id != dets[0].class_id))
            throw std::invalid_argument("match_detections: GT from a different partition");

    MatchResult res;
    res.order.resize(dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) res.order[i] = i;
    std::stable_sort(res.order.begin(), res.order.end(), [&dets](std::size_t a, std::size_t b) {
        return dets[a].score > dets[b].score;
    });

    std::vector<bool> gt_used(gts.size(), false);
    res.tp.resize(dets.size(), false);
    for (std::size_t r = 0; r < res.order.size(); ++r) {
        const Detection& d = dets[res.order[r]];
        double best_iou = 0;
        std::size_t best_gt = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (gt_used[g]) continue;
            const double iou = box_iou(d.box, gts[g].box);
            if (iou >= iou_thr && iou > best_iou) {
                best_iou = iou;
                best_gt = g;
            }
        }
        if (best_gt < gts.size()) {
            gt_used[best_gt] = true;
            res.tp[r] = true;
        }
    }
    return res;
}

inline double average_precision(const std::vector<bool>& tp_flags, std::int64_t n_gt,
                                ApInterpolation interp = ApInterpolation::Points101) {
    if (n_gt < 0) throw std::invalid_argument("average_precision: negative n_gt");
    if (n_gt == 0) return 0.0;

    std::vector<double> precisions, recalls;
    std::int64_t tp = 0, seen = 0;
    for (bool flag : tp_flags) {
        ++seen;
        if (flag) ++tp;
        precisions.push_back(static_cast<double>(tp) / seen);
        recalls.push_back(static_cast<double>(tp) / n_gt);
    }
    // monotone non-increasing precision envelope
    for (std::size_t i = precisions.size(); i-- > 1;)
        precisions[i - 1] = std::max(precisions[i - 1], precisions[i]);

    if (interp == ApInterpolation::Points101) {
        double sum = 0;
        std::size_t idx = 0;
        for (int r = 0; r <= 100; ++r) {
            const double recall = r / 100.0;
            while (idx < recalls.size() && recalls[idx] < recall) ++idx;
            sum += (idx < precisions.size()) ? precisions[idx] : 0.0;
        }
        return sum / 101.0;
    }
    // continuous: area under the envelope
    double area = 0, prev_recall = 0;
    for (std::size_t i = 0; i < recalls.size(); ++i) {
        area += (recalls[i] - prev_recall) * precisions[i];
        prev_recall = recalls[i];
    }
    return area;
}

inline EvalResult evaluate(const std::vector<Detection>& dets,
                           const std::vector<GroundTruth>& gts, const std::vector<int>& classes,
                           const EvalConfig& cfg = EvalConfig::defaults()) {
    if (classes.empty()) throw std::invalid_argument("evaluate: empty class list");
    if (cfg.iou_thresholds.empty())
        throw std::invalid_argument("evaluate: empty threshold list");
    if (!std::is_sorted(cfg.iou_thresholds.begin(), cfg.iou_thresholds.end()))
        throw std::invalid_argument("evaluate: thresholds must be sorted ascending");
    for (const auto& d : dets) d.validate();

    EvalResult result;

    // pooled AP per (class, threshold)
    std::vector<double> per_thr_map(cfg.iou_thresholds.size(), 0.0);
    std::vector<int> per_thr_classes(cfg.iou_thresholds.size(), 0);
    for (int cls : classes) {
        std::vector<std::size_t> cls_dets;
        std::int64_t n_gt = 0;
        std::vector<std::string> images;
        for (std::size_t i = 0; i < dets.size(); ++i)
            if (dets[i].class_id == cls) {
                cls_dets.push_back(i);
                images.push_back(dets[i].image_id);
            }
        for (const auto& g : gts)
            if (g.class_id == cls) {
                ++n_gt;
                images.push_back(g.image_id);
            }
        std::sort(images.begin(), images.end());
        images.erase(std::unique(images.begin(), images.end()), images.end());

        if (cls_dets.empty() && n_gt == 0) continue;  // absent class: excluded from the mean

        // rank the class's detections globally: score desc, then input index
        std::stable_sort(cls_dets.begin(), cls_dets.end(),
                         [&dets](std::size_t a, std::size_t b) {
                             if (dets[a].score != dets[b].score)
                                 return dets[a].score > dets[b].score;
                             return a < b;
                         });

        for (std::size_t t = 0; t < cfg.iou_thresholds.size(); ++t) {
            const double thr = cfg.iou_thresholds[t];
            // per-image matching, then flags gathered in the global ranking
            std::map<std::size_t, bool> tp_by_det;
            for (const auto& img : images) {
                std::vector<Detection> part;
                std::vector<std::size_t> part_idx;
                std::vector<GroundTruth> part_gt;
                for (std::size_t i : cls_dets)
                    if (dets[i].image_id == img) {
                        part.push_back(dets[i]);
                        part_idx.push_back(i);
                    }
                for (const auto& g : gts)
                    if (g.class_id == cls && g.image_id == img) part_gt.push_back(g);
                const MatchResult m = match_detections(part, part_gt, thr);
                for (std::size_t r = 0; r < m.order.size(); ++r)
                    tp_by_det[part_idx[m.order[r]]] = m.tp[r];
            }
            std::vector<bool> flags;
            for (std::size_t i : cls_dets) flags.push_back(tp_by_det[i]);
            const double ap = average_precision(flags, n_gt, cfg.interpolation);
            result.per_class_ap[cls][thr] = ap;
            per_thr_map[t] += ap;
            per_thr_classes[t] += 1;
        }
    }

    double sum_maps = 0;
    double map50 = 0;
    for (std::size_t t = 0; t < cfg.iou_thresholds.size(); ++t) {
        const double m =
            per_thr_classes[t] > 0 ? per_thr_map[t] / per_thr_classes[t] : 0.0;
        if (std::abs(cfg.iou_thresholds[t] - 0.50) < 1e-12) map50 = m;
        sum_maps += m;
    }
    result.map50 = map50;
    result.map50_95 = sum_maps / static_cast<double>(cfg.iou_thresholds.size());

    // operating-point precision/recall, micro-averaged over classes and images
    std::int64_t tp = 0, fp = 0;
    std::int64_t total_gt = static_cast<std::int64_t>(gts.size());
    for (int cls : classes) {
        std::vector<std::string> images;
        for (const auto& d : dets)
            if (d.class_id == cls && d.score >= cfg.pr_score_threshold)
                images.push_back(d.image_id);
        for (const auto& g : gts)
            if (g.class_id == cls) images.push_back(g.image_id);
        std::sort(images.begin(), images.end());
        images.erase(std::unique(images.begin(), images.end()), images.end());
        for (const auto& img : images) {
            std::vector<Detection> part;
            std::vector<GroundTruth> part_gt;
            for (const auto& d : dets)
                if (d.class_id == cls && d.image_id == img && d.score >= cfg.pr_score_threshold)
                    part.push_back(d);
            for (const auto& g : gts)
                if (g.class_id == cls && g.image_id == img) part_gt.push_back(g);
            const MatchResult m = match_detections(part, part_gt, cfg.pr_iou_threshold);
            for (bool f : m.tp) (f ? tp : fp) += 1;
        }
    }
    result.tp = tp;
    result.fp = fp;
    result.fn = total_gt - tp;
    result.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    result.recall = total_gt > 0 ? static_cast<double>(tp) / total_gt : 0.0;
    return result;
}

// Greedy NMS within a single class partition; output sorted by descending score.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thr) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&dets](std::size_t a, std::size_t b) {
        return dets[a].score > dets[b].score;
    });
    std::vector<bool> suppressed(dets.size(), false);
    std::vector<Detection> kept;
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (suppressed[order[i]]) continue;
        kept.push_back(dets[order[i]]);
        for (std::size_t j = i + 1; j < order.size(); ++j) {
            if (suppressed[order[j]]) continue;
            if (box_iou(dets[order[i]].box, dets[order[j]].box) > iou_thr)
                suppressed[order[j]] = true;
        }
    }
    return kept;
}

}  // namespace pk
