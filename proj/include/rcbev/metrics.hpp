#pragma once

#include <algorithm>
#include <map>
#include <optional>

#include "rcbev/heads.hpp"
#include "rcbev/synthetic_world.hpp"

#include "json.hpp"

namespace rcbev {

// ---------------------------------------------------------------------------
// detection matching and AP
// ---------------------------------------------------------------------------

struct MatchResult {
    std::vector<std::pair<int, int>> matches;  // (pred index, gt index)
    int fp = 0;
    int fn = 0;
};

/// Greedy center-distance matching: predictions in descending score order,
/// each taking the nearest unmatched ground truth inside the threshold.
inline MatchResult match_by_distance(const std::vector<Detection>& preds,
                                     const std::vector<SceneObject>& gts, double threshold) {
    if (!(threshold > 0.0)) throw std::invalid_argument("match_by_distance: threshold must be > 0");
    std::vector<int> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return preds[static_cast<size_t>(a)].score > preds[static_cast<size_t>(b)].score; });
    std::vector<char> gt_used(gts.size(), 0);
    MatchResult res;
    for (int pi : order) {
        const Detection& p = preds[static_cast<size_t>(pi)];
        int best = -1;
        double best_d = threshold;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_used[gi]) continue;
            const double d = std::hypot(p.x - gts[gi].cx, p.y - gts[gi].cy);
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(gi);
            }
        }
        if (best >= 0) {
            gt_used[static_cast<size_t>(best)] = 1;
            res.matches.emplace_back(pi, best);
        } else {
            res.fp++;
        }
    }
    res.fn = static_cast<int>(gts.size()) - static_cast<int>(res.matches.size());
    return res;
}

/// AP at one distance threshold: 40 recall samples in (0,1], samples at or
/// below min_recall dropped, precision clipped by min_precision and
/// renormalized, so a perfect detector scores exactly 1.
inline double average_precision(const std::vector<Detection>& preds,
                                const std::vector<SceneObject>& gts, double dist_threshold,
                                double min_recall = 0.1, double min_precision = 0.1) {
    if (gts.empty()) return 0.0;
    std::vector<int> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return preds[static_cast<size_t>(a)].score > preds[static_cast<size_t>(b)].score; });
    std::vector<char> gt_used(gts.size(), 0);
    std::vector<char> tp_flags;
    tp_flags.reserve(preds.size());
    for (int pi : order) {
        const Detection& p = preds[static_cast<size_t>(pi)];
        int best = -1;
        double best_d = dist_threshold;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_used[gi]) continue;
            const double d = std::hypot(p.x - gts[gi].cx, p.y - gts[gi].cy);
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(gi);
            }
        }
        if (best >= 0) {
            gt_used[static_cast<size_t>(best)] = 1;
            tp_flags.push_back(1);
        } else {
            tp_flags.push_back(0);
        }
    }
    // precision at every prefix of the ranked list
    std::vector<double> recall, precision;
    int tp = 0;
    for (size_t i = 0; i < tp_flags.size(); ++i) {
        tp += tp_flags[i];
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    }
    double acc = 0.0;
    int used = 0;
    for (int j = 1; j <= 40; ++j) {
        const double r = static_cast<double>(j) / 40.0;
        if (r <= min_recall) continue;
        used++;
        // interpolated precision: best precision at recall >= r
        double p_best = 0.0;
        for (size_t i = 0; i < recall.size(); ++i) {
            if (recall[i] >= r) p_best = std::max(p_best, precision[i]);
        }
        acc += std::max(0.0, p_best - min_precision) / (1.0 - min_precision);
    }
    return used > 0 ? acc / static_cast<double>(used) : 0.0;
}

/// Standard distance thresholds for mAP, in meters.
inline const std::vector<double>& map_thresholds() {
    static const std::vector<double> t = {0.5, 1.0, 2.0, 4.0};
    return t;
}

/// mAP over classes (those present in the ground truth) and thresholds.
inline double mean_average_precision(const std::vector<Detection>& preds,
                                     const std::vector<SceneObject>& gts) {
    double acc = 0.0;
    int n = 0;
    for (int cls = 0; cls < kNumClasses; ++cls) {
        std::vector<SceneObject> gt_c;
        for (const auto& g : gts) {
            if (g.class_id == cls) gt_c.push_back(g);
        }
        if (gt_c.empty()) continue;
        std::vector<Detection> pd_c;
        for (const auto& p : preds) {
            if (p.class_id == cls) pd_c.push_back(p);
        }
        for (double thr : map_thresholds()) {
            acc += average_precision(pd_c, gt_c, thr);
            n++;
        }
    }
    return n > 0 ? acc / n : 0.0;
}

// ---------------------------------------------------------------------------
// true-positive error terms
// ---------------------------------------------------------------------------

struct TpErrors {
    double ate = 1.0;  // mean 2D center distance, meters
    double ase = 1.0;  // 1 - IoU of aligned boxes
    double aoe = 1.0;  // mean smallest yaw difference, radians
    double ave = 1.0;  // mean 2D velocity L2, m/s
    double aae = 1.0;  // 1 - attribute accuracy
};

inline double aligned_box_iou(double w1, double l1, double w2, double l2) {
    const double inter = std::min(w1, w2) * std::min(l1, l2);
    const double uni = w1 * l1 + w2 * l2 - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

inline double yaw_difference(double a, double b) {
    double d = std::fmod(std::abs(a - b), 2.0 * M_PI);
    if (d > M_PI) d = 2.0 * M_PI - d;
    return d;
}

/// Mean errors over matched (prediction, ground-truth) pairs. With no
/// matches, every error is 1 by convention.
inline TpErrors tp_errors(const std::vector<std::pair<Detection, SceneObject>>& pairs) {
    TpErrors e;
    if (pairs.empty()) return e;
    double ate = 0, ase = 0, aoe = 0, ave = 0, aae = 0;
    for (const auto& [p, g] : pairs) {
        ate += std::hypot(p.x - g.cx, p.y - g.cy);
        ase += 1.0 - aligned_box_iou(p.w, p.l, g.w, g.l);
        aoe += yaw_difference(p.yaw, g.yaw);
        ave += std::hypot(p.vx - g.vx, p.vy - g.vy);
        aae += (p.attr_id == g.attr_id) ? 0.0 : 1.0;
    }
    const double n = static_cast<double>(pairs.size());
    return {ate / n, ase / n, aoe / n, ave / n, aae / n};
}

// ---------------------------------------------------------------------------
// NDS
// ---------------------------------------------------------------------------

/// NDS = (1/10) [ 5 mAP + sum over the five errors of (1 - min(1, err)) ].
inline double nds(double map, const TpErrors& e) {
    if (map < 0.0 || map > 1.0) throw std::invalid_argument("nds: mAP must be in [0,1]");
    const double errs[5] = {e.ate, e.ase, e.aoe, e.ave, e.aae};
    double acc = 5.0 * map;
    for (double v : errs) {
        if (v < 0.0) throw std::invalid_argument("nds: errors must be nonnegative");
        acc += 1.0 - std::min(1.0, v);
    }
    return acc / 10.0;
}

// ---------------------------------------------------------------------------
// tracking metrics
// ---------------------------------------------------------------------------

struct TrackSnapshot {
    int track_id;
    double x, y;
    double score;
    int class_id;
};

struct GtSnapshot {
    int gt_id;
    double x, y;
    int class_id;
};

struct TrackEvalInput {
    std::vector<std::vector<TrackSnapshot>> hyp_frames;
    std::vector<std::vector<GtSnapshot>> gt_frames;
    int n_recall_samples = 40;
    double match_dist = 2.0;
};

/// Closed-form MOTAR at one recall operating point.
inline double motar(int ids, int fp, int fn, double recall, int gt_count) {
    if (gt_count <= 0 || recall <= 0.0) return 0.0;
    const double p = static_cast<double>(gt_count);
    return std::max(0.0, 1.0 - (ids + fp + fn - (1.0 - recall) * p) / (recall * p));
}

namespace detail {

struct SweepPoint {
    double recall = 0.0;
    double motar = 0.0;
    double dist_sum = 0.0;
    int tp = 0;
};

/// CLEAR-style accumulation at one score threshold: continuing matches are
/// kept first, the rest matched greedily by distance; identity switches are
/// counted whenever a ground-truth track changes hypothesis id.
inline SweepPoint evaluate_at_threshold(const TrackEvalInput& in, double threshold) {
    int ids = 0, fp = 0, fn = 0, tp = 0;
    double dist_sum = 0.0;
    int gt_total = 0;
    std::map<int, int> last_hyp_for_gt;
    for (size_t f = 0; f < in.gt_frames.size(); ++f) {
        const auto& gts = in.gt_frames[f];
        gt_total += static_cast<int>(gts.size());
        std::vector<TrackSnapshot> hyps;
        if (f < in.hyp_frames.size()) {
            for (const auto& h : in.hyp_frames[f]) {
                if (h.score >= threshold) hyps.push_back(h);
            }
        }
        std::vector<int> gt_match(gts.size(), -1);
        std::vector<char> hyp_used(hyps.size(), 0);
        // keep continuing matches first
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            auto it = last_hyp_for_gt.find(gts[gi].gt_id);
            if (it == last_hyp_for_gt.end()) continue;
            for (size_t hi = 0; hi < hyps.size(); ++hi) {
                if (hyp_used[hi] || hyps[hi].track_id != it->second) continue;
                if (hyps[hi].class_id != gts[gi].class_id) continue;
                const double d = std::hypot(hyps[hi].x - gts[gi].x, hyps[hi].y - gts[gi].y);
                if (d < in.match_dist) {
                    gt_match[gi] = static_cast<int>(hi);
                    hyp_used[hi] = 1;
                }
                break;
            }
        }
        // greedy distance matching for the rest
        struct Pair {
            double d;
            int gi, hi;
        };
        std::vector<Pair> pairs;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_match[gi] >= 0) continue;
            for (size_t hi = 0; hi < hyps.size(); ++hi) {
                if (hyp_used[hi] || hyps[hi].class_id != gts[gi].class_id) continue;
                const double d = std::hypot(hyps[hi].x - gts[gi].x, hyps[hi].y - gts[gi].y);
                if (d < in.match_dist) pairs.push_back({d, static_cast<int>(gi), static_cast<int>(hi)});
            }
        }
        std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
            if (a.d != b.d) return a.d < b.d;
            if (a.gi != b.gi) return a.gi < b.gi;
            return a.hi < b.hi;
        });
        for (const auto& pr : pairs) {
            if (gt_match[static_cast<size_t>(pr.gi)] >= 0 || hyp_used[static_cast<size_t>(pr.hi)]) continue;
            gt_match[static_cast<size_t>(pr.gi)] = pr.hi;
            hyp_used[static_cast<size_t>(pr.hi)] = 1;
        }
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_match[gi] < 0) {
                fn++;
                continue;
            }
            const auto& h = hyps[static_cast<size_t>(gt_match[gi])];
            tp++;
            dist_sum += std::hypot(h.x - gts[gi].x, h.y - gts[gi].y);
            auto it = last_hyp_for_gt.find(gts[gi].gt_id);
            if (it != last_hyp_for_gt.end() && it->second != h.track_id) ids++;
            last_hyp_for_gt[gts[gi].gt_id] = h.track_id;
        }
        for (size_t hi = 0; hi < hyps.size(); ++hi) {
            if (!hyp_used[hi]) fp++;
        }
    }
    SweepPoint pt;
    pt.tp = tp;
    pt.dist_sum = dist_sum;
    pt.recall = gt_total > 0 ? static_cast<double>(tp) / gt_total : 0.0;
    pt.motar = motar(ids, fp, fn, pt.recall, gt_total);
    return pt;
}

inline std::vector<SweepPoint> recall_sweep(const TrackEvalInput& in) {
    std::vector<double> scores;
    for (const auto& frame : in.hyp_frames) {
        for (const auto& h : frame) scores.push_back(h.score);
    }
    std::sort(scores.begin(), scores.end());
    scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
    std::vector<SweepPoint> pts;
    for (double s : scores) pts.push_back(evaluate_at_threshold(in, s));
    if (pts.empty()) pts.push_back(SweepPoint{});
    return pts;
}

inline const SweepPoint& nearest_recall(const std::vector<SweepPoint>& pts, double target) {
    size_t best = 0;
    double best_d = std::abs(pts[0].recall - target);
    for (size_t i = 1; i < pts.size(); ++i) {
        const double d = std::abs(pts[i].recall - target);
        if (d < best_d || (d == best_d && pts[i].recall > pts[best].recall)) {
            best_d = d;
            best = i;
        }
    }
    return pts[best];
}

}  // namespace detail

/// AMOTA: mean MOTAR over n-1 recall samples {1/(n-1), ..., 1}, evaluated at
/// the nearest achievable recall from a score-threshold sweep.
inline double amota(const TrackEvalInput& in) {
    const int n = in.n_recall_samples;
    if (n < 2) throw std::invalid_argument("amota: need n >= 2");
    auto pts = detail::recall_sweep(in);
    double acc = 0.0;
    for (int j = 1; j <= n - 1; ++j) {
        const double r = static_cast<double>(j) / (n - 1);
        acc += detail::nearest_recall(pts, r).motar;
    }
    return acc / (n - 1);
}

/// AMOTP: mean over the same recall samples of (sum of match distances) /
/// (number of matches); samples with zero matches are skipped.
inline double amotp(const TrackEvalInput& in) {
    const int n = in.n_recall_samples;
    if (n < 2) throw std::invalid_argument("amotp: need n >= 2");
    auto pts = detail::recall_sweep(in);
    double acc = 0.0;
    int used = 0;
    for (int j = 1; j <= n - 1; ++j) {
        const double r = static_cast<double>(j) / (n - 1);
        const auto& pt = detail::nearest_recall(pts, r);
        if (pt.tp == 0) continue;
        acc += pt.dist_sum / pt.tp;
        used++;
    }
    return used > 0 ? acc / used : 0.0;
}

// ---------------------------------------------------------------------------
// segmentation IoU
// ---------------------------------------------------------------------------

/// IoU after thresholding both masks; an empty union counts as 1 (both empty).
inline double mask_iou(const Tensor& pred, const Tensor& gt, double threshold = 0.5) {
    if (!pred.same_shape(gt)) throw std::invalid_argument("mask_iou: shape mismatch");
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] > threshold;
        const bool g = gt[i] > threshold;
        inter += (p && g) ? 1 : 0;
        uni += (p || g) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

struct MiouResult {
    double per_task[kSegTasks] = {0, 0, 0};
    double mean = 0.0;
};

inline MiouResult miou(const SegMasks& pred, const SegMasks& gt, double threshold = 0.5) {
    MiouResult r;
    double acc = 0.0;
    for (int i = 0; i < kSegTasks; ++i) {
        r.per_task[i] = mask_iou(pred.task(i), gt.task(i), threshold);
        acc += r.per_task[i];
    }
    r.mean = acc / kSegTasks;
    return r;
}

// ---------------------------------------------------------------------------
// metrics report
// ---------------------------------------------------------------------------

/// Schema: {map, mate, mase, maoe, mave, maae, nds, amota, amotp, miou,
/// per_class: {...}}; fields not produced by a command are null.
inline nlohmann::json metrics_report(std::optional<double> map, std::optional<TpErrors> errors,
                                     std::optional<double> nds_value, std::optional<double> amota_value,
                                     std::optional<double> amotp_value,
                                     std::optional<MiouResult> miou_value,
                                     const std::map<std::string, double>& per_class = {}) {
    nlohmann::json j;
    j["map"] = map ? nlohmann::json(*map) : nlohmann::json();
    j["mate"] = errors ? nlohmann::json(errors->ate) : nlohmann::json();
    j["mase"] = errors ? nlohmann::json(errors->ase) : nlohmann::json();
    j["maoe"] = errors ? nlohmann::json(errors->aoe) : nlohmann::json();
    j["mave"] = errors ? nlohmann::json(errors->ave) : nlohmann::json();
    j["maae"] = errors ? nlohmann::json(errors->aae) : nlohmann::json();
    j["nds"] = nds_value ? nlohmann::json(*nds_value) : nlohmann::json();
    j["amota"] = amota_value ? nlohmann::json(*amota_value) : nlohmann::json();
    j["amotp"] = amotp_value ? nlohmann::json(*amotp_value) : nlohmann::json();
    if (miou_value) {
        j["miou"] = miou_value->mean;
        j["iou_vehicle"] = miou_value->per_task[0];
        j["iou_drivable"] = miou_value->per_task[1];
        j["iou_lane"] = miou_value->per_task[2];
    } else {
        j["miou"] = nlohmann::json();
    }
    nlohmann::json pc = nlohmann::json::object();
    for (const auto& [k, v] : per_class) pc[k] = v;
    j["per_class"] = pc;
    return j;
}

}  // namespace rcbev
