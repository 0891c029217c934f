#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <iostream>

#include "rcbev/checkpoint.hpp"
#include "rcbev/metrics.hpp"
#include "rcbev/tracker.hpp"
#include "rcbev/train.hpp"

namespace rcbev {

// ---------------------------------------------------------------------------
// pooled detection evaluation over frames
// ---------------------------------------------------------------------------

struct DetFrame {
    std::vector<Detection> preds;
    std::vector<SceneObject> gts;
};

namespace detail {

/// Per-frame greedy matching (score order within the frame equals global
/// score order restricted to it), pooled into one ranked PR curve.
inline double pooled_ap(const std::vector<DetFrame>& frames, int cls, double thr) {
    struct Ranked {
        double score;
        char tp;
    };
    std::vector<Ranked> ranked;
    int n_gt = 0;
    for (const auto& f : frames) {
        std::vector<SceneObject> gts;
        for (const auto& g : f.gts) {
            if (g.class_id == cls) gts.push_back(g);
        }
        n_gt += static_cast<int>(gts.size());
        std::vector<const Detection*> preds;
        for (const auto& p : f.preds) {
            if (p.class_id == cls) preds.push_back(&p);
        }
        std::stable_sort(preds.begin(), preds.end(),
                         [](const Detection* a, const Detection* b) { return a->score > b->score; });
        std::vector<char> used(gts.size(), 0);
        for (const Detection* p : preds) {
            int best = -1;
            double best_d = thr;
            for (size_t gi = 0; gi < gts.size(); ++gi) {
                if (used[gi]) continue;
                const double d = std::hypot(p->x - gts[gi].cx, p->y - gts[gi].cy);
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(gi);
                }
            }
            if (best >= 0) used[static_cast<size_t>(best)] = 1;
            ranked.push_back({p->score, static_cast<char>(best >= 0 ? 1 : 0)});
        }
    }
    if (n_gt == 0) return 0.0;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
    std::vector<double> recall, precision;
    int tp = 0;
    for (size_t i = 0; i < ranked.size(); ++i) {
        tp += ranked[i].tp;
        recall.push_back(static_cast<double>(tp) / n_gt);
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    }
    double acc = 0.0;
    int used_samples = 0;
    for (int j = 1; j <= 40; ++j) {
        const double r = static_cast<double>(j) / 40.0;
        if (r <= 0.1) continue;
        used_samples++;
        double p_best = 0.0;
        for (size_t i = 0; i < recall.size(); ++i) {
            if (recall[i] >= r) p_best = std::max(p_best, precision[i]);
        }
        acc += std::max(0.0, p_best - 0.1) / 0.9;
    }
    return used_samples > 0 ? acc / used_samples : 0.0;
}

}  // namespace detail

struct DetectionSummary {
    double map = 0.0;
    TpErrors errors;
    double nds_style = 0.0;
    std::map<std::string, double> per_class;
    int n_matches = 0;
};

/// Desk-scale detection summary: mAP over the standard distance thresholds,
/// TP errors over matches at `tp_match_dist`, and the NDS formula on top.
inline DetectionSummary evaluate_detections(const std::vector<DetFrame>& frames,
                                            double tp_match_dist = 4.0) {
    DetectionSummary s;
    static const char* kClassNames[kNumClasses] = {"vehicle", "pedestrian", "barrier"};
    double ap_acc = 0.0;
    int ap_n = 0;
    for (int cls = 0; cls < kNumClasses; ++cls) {
        bool has_gt = false;
        for (const auto& f : frames) {
            for (const auto& g : f.gts) {
                if (g.class_id == cls) has_gt = true;
            }
        }
        if (!has_gt) continue;
        double cls_acc = 0.0;
        for (double thr : map_thresholds()) {
            const double ap = detail::pooled_ap(frames, cls, thr);
            ap_acc += ap;
            cls_acc += ap;
            ap_n++;
        }
        s.per_class[std::string(kClassNames[cls]) + "_ap"] = cls_acc / map_thresholds().size();
    }
    s.map = ap_n > 0 ? ap_acc / ap_n : 0.0;

    std::vector<std::pair<Detection, SceneObject>> pairs;
    for (const auto& f : frames) {
        for (int cls = 0; cls < kNumClasses; ++cls) {
            std::vector<Detection> preds;
            std::vector<SceneObject> gts;
            for (const auto& p : f.preds) {
                if (p.class_id == cls) preds.push_back(p);
            }
            for (const auto& g : f.gts) {
                if (g.class_id == cls) gts.push_back(g);
            }
            auto res = match_by_distance(preds, gts, tp_match_dist);
            for (const auto& [pi, gi] : res.matches) {
                pairs.emplace_back(preds[static_cast<size_t>(pi)], gts[static_cast<size_t>(gi)]);
            }
        }
    }
    s.errors = tp_errors(pairs);
    s.n_matches = static_cast<int>(pairs.size());
    s.nds_style = nds(s.map, s.errors);
    return s;
}

// ---------------------------------------------------------------------------
// model runners
// ---------------------------------------------------------------------------

struct EvalPerturbation {
    int n_views_dropped = 0;    // 0..6
    bool drop_all_radar = false;
    double radar_noise_amp = 0.0;
    uint64_t noise_seed = 99;
    // sensor-failure protocols decode at a permissive threshold so AP measures
    // ranking rather than absolute confidence; negative = use the config value
    double score_thresh_override = -1.0;
};

inline std::vector<Detection> run_camera_detector(CameraOnlyModel& m, const FrameData& frame,
                                                  const EvalPerturbation& pert = {}) {
    BEVGrid cam = frame.camera_bev;
    if (pert.n_views_dropped > 0) cam = drop_camera_views(cam, pert.n_views_dropped, pert.noise_seed);
    Tensor maps = camera_only_forward(m, cam.data);
    const double thresh = pert.score_thresh_override > 0 ? pert.score_thresh_override : m.cfg.score_thresh;
    std::vector<Detection> dets =
        decode_detections(maps, bev_geometry(m.cfg), HeadChannels{kNumClasses}, thresh, m.cfg.nms_radius);
    for (auto& d : dets) {
        d.vx *= m.cfg.vel_scale;
        d.vy *= m.cfg.vel_scale;
    }
    return dets;
}

inline std::vector<Detection> run_fused_detector(FusedModel& m, const FrameData& frame,
                                                 const EvalPerturbation& pert = {}) {
    BEVGrid cam = frame.camera_bev;
    if (pert.n_views_dropped > 0) cam = drop_camera_views(cam, pert.n_views_dropped, pert.noise_seed);
    RadarPointCloud radar = frame.radar;
    if (pert.drop_all_radar) radar = drop_radar(radar, 1.0, pert.noise_seed);
    if (pert.radar_noise_amp > 0.0) radar = perturb_xy(radar, pert.radar_noise_amp, pert.noise_seed);
    Tensor maps = fused_forward(m, cam.data, radar);
    const double thresh = pert.score_thresh_override > 0 ? pert.score_thresh_override : m.cfg.score_thresh;
    std::vector<Detection> dets =
        decode_detections(maps, bev_geometry(m.cfg), HeadChannels{kNumClasses}, thresh, m.cfg.nms_radius);
    for (auto& d : dets) {
        d.vx *= m.cfg.vel_scale;
        d.vy *= m.cfg.vel_scale;
    }
    return dets;
}

inline std::vector<FrameData> make_eval_frames(const ExperimentConfig& cfg) {
    return make_dataset(cfg, 777, cfg.n_eval_scenes);
}

inline DetectionSummary eval_camera_model(CameraOnlyModel& m, const std::vector<FrameData>& frames,
                                          const EvalPerturbation& pert = {}) {
    std::vector<DetFrame> det_frames;
    for (size_t i = 0; i < frames.size(); ++i) {
        EvalPerturbation p = pert;
        p.noise_seed = pert.noise_seed * 1009ULL + i;
        det_frames.push_back({run_camera_detector(m, frames[i], p), frames[i].objects});
    }
    return evaluate_detections(det_frames, m.cfg.tp_match_dist);
}

inline DetectionSummary eval_fused_model(FusedModel& m, const std::vector<FrameData>& frames,
                                         const EvalPerturbation& pert = {}) {
    std::vector<DetFrame> det_frames;
    for (size_t i = 0; i < frames.size(); ++i) {
        EvalPerturbation p = pert;
        p.noise_seed = pert.noise_seed * 1009ULL + i;
        det_frames.push_back({run_fused_detector(m, frames[i], p), frames[i].objects});
    }
    return evaluate_detections(det_frames, m.cfg.tp_match_dist);
}

// ---------------------------------------------------------------------------
// tracking evaluation
// ---------------------------------------------------------------------------

struct TrackingResult {
    double amota = 0.0;
    double amotp = 0.0;
    std::vector<std::vector<Track>> per_frame_tracks;
};

/// Runs the fused detector over a constant-velocity sequence and evaluates
/// AMOTA/AMOTP against the ground-truth identities.
inline TrackingResult run_tracking(FusedModel& m, const ExperimentConfig& cfg, uint64_t seed,
                                   int n_frames, double dt) {
    std::vector<SceneObject> objects = generate_scene(cfg.n_objects, scene_params(cfg), seed);
    TrackerParams tp;
    tp.gate_m = cfg.track_gate;
    tp.max_missed = cfg.track_max_missed;

    TrackEvalInput eval_in;
    TrackingResult out;
    std::vector<Track> tracks;
    int next_id = 0;
    for (int f = 0; f < n_frames; ++f) {
        FrameData frame;
        frame.objects = objects;
        frame.camera_bev = render_camera_bev(objects, cfg.bev_h, cfg.bev_w, cfg.bev_res,
                                             camera_sim_params(cfg), seed + static_cast<uint64_t>(f));
        frame.radar = simulate_radar(objects, radar_sim_params(cfg), seed + 31ULL * f);
        std::vector<Detection> dets = run_fused_detector(m, frame);
        tracks = greedy_track(tracks, dets, dt, tp, &next_id);
        out.per_frame_tracks.push_back(tracks);

        std::vector<TrackSnapshot> hyps;
        for (const auto& t : tracks) {
            if (t.missed > 0) continue;  // only report tracks matched this frame
            hyps.push_back({t.id, t.last.x, t.last.y, t.last.score, t.last.class_id});
        }
        std::vector<GtSnapshot> gts;
        for (size_t i = 0; i < objects.size(); ++i) {
            gts.push_back({static_cast<int>(i), objects[i].cx, objects[i].cy, objects[i].class_id});
        }
        eval_in.hyp_frames.push_back(hyps);
        eval_in.gt_frames.push_back(gts);
        objects = step_scene(objects, dt);
    }
    out.amota = amota(eval_in);
    out.amotp = amotp(eval_in);
    return out;
}

/// Tracking metrics when the detector is a perfect oracle; pins the metric
/// path end to end.
inline TrackingResult run_tracking_with_oracle(const ExperimentConfig& cfg, uint64_t seed,
                                               int n_frames, double dt) {
    std::vector<SceneObject> objects = generate_scene(cfg.n_objects, scene_params(cfg), seed);
    TrackerParams tp;
    tp.gate_m = cfg.track_gate;
    tp.max_missed = cfg.track_max_missed;
    TrackEvalInput eval_in;
    TrackingResult out;
    std::vector<Track> tracks;
    int next_id = 0;
    for (int f = 0; f < n_frames; ++f) {
        std::vector<Detection> dets;
        for (const auto& o : objects) {
            Detection d;
            d.x = o.cx;
            d.y = o.cy;
            d.w = o.w;
            d.l = o.l;
            d.yaw = o.yaw;
            d.vx = o.vx;
            d.vy = o.vy;
            d.class_id = o.class_id;
            d.score = 0.95;
            dets.push_back(d);
        }
        tracks = greedy_track(tracks, dets, dt, tp, &next_id);
        out.per_frame_tracks.push_back(tracks);
        std::vector<TrackSnapshot> hyps;
        for (const auto& t : tracks) {
            if (t.missed > 0) continue;
            hyps.push_back({t.id, t.last.x, t.last.y, t.last.score, t.last.class_id});
        }
        std::vector<GtSnapshot> gts;
        for (size_t i = 0; i < objects.size(); ++i) {
            gts.push_back({static_cast<int>(i), objects[i].cx, objects[i].cy, objects[i].class_id});
        }
        eval_in.hyp_frames.push_back(hyps);
        eval_in.gt_frames.push_back(gts);
        objects = step_scene(objects, dt);
    }
    out.amota = amota(eval_in);
    out.amotp = amotp(eval_in);
    return out;
}

// ---------------------------------------------------------------------------
// segmentation evaluation
// ---------------------------------------------------------------------------

inline MiouResult eval_segmentation(FusedModel& m, const std::vector<FrameData>& frames) {
    MiouResult acc;
    SegGtParams sg;
    sg.drivable_radius = m.cfg.drivable_radius;
    int n = 0;
    for (const auto& f : frames) {
        FusedForwardCache cache;
        fused_forward(m, f.camera_bev.data, f.radar, &cache);
        SegMasks pred = seg_decode(cache.fused, m.seg);
        SegMasks gt = render_gt_seg(f.objects, m.cfg.bev_h * m.cfg.seg_upsample,
                                    m.cfg.bev_w * m.cfg.seg_upsample,
                                    m.cfg.bev_res / m.cfg.seg_upsample, sg);
        MiouResult r = miou(pred, gt);
        for (int t = 0; t < kSegTasks; ++t) acc.per_task[t] += r.per_task[t];
        acc.mean += r.mean;
        ++n;
    }
    if (n > 0) {
        for (int t = 0; t < kSegTasks; ++t) acc.per_task[t] /= n;
        acc.mean /= n;
    }
    return acc;
}

// ---------------------------------------------------------------------------
// robustness suite
// ---------------------------------------------------------------------------

struct RobustnessRow {
    std::string name;
    double nds_style;
    double map;
    double vehicle_ap;
};

/// Sensor-failure and alignment-noise protocol: camera view drops {0,1,3,6},
/// full radar drop, and uniform radar xy noise at 1 m amplitude.
inline std::vector<RobustnessRow> run_robustness(FusedModel& m, const std::vector<FrameData>& frames) {
    auto row = [&](const std::string& name, const EvalPerturbation& pert) {
        DetectionSummary s = eval_fused_model(m, frames, pert);
        double vap = 0.0;
        auto it = s.per_class.find("vehicle_ap");
        if (it != s.per_class.end()) vap = it->second;
        return RobustnessRow{name, s.nds_style, s.map, vap};
    };
    std::vector<RobustnessRow> rows;
    rows.push_back(row("clean", {}));
    EvalPerturbation p1;
    p1.n_views_dropped = 1;
    rows.push_back(row("drop_1_view", p1));
    EvalPerturbation p3;
    p3.n_views_dropped = 3;
    rows.push_back(row("drop_3_views", p3));
    EvalPerturbation pall;
    pall.n_views_dropped = 6;
    pall.score_thresh_override = 0.05;
    rows.push_back(row("drop_all_views", pall));
    EvalPerturbation pr;
    pr.drop_all_radar = true;
    rows.push_back(row("drop_radar", pr));
    EvalPerturbation pn;
    pn.radar_noise_amp = 1.0;
    rows.push_back(row("radar_noise_1m", pn));
    return rows;
}

// ---------------------------------------------------------------------------
// complexity / timing bench
// ---------------------------------------------------------------------------

struct BenchRow {
    int side;
    uint64_t vanilla_mults;
    uint64_t deform_mults;
    double vanilla_ms;
    double deform_ms;
};

inline std::vector<BenchRow> run_bench(const std::vector<int>& sides, int channels, uint64_t seed) {
    Rng rng(seed);
    VanillaCrossAttnParams vp(channels, rng);
    DeformAttnParams dp(2, 4, channels, channels, channels, rng);
    std::vector<BenchRow> rows;
    for (int side : sides) {
        Tensor q = randn({channels, side, side}, rng, 0.1);
        Tensor v = randn({channels, side, side}, rng, 0.1);
        OpCounter cv, cd;
        auto t0 = std::chrono::steady_clock::now();
        vanilla_cross_attn_dense(q, v, vp, &cv);
        auto t1 = std::chrono::steady_clock::now();
        Tensor refs = detail::own_pixel_refs(side, side);
        Tensor rows_q = detail::grid_rows(q);
        auto t2 = std::chrono::steady_clock::now();
        deform_cross_attn(rows_q, refs, v, dp, nullptr, &cd);
        auto t3 = std::chrono::steady_clock::now();
        rows.push_back({side, cv.mults, cd.mults,
                        std::chrono::duration<double, std::milli>(t1 - t0).count(),
                        std::chrono::duration<double, std::milli>(t3 - t2).count()});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// output helpers
// ---------------------------------------------------------------------------

inline void write_loss_csv(const std::vector<LossRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "stage,step,loss\n";
    char buf[96];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", r.stage, r.step, r.loss);
        f << buf;
    }
}

inline void write_manifest(const ExperimentConfig& cfg, const std::string& command,
                           const std::vector<std::string>& outputs, const std::string& path) {
    nlohmann::json j;
    j["command"] = command;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = cfg.seed;
    j["outputs"] = outputs;
    std::ofstream f(path);
    f << j.dump(2) << "\n";
}

}  // namespace rcbev
