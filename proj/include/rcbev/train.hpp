#pragma once

#include "rcbev/model.hpp"

namespace rcbev {

// ---------------------------------------------------------------------------
// optimizer: Adam with decoupled weight decay
// ---------------------------------------------------------------------------

struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    std::vector<Tensor> m;
    std::vector<Tensor> v;
    int64_t t = 0;

    void init(const std::vector<NamedParam>& params) {
        m.clear();
        v.clear();
        for (const auto& np : params) {
            m.push_back(Tensor::zeros(np.p->value.shape()));
            v.push_back(Tensor::zeros(np.p->value.shape()));
        }
        t = 0;
    }

    void step(const std::vector<NamedParam>& params) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor& val = params[i].p->value;
            Tensor& g = params[i].p->grad;
            Tensor& mi = m[i];
            Tensor& vi = v[i];
            for (int64_t k = 0; k < val.size(); ++k) {
                mi[k] = beta1 * mi[k] + (1.0 - beta1) * g[k];
                vi[k] = beta2 * vi[k] + (1.0 - beta2) * g[k] * g[k];
                const double mhat = mi[k] / bc1;
                const double vhat = vi[k] / bc2;
                val[k] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * val[k]);
            }
        }
    }
};

inline void zero_grads(const std::vector<NamedParam>& params) {
    for (const auto& np : params) np.p->zero_grad();
}

/// Cosine decay from the base rate to 30% of it over the run.
inline double cosine_lr(double base, int step, int total_steps) {
    if (total_steps <= 1) return base;
    const double t = static_cast<double>(step) / (total_steps - 1);
    return base * (0.3 + 0.7 * 0.5 * (1.0 + std::cos(M_PI * t)));
}

// ---------------------------------------------------------------------------
// synthetic frames
// ---------------------------------------------------------------------------

struct FrameData {
    std::vector<SceneObject> objects;
    BEVGrid camera_bev;
    RadarPointCloud radar;
};

inline SceneParams scene_params(const ExperimentConfig& cfg) {
    SceneParams p;
    p.area_extent = cfg.area_extent;
    p.v_max = cfg.v_max;
    return p;
}

inline RadarSimParams radar_sim_params(const ExperimentConfig& cfg) {
    RadarSimParams p;
    p.points_per_meter = cfg.radar_pts_per_m;
    p.sigma_az = cfg.sigma_az;
    p.sigma_doppler = cfg.sigma_doppler;
    p.k_rcs = cfg.k_rcs;
    p.sigma_rcs = cfg.sigma_rcs;
    p.clutter_rate = cfg.clutter_rate;
    p.clutter_extent = cfg.area_extent;
    return p;
}

inline CameraSimParams camera_sim_params(const ExperimentConfig& cfg) {
    CameraSimParams p;
    p.depth_bias = cfg.depth_bias;
    p.sigma_long = cfg.sigma_long;
    p.sigma_lat = cfg.sigma_lat;
    p.depth_jitter = cfg.depth_jitter;
    return p;
}

inline FrameData make_frame(const ExperimentConfig& cfg, uint64_t seed) {
    FrameData f;
    f.objects = generate_scene(cfg.n_objects, scene_params(cfg), seed);
    f.camera_bev = render_camera_bev(f.objects, cfg.bev_h, cfg.bev_w, cfg.bev_res,
                                     camera_sim_params(cfg), seed);
    f.radar = simulate_radar(f.objects, radar_sim_params(cfg), seed);
    return f;
}

// ---------------------------------------------------------------------------
// detection targets and loss
// ---------------------------------------------------------------------------

struct DetTargets {
    Tensor heat;      // (n_classes, H, W), binary
    Tensor reg;       // (8, H, W): offset, log size, yaw sin/cos, velocity / scale
    Tensor mask;      // (H, W), 1 at object center pixels
    Tensor vel_mask;  // (H, W), 1 on every pixel inside an object box; velocity
                      // is constant over the object so it is supervised densely
    int n_pos = 0;
    int n_vel_pos = 0;
};

inline DetTargets build_det_targets(const std::vector<SceneObject>& objects,
                                    const ExperimentConfig& cfg) {
    const BEVGrid geom = bev_geometry(cfg);
    DetTargets t;
    t.heat = Tensor::zeros({kNumClasses, cfg.bev_h, cfg.bev_w});
    t.reg = Tensor::zeros({8, cfg.bev_h, cfg.bev_w});
    t.mask = Tensor::zeros({cfg.bev_h, cfg.bev_w});
    t.vel_mask = Tensor::zeros({cfg.bev_h, cfg.bev_w});
    for (const auto& o : objects) {
        // dense velocity supervision over the object footprint
        for (int iy = 0; iy < cfg.bev_h; ++iy) {
            for (int ix = 0; ix < cfg.bev_w; ++ix) {
                auto [wx, wy] = geom.pixel_to_world(ix, iy);
                if (!point_in_oriented_box(wx, wy, o)) continue;
                t.vel_mask[static_cast<int64_t>(iy) * cfg.bev_w + ix] = 1.0;
                t.reg.at(6, iy, ix) = o.vx / cfg.vel_scale;
                t.reg.at(7, iy, ix) = o.vy / cfg.vel_scale;
                t.n_vel_pos++;
            }
        }
    }
    for (const auto& o : objects) {
        auto [px, py] = geom.world_to_pixel(o.cx, o.cy);
        const int ix = static_cast<int>(std::llround(px));
        const int iy = static_cast<int>(std::llround(py));
        if (!geom.in_bounds(ix, iy)) continue;
        t.heat.at(o.class_id, iy, ix) = 1.0;
        t.reg.at(0, iy, ix) = px - ix;
        t.reg.at(1, iy, ix) = py - iy;
        t.reg.at(2, iy, ix) = std::log(o.w);
        t.reg.at(3, iy, ix) = std::log(o.l);
        t.reg.at(4, iy, ix) = std::sin(o.yaw);
        t.reg.at(5, iy, ix) = std::cos(o.yaw);
        t.reg.at(6, iy, ix) = o.vx / cfg.vel_scale;
        t.reg.at(7, iy, ix) = o.vy / cfg.vel_scale;
        t.mask[static_cast<int64_t>(iy) * cfg.bev_w + ix] = 1.0;
        t.vel_mask[static_cast<int64_t>(iy) * cfg.bev_w + ix] = 1.0;
        t.n_pos++;
    }
    return t;
}

/// Focal objectness loss (renormalized by the positive count) plus masked L2
/// regression. Accumulates the map gradient when dmaps is non-null.
inline double det_loss(const Tensor& maps, const DetTargets& t, const ExperimentConfig& cfg,
                       Tensor* dmaps = nullptr) {
    const HeadChannels ch{kNumClasses};
    const int h = maps.dim(1), w = maps.dim(2);
    const int64_t plane = static_cast<int64_t>(h) * w;

    // objectness: focal over the class logits, scaled so each positive pixel
    // carries O(1) weight regardless of map size
    Tensor heat_logits({kNumClasses, h, w});
    std::copy(maps.data(), maps.data() + kNumClasses * plane, heat_logits.data());
    Tensor dheat = Tensor::zeros(heat_logits.shape());
    double loss = focal_loss(heat_logits, t.heat, 0.25, 2.0, dmaps ? &dheat : nullptr);
    const double norm = static_cast<double>(kNumClasses * plane) / std::max(1, t.n_pos);
    loss *= cfg.w_obj * norm;
    if (dmaps) {
        for (int64_t i = 0; i < dheat.size(); ++i) (*dmaps)[i] += dheat[i] * cfg.w_obj * norm;
    }

    // masked regression
    const double wk[8] = {cfg.w_off, cfg.w_off, cfg.w_size, cfg.w_size,
                          cfg.w_yaw, cfg.w_yaw, cfg.w_vel, cfg.w_vel};
    const double inv_pos = 1.0 / std::max(1, t.n_pos);
    const double inv_vel = 1.0 / std::max(1, t.n_vel_pos);
    for (int k = 0; k < 8; ++k) {
        const bool vel_channel = k >= 6;
        const Tensor& mask = vel_channel ? t.vel_mask : t.mask;
        const double inv = vel_channel ? inv_vel : inv_pos;
        const double* pred = maps.plane(ch.offset() + k);
        const double* target = t.reg.plane(k);
        double acc = 0.0;
        for (int64_t i = 0; i < plane; ++i) {
            if (mask[i] == 0.0) continue;
            const double d = pred[i] - target[i];
            acc += 0.5 * d * d;
            if (dmaps) {
                dmaps->plane(ch.offset() + k)[i] += wk[k] * d * inv;
            }
        }
        loss += wk[k] * acc * inv;
    }
    return loss;
}

/// Weighted multi-task segmentation loss on the decoder logits; gradients go
/// into dlogits when provided.
inline double seg_loss(const std::vector<Tensor>& logits, const SegMasks& gt,
                       const ExperimentConfig& cfg, std::vector<Tensor>* dlogits = nullptr) {
    const double weights[kSegTasks] = {cfg.w_seg_vehicle, cfg.w_seg_drivable, cfg.w_seg_lane};
    double loss = 0.0;
    for (int task = 0; task < kSegTasks; ++task) {
        const Tensor& lg = logits[static_cast<size_t>(task)];
        Tensor target = gt.task(task).reshaped(lg.shape());
        Tensor dl = Tensor::zeros(lg.shape());
        const double l = focal_loss(lg, target, 0.25, 2.0, dlogits ? &dl : nullptr);
        loss += cfg.seg_scale * weights[task] * l;
        if (dlogits) {
            dl *= cfg.seg_scale * weights[task];
            (*dlogits)[static_cast<size_t>(task)] += dl;
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// two-stage training
// ---------------------------------------------------------------------------

struct LossRow {
    int stage;
    int step;
    double loss;
};

struct Stage1Result {
    CameraOnlyModel model;
    std::vector<LossRow> losses;
};

inline std::vector<FrameData> make_dataset(const ExperimentConfig& cfg, uint64_t salt, int count) {
    std::vector<FrameData> frames;
    for (int i = 0; i < count; ++i) {
        frames.push_back(make_frame(cfg, cfg.seed * 0x9e37ULL + salt * 1000003ULL + static_cast<uint64_t>(i)));
    }
    return frames;
}

/// Stage 1: the camera-only model on clean camera BEV inputs.
inline Stage1Result train_stage1(const ExperimentConfig& cfg) {
    Rng rng(cfg.seed * 7919ULL + 1);
    Stage1Result res{CameraOnlyModel(cfg, rng), {}};
    std::vector<FrameData> frames = make_dataset(cfg, 11, cfg.n_train_scenes);
    std::vector<DetTargets> targets;
    for (const auto& f : frames) targets.push_back(build_det_targets(f.objects, cfg));

    std::vector<NamedParam> params;
    res.model.collect(params);
    AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    opt.init(params);

    for (int step = 0; step < cfg.steps1; ++step) {
        opt.lr = cosine_lr(cfg.lr, step, cfg.steps1);
        const FrameData& f = frames[static_cast<size_t>(step % cfg.n_train_scenes)];
        const DetTargets& t = targets[static_cast<size_t>(step % cfg.n_train_scenes)];
        zero_grads(params);
        CameraOnlyCache cache;
        Tensor maps = camera_only_forward(res.model, f.camera_bev.data, &cache);
        Tensor dmaps = Tensor::zeros(maps.shape());
        const double loss = det_loss(maps, t, cfg, &dmaps);
        if (!std::isfinite(loss)) throw std::runtime_error("train_stage1: loss diverged (NaN/Inf)");
        camera_only_backward(res.model, cache, dmaps);
        opt.step(params);
        res.losses.push_back({1, step, loss});
    }
    return res;
}

struct Stage2Result {
    FusedModel model;
    std::vector<LossRow> losses;
    uint64_t frozen_hash_before = 0;
    uint64_t frozen_hash_after = 0;
};

/// Stage 2: the radar path and fusion are trained on the same scene
/// distribution with sensor-dropout and radar-noise augmentation; the camera
/// trunk is inherited from stage 1 and frozen.
inline Stage2Result train_stage2(const ExperimentConfig& cfg, const CameraOnlyModel& stage1) {
    Rng rng(cfg.seed * 104729ULL + 2);
    Stage2Result res{FusedModel(cfg, rng), {}, 0, 0};
    res.model.cam_trunk = stage1.trunk;

    std::vector<FrameData> frames = make_dataset(cfg, 11, cfg.n_train_scenes);
    std::vector<DetTargets> targets;
    std::vector<SegMasks> seg_gt;
    for (const auto& f : frames) {
        targets.push_back(build_det_targets(f.objects, cfg));
        if (cfg.train_seg) {
            SegGtParams sg;
            sg.drivable_radius = cfg.drivable_radius;
            seg_gt.push_back(render_gt_seg(f.objects, cfg.bev_h * cfg.seg_upsample,
                                           cfg.bev_w * cfg.seg_upsample,
                                           cfg.bev_res / cfg.seg_upsample, sg));
        }
    }

    std::vector<NamedParam> trainable;
    res.model.collect_fusion(trainable);
    if (!cfg.freeze_camera_stage2) res.model.collect_camera(trainable);
    std::vector<NamedParam> frozen;
    if (cfg.freeze_camera_stage2) res.model.collect_camera(frozen);
    res.frozen_hash_before = params_hash(frozen);

    AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    opt.init(trainable);

    for (int step = 0; step < cfg.steps2; ++step) {
        opt.lr = cosine_lr(cfg.lr, step, cfg.steps2);
        const int fi = step % cfg.n_train_scenes;
        const FrameData& f = frames[static_cast<size_t>(fi)];
        const DetTargets& t = targets[static_cast<size_t>(fi)];

        // sensor augmentation, seeded per step
        Rng aug(cfg.seed * 15485863ULL + static_cast<uint64_t>(step) * 31ULL + 5);
        BEVGrid cam = f.camera_bev;
        const double u = aug.uniform();
        if (u < cfg.all_drop_prob) {
            cam = drop_camera_views(cam, 6, aug.next_u64());
        } else if (u < cfg.all_drop_prob + cfg.view_dropout_prob) {
            cam = drop_camera_views(cam, 1 + static_cast<int>(aug.uniform_int(3)), aug.next_u64());
        }
        RadarPointCloud radar = f.radar;
        if (cfg.radar_noise_train > 0.0) {
            radar = perturb_xy(radar, cfg.radar_noise_train * aug.uniform(), aug.next_u64());
        }

        zero_grads(trainable);
        FusedForwardCache cache;
        Tensor maps = fused_forward(res.model, cam.data, radar, &cache);
        Tensor dmaps = Tensor::zeros(maps.shape());
        double loss = det_loss(maps, t, cfg, &dmaps);
        if (!std::isfinite(loss)) throw std::runtime_error("train_stage2: loss diverged (NaN/Inf)");
        fused_backward(res.model, cache, dmaps, !cfg.freeze_camera_stage2);

        if (cfg.train_seg) {
            // the segmentation decoder trains on detached fused features
            SegDecodeCache seg_cache;
            auto logits = seg_decode_logits(cache.fused, res.model.seg, &seg_cache);
            std::vector<Tensor> dlogits;
            for (const auto& lg : logits) dlogits.push_back(Tensor::zeros(lg.shape()));
            loss += seg_loss(logits, seg_gt[static_cast<size_t>(fi)], cfg, &dlogits);
            seg_decode_backward(res.model.seg, seg_cache, dlogits);
        }

        opt.step(trainable);
        res.losses.push_back({2, step, loss});
    }
    res.frozen_hash_after = params_hash(frozen);
    return res;
}

}  // namespace rcbev
