#pragma once

#include "rcbev/bev_fusion.hpp"
#include "rcbev/config.hpp"
#include "rcbev/heads.hpp"
#include "rcbev/radar_backbone.hpp"
#include "rcbev/rcs_scatter.hpp"
#include "rcbev/sparse_fusion.hpp"
#include "rcbev/synthetic_world.hpp"

namespace rcbev {

inline BEVGrid bev_geometry(const ExperimentConfig& cfg) {
    return BEVGrid::centered(cfg.bev_h, cfg.bev_w, cfg.bev_res, 1);
}

inline DualStreamConfig backbone_config(const ExperimentConfig& cfg) {
    DualStreamConfig c;
    c.stages = cfg.radar_stages;
    c.point_widths.clear();
    for (int s = 0; s < cfg.radar_stages; ++s) c.point_widths.push_back(cfg.radar_point_width << s);
    c.tf_width = cfg.radar_tf_width;
    c.dmsa_heads = cfg.dmsa_heads;
    c.exchange_heads = cfg.exchange_heads;
    c.include_z = cfg.include_z;
    c.sweep_count = cfg.sweep_count;
    // meters and m/s mapped into roughly [-1, 1]
    const double pos = 1.0 / std::max(1.0, 1.25 * cfg.area_extent);
    const double vel = 1.0 / std::max(1.0, cfg.v_max);
    if (cfg.include_z) {
        c.feature_scale = {pos, pos, 1.0 / 3.0, 0.1, vel, vel, 1.0};
    } else {
        c.feature_scale = {pos, pos, 0.1, vel, vel, 1.0};
    }
    return c;
}

inline ScatterParams scatter_params(const ExperimentConfig& cfg) {
    return {cfg.k_norm, cfg.r_max_px};
}

// ---------------------------------------------------------------------------
// camera trunk (the stand-in camera stream; frozen during stage 2)
// ---------------------------------------------------------------------------

struct CameraTrunkParams {
    CbrParams block1;
    CbrParams block2;

    CameraTrunkParams() = default;
    CameraTrunkParams(int c_out, Rng& rng) : block1(c_out, kNumClasses), block2(c_out, c_out) {
        block1.init(rng);
        block2.init(rng);
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        block1.collect(out, prefix + ".b1");
        block2.collect(out, prefix + ".b2");
    }
};

struct CameraTrunkCache {
    CbrCache b1, b2;
};

inline Tensor camera_trunk_forward(const Tensor& camera_bev, CameraTrunkParams& p,
                                   CameraTrunkCache* cache = nullptr) {
    CbrCache l1, l2;
    Tensor h = cbr_forward(camera_bev, p.block1, cache ? &cache->b1 : &l1);
    return cbr_forward(h, p.block2, cache ? &cache->b2 : &l2);
}

inline Tensor camera_trunk_backward(CameraTrunkParams& p, const CameraTrunkCache& cache,
                                    const Tensor& dout) {
    Tensor dh = cbr_backward(p.block2, cache.b2, dout);
    return cbr_backward(p.block1, cache.b1, dh);
}

// ---------------------------------------------------------------------------
// stage-1 camera-only model
// ---------------------------------------------------------------------------

struct CameraOnlyModel {
    ExperimentConfig cfg;
    CameraTrunkParams trunk;
    CenterHeadParams head;

    CameraOnlyModel() = default;
    CameraOnlyModel(const ExperimentConfig& cfg_, Rng& rng)
        : cfg(cfg_), trunk(cfg_.bev_channels, rng),
          head(cfg_.bev_channels, cfg_.head_hidden, kNumClasses, rng) {}

    void collect(std::vector<NamedParam>& out) {
        trunk.collect(out, "cam");
        head.collect(out, "head");
    }
};

struct CameraOnlyCache {
    CameraTrunkCache trunk;
    CenterHeadCache head;
};

inline Tensor camera_only_forward(CameraOnlyModel& m, const Tensor& camera_bev,
                                  CameraOnlyCache* cache = nullptr) {
    CameraTrunkCache local;
    Tensor f = camera_trunk_forward(camera_bev, m.trunk, cache ? &cache->trunk : &local);
    return center_head(f, m.head, cache ? &cache->head : nullptr);
}

inline void camera_only_backward(CameraOnlyModel& m, const CameraOnlyCache& cache,
                                 const Tensor& dmaps) {
    Tensor df = center_head_backward(m.head, cache.head, dmaps);
    camera_trunk_backward(m.trunk, cache.trunk, df);
}

// ---------------------------------------------------------------------------
// stage-2 fused model (dense path)
// ---------------------------------------------------------------------------

struct FusedModel {
    ExperimentConfig cfg;
    bool use_camf = true;

    CameraTrunkParams cam_trunk;  // inherited from stage 1, frozen by default
    DualStreamParams radar;
    Mlp rcs_mlp;                 // (C_pt + 1) -> rcs_mlp_out
    BevEncoderParams bev_enc;    // (rcs_mlp_out + C_pt) -> bev_channels
    CamfAlignParams align;
    ChannelSpatialFuseParams fuse;
    CenterHeadParams head;
    SegDecoderParams seg;

    FusedModel() = default;
    FusedModel(const ExperimentConfig& cfg_, Rng& rng)
        : cfg(cfg_), use_camf(cfg_.fusion == "camf"), cam_trunk(cfg_.bev_channels, rng),
          radar(backbone_config(cfg_), rng) {
        const int c_pt = radar.cfg.out_dim();
        rcs_mlp = Mlp({c_pt + 1, 2 * cfg_.rcs_mlp_out, cfg_.rcs_mlp_out}, rng);
        bev_enc = BevEncoderParams(cfg_.rcs_mlp_out + c_pt, {cfg_.bev_channels, cfg_.bev_channels}, rng);
        align = CamfAlignParams(cfg_.bev_channels, cfg_.bev_h, cfg_.bev_w, cfg_.deform_heads,
                                cfg_.deform_points, rng);
        fuse = ChannelSpatialFuseParams(2 * cfg_.bev_channels, cfg_.fuse_channels, rng);
        head = CenterHeadParams(cfg_.fuse_channels, cfg_.head_hidden, kNumClasses, rng);
        seg = SegDecoderParams(cfg_.fuse_channels, cfg_.seg_hidden, rng, cfg_.seg_upsample);
    }

    void collect_camera(std::vector<NamedParam>& out) { cam_trunk.collect(out, "cam"); }

    /// Everything trained in stage 2 (the camera trunk stays out when frozen).
    void collect_fusion(std::vector<NamedParam>& out) {
        radar.collect(out, "radar");
        rcs_mlp.collect(out, "rcsmlp");
        bev_enc.collect(out, "bevenc");
        if (use_camf) align.collect(out, "align");
        fuse.collect(out, "fuse");
        head.collect(out, "head");
        seg.collect(out, "seg");
    }

    void collect_all(std::vector<NamedParam>& out) {
        collect_camera(out);
        collect_fusion(out);
    }
};

struct FusedForwardCache {
    CameraTrunkCache cam;
    DualStreamCache backbone;
    std::vector<ScatterFootprint> rcs_fps;
    std::vector<ScatterFootprint> base_fps;
    Tensor point_feats;
    FuseRcsCache rcs;
    BevEncodeCache enc;
    CamfAlignCache align;
    ChannelSpatialFuseCache fuse;
    CenterHeadCache head;
    Tensor fused;  // fused BEV features (input of the heads)
};

/// Single-cell footprint at the point's own pixel (the conventional scatter
/// that the RCS-aware raster is concatenated with).
inline ScatterFootprint own_pixel_footprint(const RadarPoint& pt, const BEVGrid& grid,
                                            int point_index) {
    ScatterFootprint fp;
    fp.point_index = point_index;
    auto [px, py] = grid.world_to_pixel(pt.x, pt.y);
    const int ox = static_cast<int>(std::llround(px));
    const int oy = static_cast<int>(std::llround(py));
    if (grid.in_bounds(ox, oy)) fp.cells.push_back({oy, ox, 1.0});
    return fp;
}

/// Radar points -> RCS-aware BEV feature, as one reusable block: dual-stream
/// backbone, RCS scattering with summation pooling, Gaussian weight-map merge,
/// per-pixel fusion MLP, then the convolutional BEV encoder.
inline Tensor radar_bev_forward(FusedModel& m, const RadarPointCloud& radar,
                                FusedForwardCache* cache) {
    const BEVGrid geom = bev_geometry(m.cfg);
    const ScatterParams sp = scatter_params(m.cfg);
    const int h = m.cfg.bev_h, w = m.cfg.bev_w;

    DualStreamCache local_bb;
    Tensor feats = dual_stream_forward(radar, m.radar, cache ? &cache->backbone : &local_bb);
    const int n = feats.dim(0);

    std::vector<ScatterFootprint> rcs_fps, base_fps;
    Tensor g_rcs = Tensor::zeros({h, w});
    for (int i = 0; i < n; ++i) {
        const RadarPoint& pt = radar.points[static_cast<size_t>(i)];
        rcs_fps.push_back(rcs_footprint(pt, geom, sp, i));
        base_fps.push_back(own_pixel_footprint(pt, geom, i));
        for (const auto& cell : rcs_fps.back().cells) {
            double& v = g_rcs[static_cast<int64_t>(cell.py) * w + cell.px];
            v = std::max(v, cell.weight);
        }
    }
    Tensor f_rcs = scatter_sum(feats, rcs_fps, h, w);
    Tensor base = scatter_sum(feats, base_fps, h, w);
    FuseRcsCache local_rcs;
    Tensor f_prime = fuse_rcs(f_rcs, g_rcs, m.rcs_mlp, cache ? &cache->rcs : &local_rcs);
    BevEncodeCache local_enc;
    Tensor f_rad = bev_encode(f_prime, base, m.bev_enc, cache ? &cache->enc : &local_enc);
    if (cache) {
        cache->rcs_fps = std::move(rcs_fps);
        cache->base_fps = std::move(base_fps);
        cache->point_feats = std::move(feats);
    }
    return f_rad;
}

inline void radar_bev_backward(FusedModel& m, FusedForwardCache& cache, const Tensor& df_rad) {
    auto [df_prime, dbase] = bev_encode_backward(m.bev_enc, cache.enc, df_rad);
    Tensor df_rcs = fuse_rcs_backward(m.rcs_mlp, cache.rcs, df_prime);
    const int n = cache.point_feats.dim(0);
    const int c_pt = cache.point_feats.dim(1);
    if (n == 0) return;
    Tensor dfeats = scatter_sum_backward(df_rcs, cache.rcs_fps, n, c_pt);
    dfeats += scatter_sum_backward(dbase, cache.base_fps, n, c_pt);
    dual_stream_backward(m.radar, cache.backbone, dfeats);
}

/// Full dense pipeline: prediction maps from one frame's sensors.
inline Tensor fused_forward(FusedModel& m, const Tensor& camera_bev, const RadarPointCloud& radar,
                            FusedForwardCache* cache = nullptr) {
    CameraTrunkCache local_cam;
    Tensor f_cam = camera_trunk_forward(camera_bev, m.cam_trunk, cache ? &cache->cam : &local_cam);
    Tensor f_rad = radar_bev_forward(m, radar, cache);

    Tensor f_cam2 = f_cam, f_rad2 = f_rad;
    if (m.use_camf) {
        auto [a, b] = camf_align(f_cam, f_rad, m.align, cache ? &cache->align : nullptr);
        f_cam2 = std::move(a);
        f_rad2 = std::move(b);
    }
    ChannelSpatialFuseCache local_fuse;
    Tensor fused = channel_spatial_fuse(f_cam2, f_rad2, m.fuse, cache ? &cache->fuse : &local_fuse);
    Tensor maps = center_head(fused, m.head, cache ? &cache->head : nullptr);
    if (cache) cache->fused = std::move(fused);
    return maps;
}

inline void fused_backward(FusedModel& m, FusedForwardCache& cache, const Tensor& dmaps,
                           bool train_camera = false) {
    Tensor dfused = center_head_backward(m.head, cache.head, dmaps);
    auto [dc2, dr2] = channel_spatial_fuse_backward(m.fuse, cache.fuse, dfused);
    Tensor dc = std::move(dc2), dr = std::move(dr2);
    if (m.use_camf) {
        auto [a, b] = camf_align_backward(m.align, cache.align, dc, dr);
        dc = std::move(a);
        dr = std::move(b);
    }
    radar_bev_backward(m, cache, dr);
    if (train_camera) camera_trunk_backward(m.cam_trunk, cache.cam, dc);
}

/// Radar-path feature grid exposed as a BEVGrid (for the sparse pipeline and
/// exports).
inline BEVGrid radar_bev_grid(FusedModel& m, const RadarPointCloud& radar) {
    BEVGrid grid = BEVGrid::centered(m.cfg.bev_h, m.cfg.bev_w, m.cfg.bev_res, 1);
    grid.data = radar_bev_forward(m, radar, nullptr);
    return grid;
}

// ---------------------------------------------------------------------------
// sparse-path toy model: per-object camera queries fused with radar features
// ---------------------------------------------------------------------------

struct SparseCameraSimParams {
    double depth_bias = 3.0;    // query positions inherit the camera depth error
    double pos_jitter = 0.5;
    double feat_noise = 0.05;
    int distractors = 2;
};

/// Stand-in for a query-based camera stream: one query per object (plus a few
/// distractors) whose feature samples the camera BEV at the query's own
/// (biased) position.
inline SparseQuerySet make_sparse_camera_queries(const std::vector<SceneObject>& objects,
                                                 const BEVGrid& camera_bev, int c_q,
                                                 const SparseCameraSimParams& params, uint64_t seed) {
    Rng rng(seed ^ 0x5ba55eULL);
    std::vector<std::array<double, 3>> positions;
    for (const auto& o : objects) {
        const double range = std::max(1e-6, std::hypot(o.cx, o.cy));
        const double rx = o.cx / range, ry = o.cy / range;
        const double shift = params.depth_bias + rng.normal(0.0, params.pos_jitter);
        positions.push_back({o.cx + shift * rx + rng.normal(0.0, params.pos_jitter),
                             o.cy + shift * ry + rng.normal(0.0, params.pos_jitter), o.cz});
    }
    for (int i = 0; i < params.distractors; ++i) {
        positions.push_back({rng.uniform(-40, 40), rng.uniform(-40, 40), 1.0});
    }
    const int m = static_cast<int>(positions.size());
    SparseQuerySet qs{Tensor({m, c_q}), Tensor({m, 3})};
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < 3; ++j) qs.positions.at(i, j) = positions[static_cast<size_t>(i)][static_cast<size_t>(j)];
        auto [px, py] = camera_bev.world_to_pixel(positions[static_cast<size_t>(i)][0],
                                                  positions[static_cast<size_t>(i)][1]);
        Tensor sample = bilinear_sample_vec(camera_bev.data, px, py);
        double* row = qs.features.row(i);
        const double range = std::hypot(positions[static_cast<size_t>(i)][0], positions[static_cast<size_t>(i)][1]);
        const double bearing = std::atan2(positions[static_cast<size_t>(i)][1], positions[static_cast<size_t>(i)][0]);
        for (int j = 0; j < c_q; ++j) {
            double v = 0.0;
            if (j < sample.size()) {
                v = sample[j];
            } else if (j == sample.size()) {
                v = range / 50.0;
            } else if (j == sample.size() + 1) {
                v = std::sin(bearing);
            } else if (j == sample.size() + 2) {
                v = std::cos(bearing);
            } else {
                v = 1.0;
            }
            row[j] = v + rng.normal(0.0, params.feat_noise);
        }
    }
    return qs;
}

/// One decoder layer: sparse alignment, linear fusion, and a residual MLP.
struct SparseDecoderLayer {
    SparseAlignParams align;
    LinearParams fuse_linear;  // (C_q, C_q + C_r)
    Mlp refine;                // C_q -> C_q (residual)

    SparseDecoderLayer() = default;
    SparseDecoderLayer(int c_q, int c_grid, int heads, int points, Rng& rng)
        : align(c_q, c_q, c_grid, heads, points, rng), fuse_linear(c_q, 2 * c_q),
          refine({c_q, 2 * c_q, c_q}, rng) {
        fuse_linear.init(rng);
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        align.collect(out, prefix + ".align");
        fuse_linear.collect(out, prefix + ".fuse");
        refine.collect(out, prefix + ".refine");
    }
};

struct SparseToyModel {
    ExperimentConfig cfg;
    int c_q = 8;
    PosEmbedParams pos_embed;
    std::vector<SparseDecoderLayer> layers;  // 2 decoder layers
    LinearParams score_head;  // C_q -> n_classes logits
    LinearParams box_head;    // C_q -> (dx, dy, log w, log l, sin, cos, vx/s, vy/s)

    SparseToyModel() = default;
    SparseToyModel(const ExperimentConfig& cfg_, int c_q_, int c_grid, Rng& rng)
        : cfg(cfg_), c_q(c_q_), pos_embed(c_q_, rng), score_head(kNumClasses, c_q_),
          box_head(8, c_q_) {
        for (int i = 0; i < 2; ++i) {
            layers.emplace_back(c_q_, c_grid, cfg_.deform_heads, cfg_.deform_points, rng);
        }
        score_head.init(rng);
        box_head.init(rng);
    }

    void collect(std::vector<NamedParam>& out) {
        pos_embed.collect(out, "pe");
        for (size_t i = 0; i < layers.size(); ++i) {
            layers[i].collect(out, "dec" + std::to_string(i));
        }
        score_head.collect(out, "score");
        box_head.collect(out, "box");
    }
};

struct SparseLayerCache {
    SparseAlignCache align;
    LinearFuseCache fuse;
    Tensor fuse_out;
    MlpCache refine;
    Tensor q_in, r_in;
};

struct SparseForwardCache {
    PosEmbedCache pe;
    Tensor q0, r0;  // embedded inputs
    std::vector<SparseLayerCache> layers;
    Tensor final_q;
};

struct SparseOutputs {
    Tensor score_logits;  // (M, n_classes)
    Tensor box;           // (M, 8)
};

/// Two decoder layers, each aligning the multi-modal queries (deformable
/// attention over the dense radar BEV, vanilla cross-attention for the sparse
/// radar features) then fusing with a linear layer and refining residually.
inline SparseOutputs sparse_forward(SparseToyModel& m, const SparseQuerySet& queries,
                                    const BEVGrid& radar_bev, SparseForwardCache* cache = nullptr) {
    Tensor refs = query_bev_refs(queries, radar_bev);
    Tensor sampled = project_and_sample(queries, radar_bev);

    PosEmbedCache local_pe;
    Tensor emb = positional_embed(queries.positions, m.pos_embed, cache ? &cache->pe : &local_pe);
    Tensor q = queries.features;
    q += emb;
    Tensor r = sampled;
    r += emb;
    if (cache) {
        cache->q0 = q;
        cache->r0 = r;
    }
    for (size_t li = 0; li < m.layers.size(); ++li) {
        SparseDecoderLayer& layer = m.layers[li];
        SparseLayerCache* lc = nullptr;
        if (cache) {
            cache->layers.emplace_back();
            lc = &cache->layers.back();
            lc->q_in = q;
            lc->r_in = r;
        }
        SparseAlignCache local_align;
        auto [qa, ra] = sparse_align(q, r, radar_bev.data, refs, layer.align,
                                     lc ? &lc->align : &local_align);
        LinearFuseCache local_fuse;
        Tensor fused = linear_fuse(qa, ra, layer.fuse_linear, lc ? &lc->fuse : &local_fuse);
        MlpCache local_refine;
        Tensor ref_out = mlp_forward(fused, layer.refine, lc ? &lc->refine : &local_refine);
        ref_out += fused;  // residual
        if (lc) lc->fuse_out = fused;
        q = std::move(ref_out);
        r = ra;
    }
    if (cache) cache->final_q = q;
    SparseOutputs out;
    out.score_logits = linear(q, m.score_head);
    out.box = linear(q, m.box_head);
    return out;
}

/// Backward through the sparse pipeline; query features and the radar grid
/// are inputs, so only parameter gradients are accumulated.
inline void sparse_backward(SparseToyModel& m, SparseForwardCache& cache, const Tensor& dscore,
                            const Tensor& dbox) {
    Tensor dq = linear_backward(cache.final_q, m.score_head, dscore);
    dq += linear_backward(cache.final_q, m.box_head, dbox);
    Tensor dr = Tensor::zeros(cache.r0.shape());
    for (size_t li = m.layers.size(); li-- > 0;) {
        SparseDecoderLayer& layer = m.layers[li];
        SparseLayerCache& lc = cache.layers[li];
        Tensor dfused = mlp_backward(layer.refine, lc.refine, dq);
        dfused += dq;  // residual around the refine MLP
        auto [dqa, dra] = linear_fuse_backward(layer.fuse_linear, lc.fuse, dfused, m.c_q);
        dra += dr;
        auto [dq_in, dr_in, dgrid] = sparse_align_backward(layer.align, lc.align, dqa, dra);
        (void)dgrid;
        dq = std::move(dq_in);
        dr = std::move(dr_in);
    }
    Tensor demb = dq;
    demb += dr;
    positional_embed_backward(m.pos_embed, cache.pe, demb);
}

/// Turns per-query outputs into detections in world coordinates.
inline std::vector<Detection> decode_sparse_detections(const SparseOutputs& out,
                                                       const SparseQuerySet& queries,
                                                       double vel_scale, double score_thresh) {
    std::vector<Detection> dets;
    for (int i = 0; i < queries.count(); ++i) {
        int best_cls = 0;
        double best_logit = out.score_logits.at(i, 0);
        for (int c = 1; c < kNumClasses; ++c) {
            if (out.score_logits.at(i, c) > best_logit) {
                best_logit = out.score_logits.at(i, c);
                best_cls = c;
            }
        }
        const double score = sigmoid(best_logit);
        if (score < score_thresh) continue;
        Detection d;
        d.x = queries.positions.at(i, 0) + out.box.at(i, 0);
        d.y = queries.positions.at(i, 1) + out.box.at(i, 1);
        d.w = std::exp(out.box.at(i, 2));
        d.l = std::exp(out.box.at(i, 3));
        d.yaw = std::atan2(out.box.at(i, 4), out.box.at(i, 5));
        d.vx = out.box.at(i, 6) * vel_scale;
        d.vy = out.box.at(i, 7) * vel_scale;
        d.class_id = best_cls;
        d.score = score;
        dets.push_back(d);
    }
    return dets;
}

}  // namespace rcbev
