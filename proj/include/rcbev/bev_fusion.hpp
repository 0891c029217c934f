#pragma once

#include "rcbev/ops.hpp"

namespace rcbev {

// ---------------------------------------------------------------------------
// deformable cross-attention
// ---------------------------------------------------------------------------

/// Parameters of one deformable cross-attention direction. Offsets and
/// attention logits are predicted from the query feature; K locations per
/// head are sampled from the value grid with bilinear interpolation.
/// Offset and weight predictors start at zero so training begins from
/// identity sampling with uniform attention.
struct DeformAttnParams {
    int heads = 4;         // H
    int points = 4;        // K sampled keys per head
    LinearParams offset_pred;  // (H*K*2, C_query)
    LinearParams weight_pred;  // (H*K, C_query)
    Param value_proj;          // (H, d, C_value)   W'_h
    Param out_weight;          // (H, C_out, d)     W_h

    DeformAttnParams() = default;
    DeformAttnParams(int heads_, int points_, int c_query, int c_value, int c_out, Rng& rng)
        : heads(heads_), points(points_), offset_pred(heads_ * points_ * 2, c_query),
          weight_pred(heads_ * points_, c_query),
          value_proj(Tensor::zeros({heads_, std::max(1, c_out / heads_), c_value})),
          out_weight(Tensor::zeros({heads_, c_out, std::max(1, c_out / heads_)})) {
        const int d = head_dim();
        const double sv = 1.0 / std::sqrt(static_cast<double>(c_value));
        for (int64_t i = 0; i < value_proj.value.size(); ++i) value_proj.value[i] = rng.normal() * sv;
        const double so = 1.0 / std::sqrt(static_cast<double>(d * heads_));
        for (int64_t i = 0; i < out_weight.value.size(); ++i) out_weight.value[i] = rng.normal() * so;
    }

    int c_query() const { return offset_pred.in_dim(); }
    int c_value() const { return value_proj.value.dim(2); }
    int c_out() const { return out_weight.value.dim(1); }
    int head_dim() const { return value_proj.value.dim(1); }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        offset_pred.collect(out, prefix + ".off");
        weight_pred.collect(out, prefix + ".wgt");
        out.push_back({prefix + ".vproj", &value_proj});
        out.push_back({prefix + ".wout", &out_weight});
    }
};

struct DeformAttnCache {
    Tensor queries;   // (Nq, C_query)
    Tensor refs;      // (Nq, 2) pixel coords
    Tensor offsets;   // (Nq, H*K*2)
    Tensor attn;      // (Nq, H*K) softmax over K within each head
    Tensor samples;   // (Nq, H*K, C_value)
    Tensor head_acc;  // (Nq, H, d)
    Tensor value;     // copy of the sampled grid, needed for position gradients
};

/// Eq-style deformable attention: out_q = sum_h W_h [ sum_k A_hqk * W'_h
/// F(p_q + dp_hqk) ]. Sampling is zero-padded bilinear; A is a softmax over
/// the K sampled keys of each head.
inline Tensor deform_cross_attn(const Tensor& queries, const Tensor& refs, const Tensor& value_grid,
                                const DeformAttnParams& p, DeformAttnCache* cache = nullptr,
                                OpCounter* counter = nullptr) {
    const int nq = queries.dim(0);
    if (refs.dim(0) != nq) throw std::invalid_argument("deform_cross_attn: refs/queries mismatch");
    if (value_grid.dim(0) != p.c_value()) {
        throw std::invalid_argument("deform_cross_attn: value channel mismatch");
    }
    const int h = p.heads, k = p.points, d = p.head_dim();
    const int cv = p.c_value(), co = p.c_out();

    Tensor offsets = linear(queries, p.offset_pred);   // (Nq, H*K*2)
    Tensor wlogits = linear(queries, p.weight_pred);   // (Nq, H*K)
    if (counter) {
        counter->mults += static_cast<uint64_t>(nq) * p.c_query() * (h * k * 2 + h * k);
    }
    Tensor attn = softmax(wlogits.reshaped({nq, h, k}), 2).reshaped({nq, h * k});

    Tensor samples({nq, h * k, cv});
    Tensor head_acc = Tensor::zeros({nq, h, d});
    Tensor out = Tensor::zeros({nq, co});
    for (int q = 0; q < nq; ++q) {
        const double rx = refs.at(q, 0), ry = refs.at(q, 1);
        for (int hd = 0; hd < h; ++hd) {
            double* acc = head_acc.data() + (static_cast<int64_t>(q) * h + hd) * d;
            for (int kk = 0; kk < k; ++kk) {
                const int idx = hd * k + kk;
                const double px = rx + offsets.at(q, 2 * idx);
                const double py = ry + offsets.at(q, 2 * idx + 1);
                double* smp = samples.data() + (static_cast<int64_t>(q) * h * k + idx) * cv;
                bilinear_sample(value_grid, px, py, smp, counter);
                const double a = attn.at(q, idx);
                const double* wp = p.value_proj.value.data() + static_cast<int64_t>(hd) * d * cv;
                for (int e = 0; e < d; ++e) {
                    double s = 0.0;
                    for (int c = 0; c < cv; ++c) s += wp[static_cast<int64_t>(e) * cv + c] * smp[c];
                    acc[e] += a * s;
                }
                if (counter) counter->mults += static_cast<uint64_t>(d) * cv + d;
            }
            const double* wo = p.out_weight.value.data() + static_cast<int64_t>(hd) * co * d;
            double* oq = out.row(q);
            for (int c = 0; c < co; ++c) {
                double s = 0.0;
                for (int e = 0; e < d; ++e) s += wo[static_cast<int64_t>(c) * d + e] * acc[e];
                oq[c] += s;
            }
            if (counter) counter->mults += static_cast<uint64_t>(co) * d;
        }
    }
    if (cache) {
        cache->queries = queries;
        cache->refs = refs;
        cache->offsets = std::move(offsets);
        cache->attn = std::move(attn);
        cache->samples = std::move(samples);
        cache->head_acc = std::move(head_acc);
        cache->value = value_grid;
    }
    return out;
}

/// Returns (d_queries, d_value_grid); reference points are treated as fixed.
inline std::pair<Tensor, Tensor> deform_cross_attn_backward(DeformAttnParams& p,
                                                            const DeformAttnCache& cache,
                                                            const Tensor& dout) {
    const int nq = cache.queries.dim(0);
    const int h = p.heads, k = p.points, d = p.head_dim();
    const int cv = p.c_value(), co = p.c_out();
    Tensor dvalue = Tensor::zeros(cache.value.shape());
    Tensor dattn = Tensor::zeros({nq, h * k});
    Tensor doffsets = Tensor::zeros({nq, h * k * 2});
    double* dwo_all = p.out_weight.grad.data();
    double* dwp_all = p.value_proj.grad.data();

    std::vector<double> dacc(static_cast<size_t>(d));
    std::vector<double> dsmp(static_cast<size_t>(cv));
    for (int q = 0; q < nq; ++q) {
        const double* dq = dout.row(q);
        for (int hd = 0; hd < h; ++hd) {
            const double* acc = cache.head_acc.data() + (static_cast<int64_t>(q) * h + hd) * d;
            const double* wo = p.out_weight.value.data() + static_cast<int64_t>(hd) * co * d;
            double* dwo = dwo_all + static_cast<int64_t>(hd) * co * d;
            for (int e = 0; e < d; ++e) dacc[static_cast<size_t>(e)] = 0.0;
            for (int c = 0; c < co; ++c) {
                for (int e = 0; e < d; ++e) {
                    dwo[static_cast<int64_t>(c) * d + e] += dq[c] * acc[e];
                    dacc[static_cast<size_t>(e)] += dq[c] * wo[static_cast<int64_t>(c) * d + e];
                }
            }
            const double* wp = p.value_proj.value.data() + static_cast<int64_t>(hd) * d * cv;
            double* dwp = dwp_all + static_cast<int64_t>(hd) * d * cv;
            for (int kk = 0; kk < k; ++kk) {
                const int idx = hd * k + kk;
                const double a = cache.attn.at(q, idx);
                const double* smp =
                    cache.samples.data() + (static_cast<int64_t>(q) * h * k + idx) * cv;
                // dA = dacc . (W' smp); dsmp = W'^T (a * dacc)
                double da = 0.0;
                for (int c = 0; c < cv; ++c) dsmp[static_cast<size_t>(c)] = 0.0;
                for (int e = 0; e < d; ++e) {
                    double ws = 0.0;
                    for (int c = 0; c < cv; ++c) {
                        ws += wp[static_cast<int64_t>(e) * cv + c] * smp[c];
                        dsmp[static_cast<size_t>(c)] +=
                            wp[static_cast<int64_t>(e) * cv + c] * a * dacc[static_cast<size_t>(e)];
                        dwp[static_cast<int64_t>(e) * cv + c] +=
                            a * dacc[static_cast<size_t>(e)] * smp[c];
                    }
                    da += dacc[static_cast<size_t>(e)] * ws;
                }
                dattn.at(q, idx) += da;
                const double px = cache.refs.at(q, 0) + cache.offsets.at(q, 2 * idx);
                const double py = cache.refs.at(q, 1) + cache.offsets.at(q, 2 * idx + 1);
                auto [dpx, dpy] = bilinear_sample_backward(cache.value, px, py, dsmp.data(), &dvalue);
                doffsets.at(q, 2 * idx) += dpx;
                doffsets.at(q, 2 * idx + 1) += dpy;
            }
        }
    }
    Tensor dlogits =
        softmax_backward(cache.attn.reshaped({nq, h, k}), dattn.reshaped({nq, h, k}), 2)
            .reshaped({nq, h * k});
    Tensor dqueries = linear_backward(cache.queries, p.weight_pred, dlogits);
    dqueries += linear_backward(cache.queries, p.offset_pred, doffsets);
    return {std::move(dqueries), std::move(dvalue)};
}

// ---------------------------------------------------------------------------
// vanilla dense cross-attention (complexity baseline)
// ---------------------------------------------------------------------------

struct VanillaCrossAttnParams {
    LinearParams q_proj, k_proj, v_proj, out_proj;  // all (C, C)

    VanillaCrossAttnParams() = default;
    VanillaCrossAttnParams(int c, Rng& rng)
        : q_proj(c, c), k_proj(c, c), v_proj(c, c), out_proj(c, c) {
        q_proj.init(rng);
        k_proj.init(rng);
        v_proj.init(rng);
        out_proj.init(rng);
    }
};

/// Every BEV cell of the query grid attends to every cell of the value grid:
/// the O(H^2 W^2 C) reference that deformable attention replaces.
inline Tensor vanilla_cross_attn_dense(const Tensor& query_grid, const Tensor& value_grid,
                                       const VanillaCrossAttnParams& p, OpCounter* counter = nullptr) {
    const int c = query_grid.dim(0), gh = query_grid.dim(1), gw = query_grid.dim(2);
    const int64_t n = static_cast<int64_t>(gh) * gw;
    auto rows_of = [&](const Tensor& g) {
        Tensor rows({static_cast<int>(n), c});
        for (int ch = 0; ch < c; ++ch) {
            const double* pl = g.plane(ch);
            for (int64_t i = 0; i < n; ++i) rows.at(static_cast<int>(i), ch) = pl[i];
        }
        return rows;
    };
    Tensor zq = rows_of(query_grid), zv = rows_of(value_grid);
    Tensor q = linear(zq, p.q_proj), k = linear(zv, p.k_proj), v = linear(zv, p.v_proj);
    if (counter) counter->mults += 3ULL * static_cast<uint64_t>(n) * c * c;
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    Tensor ctx({static_cast<int>(n), c});
    std::vector<double> logits(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int e = 0; e < c; ++e) acc += q.at(static_cast<int>(i), e) * k.at(static_cast<int>(j), e);
            logits[static_cast<size_t>(j)] = acc * scale;
            mx = std::max(mx, logits[static_cast<size_t>(j)]);
        }
        if (counter) counter->mults += static_cast<uint64_t>(n) * c;
        double z = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            logits[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - mx);
            z += logits[static_cast<size_t>(j)];
        }
        for (int e = 0; e < c; ++e) {
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += logits[static_cast<size_t>(j)] * v.at(static_cast<int>(j), e);
            ctx.at(static_cast<int>(i), e) = acc / z;
        }
        if (counter) counter->mults += static_cast<uint64_t>(n) * c;
    }
    Tensor out_rows = linear(ctx, p.out_proj);
    if (counter) counter->mults += static_cast<uint64_t>(n) * c * c;
    Tensor out({c, gh, gw});
    for (int ch = 0; ch < c; ++ch) {
        double* pl = out.plane(ch);
        for (int64_t i = 0; i < n; ++i) pl[i] = out_rows.at(static_cast<int>(i), ch);
    }
    return out;
}

// ---------------------------------------------------------------------------
// bidirectional alignment + channel/spatial fusion
// ---------------------------------------------------------------------------

struct CamfAlignParams {
    Param pe_cam;  // (C,H,W) learnable positional embedding, camera side
    Param pe_rad;
    DeformAttnParams cam_update;  // queries from radar, samples camera
    DeformAttnParams rad_update;  // queries from camera, samples radar

    CamfAlignParams() = default;
    CamfAlignParams(int c, int gh, int gw, int heads, int points, Rng& rng)
        : pe_cam(randn({c, gh, gw}, rng, 0.02)), pe_rad(randn({c, gh, gw}, rng, 0.02)),
          cam_update(heads, points, c, c, c, rng), rad_update(heads, points, c, c, c, rng) {}

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        out.push_back({prefix + ".pe_cam", &pe_cam});
        out.push_back({prefix + ".pe_rad", &pe_rad});
        cam_update.collect(out, prefix + ".cam");
        rad_update.collect(out, prefix + ".rad");
    }
};

namespace detail {

inline Tensor grid_rows(const Tensor& g) {
    const int c = g.dim(0);
    const int64_t n = static_cast<int64_t>(g.dim(1)) * g.dim(2);
    Tensor rows({static_cast<int>(n), c});
    for (int ch = 0; ch < c; ++ch) {
        const double* pl = g.plane(ch);
        for (int64_t i = 0; i < n; ++i) rows.at(static_cast<int>(i), ch) = pl[i];
    }
    return rows;
}

inline Tensor rows_to_grid(const Tensor& rows, int gh, int gw) {
    const int c = rows.dim(1);
    Tensor g({c, gh, gw});
    const int64_t n = static_cast<int64_t>(gh) * gw;
    for (int ch = 0; ch < c; ++ch) {
        double* pl = g.plane(ch);
        for (int64_t i = 0; i < n; ++i) pl[i] = rows.at(static_cast<int>(i), ch);
    }
    return g;
}

inline Tensor own_pixel_refs(int gh, int gw) {
    Tensor refs({gh * gw, 2});
    for (int y = 0; y < gh; ++y) {
        for (int x = 0; x < gw; ++x) {
            refs.at(y * gw + x, 0) = x;
            refs.at(y * gw + x, 1) = y;
        }
    }
    return refs;
}

}  // namespace detail

struct CamfAlignCache {
    Tensor cam_pe_grid, rad_pe_grid;  // F + positional embedding
    DeformAttnCache cam_update;
    DeformAttnCache rad_update;
    int gh = 0, gw = 0;
};

/// Bidirectional deformable alignment with residual connections: each
/// modality's grid is updated by attention driven by the other modality's
/// (position-embedded) features.
inline std::pair<Tensor, Tensor> camf_align(const Tensor& f_cam, const Tensor& f_rad,
                                            CamfAlignParams& p, CamfAlignCache* cache = nullptr,
                                            OpCounter* counter = nullptr) {
    if (!f_cam.same_shape(f_rad)) throw std::invalid_argument("camf_align: shape mismatch");
    const int gh = f_cam.dim(1), gw = f_cam.dim(2);
    Tensor cam_pe = f_cam;
    cam_pe += p.pe_cam.value;
    Tensor rad_pe = f_rad;
    rad_pe += p.pe_rad.value;

    Tensor refs = detail::own_pixel_refs(gh, gw);
    Tensor zq_rad = detail::grid_rows(rad_pe);
    Tensor zq_cam = detail::grid_rows(cam_pe);

    Tensor upd_cam = deform_cross_attn(zq_rad, refs, cam_pe, p.cam_update,
                                       cache ? &cache->cam_update : nullptr, counter);
    Tensor upd_rad = deform_cross_attn(zq_cam, refs, rad_pe, p.rad_update,
                                       cache ? &cache->rad_update : nullptr, counter);

    Tensor out_cam = f_cam;
    out_cam += detail::rows_to_grid(upd_cam, gh, gw);
    Tensor out_rad = f_rad;
    out_rad += detail::rows_to_grid(upd_rad, gh, gw);
    if (cache) {
        cache->cam_pe_grid = std::move(cam_pe);
        cache->rad_pe_grid = std::move(rad_pe);
        cache->gh = gh;
        cache->gw = gw;
    }
    return {std::move(out_cam), std::move(out_rad)};
}

/// Returns (d_f_cam, d_f_rad).
inline std::pair<Tensor, Tensor> camf_align_backward(CamfAlignParams& p, const CamfAlignCache& cache,
                                                     const Tensor& dout_cam, const Tensor& dout_rad) {
    const int gh = cache.gh, gw = cache.gw;
    auto [dzq_rad, dval_cam] =
        deform_cross_attn_backward(p.cam_update, cache.cam_update, detail::grid_rows(dout_cam));
    auto [dzq_cam, dval_rad] =
        deform_cross_attn_backward(p.rad_update, cache.rad_update, detail::grid_rows(dout_rad));

    // cam_pe receives gradient as deform value grid (cam direction) and as the
    // query source of the radar update; likewise for rad_pe.
    Tensor dcam_pe = dval_cam;
    dcam_pe += detail::rows_to_grid(dzq_cam, gh, gw);
    Tensor drad_pe = dval_rad;
    drad_pe += detail::rows_to_grid(dzq_rad, gh, gw);

    p.pe_cam.grad += dcam_pe;
    p.pe_rad.grad += drad_pe;

    Tensor df_cam = dout_cam;  // residual
    df_cam += dcam_pe;
    Tensor df_rad = dout_rad;
    df_rad += drad_pe;
    return {std::move(df_cam), std::move(df_rad)};
}

// ---------------------------------------------------------------------------
// channel/spatial fusion: concat -> CBR with residual -> three CBR blocks
// ---------------------------------------------------------------------------

struct ChannelSpatialFuseParams {
    CbrParams first;               // (2C -> 2C), wrapped in a residual
    std::vector<CbrParams> rest;   // 2C -> C_f -> C_f -> C_f

    ChannelSpatialFuseParams() = default;
    ChannelSpatialFuseParams(int c_in2, int c_f, Rng& rng) : first(c_in2, c_in2) {
        first.init(rng);
        int c = c_in2;
        for (int i = 0; i < 3; ++i) {
            CbrParams b(c_f, c);
            b.init(rng);
            rest.push_back(std::move(b));
            c = c_f;
        }
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        first.collect(out, prefix + ".cbr0");
        for (size_t i = 0; i < rest.size(); ++i) {
            rest[i].collect(out, prefix + ".cbr" + std::to_string(i + 1));
        }
    }
};

struct ChannelSpatialFuseCache {
    CbrCache first;
    std::vector<CbrCache> rest;
    int c_cam = 0;
};

inline Tensor channel_spatial_fuse(const Tensor& f_cam, const Tensor& f_rad,
                                   ChannelSpatialFuseParams& p,
                                   ChannelSpatialFuseCache* cache = nullptr) {
    if (f_cam.dim(1) != f_rad.dim(1) || f_cam.dim(2) != f_rad.dim(2)) {
        throw std::invalid_argument("channel_spatial_fuse: spatial mismatch");
    }
    Tensor h = concat_channels(f_cam, f_rad);
    if (cache) cache->c_cam = f_cam.dim(0);
    CbrCache local;
    Tensor r = cbr_forward(h, p.first, cache ? &cache->first : &local);
    r += h;  // residual around the first block
    for (size_t i = 0; i < p.rest.size(); ++i) {
        if (cache) {
            cache->rest.emplace_back();
            r = cbr_forward(r, p.rest[i], &cache->rest.back());
        } else {
            r = cbr_forward(r, p.rest[i], nullptr);
        }
    }
    return r;
}

/// Returns (d_f_cam, d_f_rad).
inline std::pair<Tensor, Tensor> channel_spatial_fuse_backward(ChannelSpatialFuseParams& p,
                                                               const ChannelSpatialFuseCache& cache,
                                                               const Tensor& dout) {
    Tensor g = dout;
    for (size_t i = p.rest.size(); i-- > 0;) {
        g = cbr_backward(p.rest[i], cache.rest[i], g);
    }
    Tensor dh = cbr_backward(p.first, cache.first, g);
    dh += g;  // residual
    return split_channels(dh, cache.c_cam);
}

}  // namespace rcbev
