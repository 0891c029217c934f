#pragma once

#include "rcbev/ops.hpp"
#include "rcbev/radar_cloud.hpp"

namespace rcbev {

// ---------------------------------------------------------------------------
// pairwise distances
// ---------------------------------------------------------------------------

/// Euclidean distance matrix of N xy coordinates: symmetric, zero diagonal.
inline Tensor pairwise_distances(const Tensor& coords) {
    const int n = coords.dim(0);
    Tensor d = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double dx = coords.at(i, 0) - coords.at(j, 0);
            const double dy = coords.at(i, 1) - coords.at(j, 1);
            const double v = std::sqrt(dx * dx + dy * dy);
            d.at(i, j) = v;
            d.at(j, i) = v;
        }
    }
    return d;
}

/// Streams plus geometry carried between backbone stages.
struct DualStreamState {
    Tensor f_p;     // point-stream features (N x C_p)
    Tensor f_t;     // transformer-stream features (N x C_t)
    Tensor coords;  // N x 2 point xy in meters
    Tensor dist;    // N x N pairwise distances
};

// ---------------------------------------------------------------------------
// point block: Concat[MLP(f), MaxPool(MLP(f))]
// ---------------------------------------------------------------------------

struct PointBlockCache {
    MlpCache mlp;
    Tensor mlp_out;           // N x M
    std::vector<int> argmax;  // per column, row index of the max
};

/// Per-point MLP followed by a global max pool whose result is appended to
/// every row; output width is twice the MLP width.
inline Tensor point_block(const Tensor& f, const Mlp& mlp, PointBlockCache* cache = nullptr) {
    const int n = f.dim(0);
    if (n == 0) return Tensor::zeros({0, 2 * mlp.out_dim()});
    MlpCache local;
    Tensor y = mlp_forward(f, mlp, cache ? &cache->mlp : &local);
    const int m = y.dim(1);
    std::vector<int> argmax(static_cast<size_t>(m), 0);
    for (int j = 0; j < m; ++j) {
        double best = y.at(0, j);
        for (int i = 1; i < n; ++i) {
            if (y.at(i, j) > best) {
                best = y.at(i, j);
                argmax[static_cast<size_t>(j)] = i;
            }
        }
    }
    Tensor out({n, 2 * m});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            out.at(i, j) = y.at(i, j);
            out.at(i, m + j) = y.at(argmax[static_cast<size_t>(j)], j);
        }
    }
    if (cache) {
        cache->mlp_out = std::move(y);
        cache->argmax = std::move(argmax);
    }
    return out;
}

inline Tensor point_block_backward(Mlp& mlp, const PointBlockCache& cache, const Tensor& dout) {
    const int n = dout.dim(0);
    const int m = cache.mlp_out.dim(1);
    Tensor dy = Tensor::zeros({n, m});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            dy.at(i, j) += dout.at(i, j);
            dy.at(cache.argmax[static_cast<size_t>(j)], j) += dout.at(i, m + j);
        }
    }
    return mlp_backward(mlp, cache.mlp, dy);
}

// ---------------------------------------------------------------------------
// multi-head attention core (shared by DMSA and the exchange cross-attention)
// ---------------------------------------------------------------------------

struct MultiHeadAttnParams {
    int heads = 1;
    LinearParams q_proj;   // (C_attn, C_q)
    LinearParams k_proj;   // (C_attn, C_kv)
    LinearParams v_proj;   // (C_attn, C_kv)
    LinearParams out_proj; // (C_out, C_attn)

    MultiHeadAttnParams() = default;
    MultiHeadAttnParams(int heads_, int c_q, int c_kv, int c_attn, int c_out, Rng& rng)
        : heads(heads_), q_proj(c_attn, c_q), k_proj(c_attn, c_kv), v_proj(c_attn, c_kv),
          out_proj(c_out, c_attn) {
        if (c_attn % heads_ != 0) throw std::invalid_argument("attention width not divisible by heads");
        q_proj.init(rng);
        k_proj.init(rng);
        v_proj.init(rng);
        out_proj.init(rng);
    }

    int attn_dim() const { return q_proj.out_dim(); }
    int head_dim() const { return attn_dim() / heads; }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        q_proj.collect(out, prefix + ".q");
        k_proj.collect(out, prefix + ".k");
        v_proj.collect(out, prefix + ".v");
        out_proj.collect(out, prefix + ".o");
    }
};

struct AttnCache {
    Tensor x_q, x_kv;              // raw inputs to the projections
    Tensor q, k, v;                // (Nq x C), (Nk x C), (Nk x C)
    std::vector<Tensor> attn;      // per head (Nq x Nk), row-stochastic
    Tensor concat;                 // (Nq x C) pre-output-projection
};

/// Multi-head scaled dot-product attention with an optional additive logit
/// bias per head (DMSA passes -beta_h * D^2 here; plain cross-attention passes
/// nothing). Returns (Nq x C_out).
inline Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv,
                                   const MultiHeadAttnParams& p,
                                   const std::vector<Tensor>* logit_bias = nullptr,
                                   AttnCache* cache = nullptr) {
    const int nq = x_q.dim(0), nk = x_kv.dim(0);
    const int h = p.heads, d = p.head_dim(), c = p.attn_dim();
    Tensor q = linear(x_q, p.q_proj);
    Tensor k = linear(x_kv, p.k_proj);
    Tensor v = linear(x_kv, p.v_proj);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Tensor concat({nq, c});
    std::vector<Tensor> attn;
    attn.reserve(static_cast<size_t>(h));
    for (int hd = 0; hd < h; ++hd) {
        const int off = hd * d;
        Tensor logits({nq, nk});
        for (int i = 0; i < nq; ++i) {
            for (int j = 0; j < nk; ++j) {
                double acc = 0.0;
                for (int kk = 0; kk < d; ++kk) acc += q.at(i, off + kk) * k.at(j, off + kk);
                double l = acc * scale;
                if (logit_bias) l += (*logit_bias)[static_cast<size_t>(hd)].at(i, j);
                logits.at(i, j) = l;
            }
        }
        Tensor a = softmax(logits, 1);
        for (int i = 0; i < nq; ++i) {
            for (int kk = 0; kk < d; ++kk) {
                double acc = 0.0;
                for (int j = 0; j < nk; ++j) acc += a.at(i, j) * v.at(j, off + kk);
                concat.at(i, off + kk) = acc;
            }
        }
        attn.push_back(std::move(a));
    }
    Tensor out = linear(concat, p.out_proj);
    if (cache) {
        cache->x_q = x_q;
        cache->x_kv = x_kv;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
        cache->concat = std::move(concat);
    }
    return out;
}

/// Backward of multi_head_attention. Returns (dx_q, dx_kv); if dlogit_bias is
/// non-null it receives per-head gradients of the additive logit bias.
inline std::pair<Tensor, Tensor> multi_head_attention_backward(
    MultiHeadAttnParams& p, const AttnCache& cache, const Tensor& dout,
    std::vector<Tensor>* dlogit_bias = nullptr) {
    const int nq = cache.q.dim(0), nk = cache.k.dim(0);
    const int h = p.heads, d = p.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Tensor dconcat = linear_backward(cache.concat, p.out_proj, dout);
    Tensor dq = Tensor::zeros(cache.q.shape());
    Tensor dk = Tensor::zeros(cache.k.shape());
    Tensor dv = Tensor::zeros(cache.v.shape());
    for (int hd = 0; hd < h; ++hd) {
        const int off = hd * d;
        const Tensor& a = cache.attn[static_cast<size_t>(hd)];
        // dA and dV
        Tensor da({nq, nk});
        for (int i = 0; i < nq; ++i) {
            for (int j = 0; j < nk; ++j) {
                double acc = 0.0;
                for (int kk = 0; kk < d; ++kk) acc += dconcat.at(i, off + kk) * cache.v.at(j, off + kk);
                da.at(i, j) = acc;
            }
        }
        for (int j = 0; j < nk; ++j) {
            for (int kk = 0; kk < d; ++kk) {
                double acc = 0.0;
                for (int i = 0; i < nq; ++i) acc += a.at(i, j) * dconcat.at(i, off + kk);
                dv.at(j, off + kk) += acc;
            }
        }
        Tensor dlogits = softmax_backward(a, da, 1);
        if (dlogit_bias) (*dlogit_bias)[static_cast<size_t>(hd)] = dlogits;
        for (int i = 0; i < nq; ++i) {
            for (int j = 0; j < nk; ++j) {
                const double g = dlogits.at(i, j) * scale;
                if (g == 0.0) continue;
                for (int kk = 0; kk < d; ++kk) {
                    dq.at(i, off + kk) += g * cache.k.at(j, off + kk);
                    dk.at(j, off + kk) += g * cache.q.at(i, off + kk);
                }
            }
        }
    }
    Tensor dx_q = linear_backward(cache.x_q, p.q_proj, dq);
    Tensor dx_kv = linear_backward(cache.x_kv, p.k_proj, dk);
    dx_kv += linear_backward(cache.x_kv, p.v_proj, dv);
    return {std::move(dx_q), std::move(dx_kv)};
}

// ---------------------------------------------------------------------------
// DMSA: distance-modulated self-attention
// ---------------------------------------------------------------------------

/// Per-head receptive-field parameters. beta_h = beta_free_h^2 keeps the
/// modulation nonnegative without clamping; beta_free starts at 1.
struct DMSAParams {
    MultiHeadAttnParams attn;
    Param beta_free;  // (H)

    DMSAParams() = default;
    DMSAParams(int heads, int c_t, Rng& rng)
        : attn(heads, c_t, c_t, c_t, c_t, rng), beta_free(Tensor::ones({heads})) {}

    double beta(int head) const {
        const double b = beta_free.value[head];
        return b * b;
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        attn.collect(out, prefix + ".attn");
        out.push_back({prefix + ".beta", &beta_free});
    }
};

struct DMSACache {
    AttnCache attn;
    Tensor dist;  // kept for the beta gradient
};

/// Softmax(Q_h K_h^T / sqrt(d) - beta_h * D^2) V_h per head, concatenated and
/// output-projected. With all beta = 0 this is vanilla multi-head
/// self-attention.
inline Tensor dmsa(const Tensor& f_t, const Tensor& dist, const DMSAParams& p,
                   DMSACache* cache = nullptr) {
    const int n = f_t.dim(0);
    if (dist.dim(0) != n || dist.dim(1) != n) throw std::invalid_argument("dmsa: D shape mismatch");
    std::vector<Tensor> bias;
    bias.reserve(static_cast<size_t>(p.attn.heads));
    for (int h = 0; h < p.attn.heads; ++h) {
        Tensor b({n, n});
        const double beta = p.beta(h);
        for (int64_t i = 0; i < b.size(); ++i) b[i] = -beta * dist[i] * dist[i];
        bias.push_back(std::move(b));
    }
    Tensor out = multi_head_attention(f_t, f_t, p.attn, &bias, cache ? &cache->attn : nullptr);
    if (cache) cache->dist = dist;
    return out;
}

/// Returns df_t (self-attention: query and key/value gradients summed).
inline Tensor dmsa_backward(DMSAParams& p, const DMSACache& cache, const Tensor& dout) {
    const int h = p.attn.heads;
    std::vector<Tensor> dbias(static_cast<size_t>(h));
    auto [dx_q, dx_kv] = multi_head_attention_backward(p.attn, cache.attn, dout, &dbias);
    for (int hd = 0; hd < h; ++hd) {
        double dbeta = 0.0;
        const Tensor& db = dbias[static_cast<size_t>(hd)];
        for (int64_t i = 0; i < db.size(); ++i) {
            dbeta += db[i] * (-cache.dist[i] * cache.dist[i]);
        }
        // beta = beta_free^2
        p.beta_free.grad[hd] += dbeta * 2.0 * p.beta_free.value[hd];
    }
    dx_q += dx_kv;
    return dx_q;
}

// ---------------------------------------------------------------------------
// injection / extraction exchange
// ---------------------------------------------------------------------------

struct InjectionParams {
    Param gamma;  // learnable scalar
    LayerNormParams ln_q;
    LayerNormParams ln_kv;
    MultiHeadAttnParams attn;

    InjectionParams() = default;
    InjectionParams(int heads, int c_p, int c_t, Rng& rng)
        : gamma(Tensor::scalar(0.1)), ln_q(c_p), ln_kv(c_t) {
        const int c_attn = ((c_p + heads - 1) / heads) * heads;
        attn = MultiHeadAttnParams(heads, c_p, c_t, c_attn, c_p, rng);
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        out.push_back({prefix + ".gamma", &gamma});
        ln_q.collect(out, prefix + ".lnq");
        ln_kv.collect(out, prefix + ".lnkv");
        attn.collect(out, prefix + ".attn");
    }
};

struct InjectionCache {
    LayerNormCache ln_q;
    LayerNormCache ln_kv;
    AttnCache attn;
    Tensor attn_out;
};

/// f_p' = f_p + gamma * CrossAttention(LN(f_p), LN(f_t))
inline Tensor injection(const Tensor& f_p, const Tensor& f_t, const InjectionParams& p,
                        InjectionCache* cache = nullptr) {
    if (f_p.dim(0) != f_t.dim(0)) throw std::invalid_argument("injection: row count mismatch");
    LayerNormCache lq, lkv;
    Tensor nq = layer_norm(f_p, p.ln_q, &lq);
    Tensor nkv = layer_norm(f_t, p.ln_kv, &lkv);
    Tensor a = multi_head_attention(nq, nkv, p.attn, nullptr, cache ? &cache->attn : nullptr);
    Tensor out = f_p;
    const double g = p.gamma.value[0];
    for (int64_t i = 0; i < out.size(); ++i) out[i] += g * a[i];
    if (cache) {
        cache->ln_q = std::move(lq);
        cache->ln_kv = std::move(lkv);
        cache->attn_out = std::move(a);
    }
    return out;
}

/// Returns (df_p, df_t).
inline std::pair<Tensor, Tensor> injection_backward(InjectionParams& p, const InjectionCache& cache,
                                                    const Tensor& dout) {
    const double g = p.gamma.value[0];
    double dgamma = 0.0;
    Tensor da(dout.shape());
    for (int64_t i = 0; i < dout.size(); ++i) {
        dgamma += dout[i] * cache.attn_out[i];
        da[i] = dout[i] * g;
    }
    p.gamma.grad[0] += dgamma;
    auto [dnq, dnkv] = multi_head_attention_backward(p.attn, cache.attn, da, nullptr);
    Tensor df_p = layer_norm_backward(dnq, p.ln_q, cache.ln_q);
    df_p += dout;  // residual
    Tensor df_t = layer_norm_backward(dnkv, p.ln_kv, cache.ln_kv);
    return {std::move(df_p), std::move(df_t)};
}

struct ExtractionParams {
    LayerNormParams ln_q;
    LayerNormParams ln_kv;
    MultiHeadAttnParams attn;
    Mlp ffn;  // two-layer feed-forward applied after the residual sum

    ExtractionParams() = default;
    ExtractionParams(int heads, int c_t, int c_p, int ffn_hidden, Rng& rng)
        : ln_q(c_t), ln_kv(c_p), attn(heads, c_t, c_p, c_t, c_t, rng),
          ffn(std::vector<int>{c_t, ffn_hidden, c_t}, rng) {}

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        ln_q.collect(out, prefix + ".lnq");
        ln_kv.collect(out, prefix + ".lnkv");
        attn.collect(out, prefix + ".attn");
        ffn.collect(out, prefix + ".ffn");
    }
};

struct ExtractionCache {
    LayerNormCache ln_q;
    LayerNormCache ln_kv;
    AttnCache attn;
    MlpCache ffn;
};

/// f_t' = FFN(f_t + CrossAttention(LN(f_t), LN(f_p)))
inline Tensor extraction(const Tensor& f_t, const Tensor& f_p, const ExtractionParams& p,
                         ExtractionCache* cache = nullptr) {
    if (f_p.dim(0) != f_t.dim(0)) throw std::invalid_argument("extraction: row count mismatch");
    LayerNormCache lq, lkv;
    Tensor nq = layer_norm(f_t, p.ln_q, &lq);
    Tensor nkv = layer_norm(f_p, p.ln_kv, &lkv);
    Tensor a = multi_head_attention(nq, nkv, p.attn, nullptr, cache ? &cache->attn : nullptr);
    a += f_t;
    MlpCache fc;
    Tensor out = mlp_forward(a, p.ffn, cache ? &cache->ffn : &fc);
    if (cache) {
        cache->ln_q = std::move(lq);
        cache->ln_kv = std::move(lkv);
    }
    return out;
}

/// Returns (df_t, df_p).
inline std::pair<Tensor, Tensor> extraction_backward(ExtractionParams& p, const ExtractionCache& cache,
                                                     const Tensor& dout) {
    Tensor dsum = mlp_backward(p.ffn, cache.ffn, dout);
    auto [dnq, dnkv] = multi_head_attention_backward(p.attn, cache.attn, dsum, nullptr);
    Tensor df_t = layer_norm_backward(dnq, p.ln_q, cache.ln_q);
    df_t += dsum;  // residual into the FFN input
    Tensor df_p = layer_norm_backward(dnkv, p.ln_kv, cache.ln_kv);
    return {std::move(df_t), std::move(df_p)};
}

// ---------------------------------------------------------------------------
// full dual-stream backbone
// ---------------------------------------------------------------------------

struct DualStreamConfig {
    int stages = 3;
    std::vector<int> point_widths = {32, 64, 128};  // output width per stage (2x MLP width)
    int tf_width = 128;
    int dmsa_heads = 4;
    int exchange_heads = 4;
    int ffn_hidden = 0;  // 0 -> 2 * tf_width
    bool include_z = true;
    int sweep_count = 6;
    // per-column scaling of the raw point features (empty = raw); keeps
    // meter-valued inputs from saturating the first layers
    std::vector<double> feature_scale;

    int feature_dim() const { return include_z ? 7 : 6; }
    int out_dim() const { return point_widths.back() + tf_width; }
};

struct BackboneStageParams {
    Mlp point_mlp;
    LayerNormParams tf_ln;
    DMSAParams dmsa;
    InjectionParams inject;
    ExtractionParams extract;

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        point_mlp.collect(out, prefix + ".pmlp");
        tf_ln.collect(out, prefix + ".tfln");
        dmsa.collect(out, prefix + ".dmsa");
        inject.collect(out, prefix + ".inj");
        extract.collect(out, prefix + ".ext");
    }
};

struct DualStreamParams {
    DualStreamConfig cfg;
    LinearParams tf_embed;
    std::vector<BackboneStageParams> stages;

    DualStreamParams() = default;
    DualStreamParams(const DualStreamConfig& c, Rng& rng) : cfg(c) {
        if (static_cast<int>(c.point_widths.size()) != c.stages) {
            throw std::invalid_argument("backbone: point_widths size != stages");
        }
        tf_embed = LinearParams(c.tf_width, c.feature_dim());
        tf_embed.init(rng);
        int c_p = c.feature_dim();
        const int ffn_hidden = c.ffn_hidden > 0 ? c.ffn_hidden : 2 * c.tf_width;
        for (int s = 0; s < c.stages; ++s) {
            const int w_out = c.point_widths[static_cast<size_t>(s)];
            if (w_out % 2 != 0) throw std::invalid_argument("backbone: point width must be even");
            const int m = w_out / 2;
            BackboneStageParams sp;
            sp.point_mlp = Mlp({c_p, m, m}, rng);
            sp.tf_ln = LayerNormParams(c.tf_width);
            sp.dmsa = DMSAParams(c.dmsa_heads, c.tf_width, rng);
            sp.inject = InjectionParams(c.exchange_heads, w_out, c.tf_width, rng);
            sp.extract = ExtractionParams(c.exchange_heads, c.tf_width, w_out, ffn_hidden, rng);
            stages.push_back(std::move(sp));
            c_p = w_out;
        }
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        tf_embed.collect(out, prefix + ".embed");
        for (size_t s = 0; s < stages.size(); ++s) {
            stages[s].collect(out, prefix + ".s" + std::to_string(s));
        }
    }
};

struct BackboneStageCache {
    PointBlockCache point;
    Tensor t_in;
    LayerNormCache tf_ln;
    DMSACache dmsa;
    InjectionCache inject;
    ExtractionCache extract;
};

struct DualStreamCache {
    Tensor features;  // raw N x F input
    std::vector<BackboneStageCache> stages;
    int n = 0;
};

/// Runs the two streams through S stages with the injection/extraction
/// exchange after each, and returns the per-point concat of both stream
/// outputs (N x (C_p + C_t)). An empty cloud yields an empty feature matrix.
inline Tensor dual_stream_forward(const RadarPointCloud& pc, DualStreamParams& params,
                                  DualStreamCache* cache = nullptr) {
    const auto& cfg = params.cfg;
    const int n = static_cast<int>(pc.size());
    if (cache) cache->n = n;
    if (n == 0) return Tensor::zeros({0, cfg.out_dim()});

    Tensor features = point_features(pc, cfg.sweep_count, cfg.include_z);
    if (!cfg.feature_scale.empty()) {
        if (cfg.feature_scale.size() != static_cast<size_t>(cfg.feature_dim())) {
            throw std::invalid_argument("backbone: feature_scale size mismatch");
        }
        for (int i = 0; i < n; ++i) {
            double* r = features.row(i);
            for (int j = 0; j < cfg.feature_dim(); ++j) r[j] *= cfg.feature_scale[static_cast<size_t>(j)];
        }
    }
    Tensor dist = pairwise_distances(point_coords(pc));
    if (cache) cache->features = features;

    Tensor f_p = features;
    Tensor f_t = linear(features, params.tf_embed);
    for (int s = 0; s < cfg.stages; ++s) {
        BackboneStageParams& sp = params.stages[static_cast<size_t>(s)];
        BackboneStageCache* sc = nullptr;
        if (cache) {
            cache->stages.emplace_back();
            sc = &cache->stages.back();
        }
        Tensor p1 = point_block(f_p, sp.point_mlp, sc ? &sc->point : nullptr);
        if (sc) sc->t_in = f_t;
        LayerNormCache lnc;
        Tensor tn = layer_norm(f_t, sp.tf_ln, sc ? &sc->tf_ln : &lnc);
        Tensor a = dmsa(tn, dist, sp.dmsa, sc ? &sc->dmsa : nullptr);
        Tensor t1 = f_t;
        t1 += a;
        Tensor p2 = injection(p1, t1, sp.inject, sc ? &sc->inject : nullptr);
        Tensor t2 = extraction(t1, p2, sp.extract, sc ? &sc->extract : nullptr);
        f_p = std::move(p2);
        f_t = std::move(t2);
    }

    Tensor out({n, cfg.out_dim()});
    const int cp = f_p.dim(1), ct = f_t.dim(1);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < cp; ++j) out.at(i, j) = f_p.at(i, j);
        for (int j = 0; j < ct; ++j) out.at(i, cp + j) = f_t.at(i, j);
    }
    return out;
}

/// Backward through the whole backbone; parameter gradients accumulate in
/// place. Input gradients are not propagated (the raw point features are
/// measurements, not trained values).
inline void dual_stream_backward(DualStreamParams& params, const DualStreamCache& cache,
                                 const Tensor& dout) {
    if (cache.n == 0) return;
    const auto& cfg = params.cfg;
    const int n = cache.n;
    const int cp = cfg.point_widths.back(), ct = cfg.tf_width;
    Tensor dp({n, cp});
    Tensor dt({n, ct});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < cp; ++j) dp.at(i, j) = dout.at(i, j);
        for (int j = 0; j < ct; ++j) dt.at(i, j) = dout.at(i, cp + j);
    }

    for (int s = cfg.stages - 1; s >= 0; --s) {
        BackboneStageParams& sp = params.stages[static_cast<size_t>(s)];
        const BackboneStageCache& sc = cache.stages[static_cast<size_t>(s)];
        // t2 = extraction(t1, p2)
        auto [dt1, dp2_extra] = extraction_backward(sp.extract, sc.extract, dt);
        Tensor dp2 = dp;
        dp2 += dp2_extra;
        // p2 = injection(p1, t1)
        auto [dp1, dt1_extra] = injection_backward(sp.inject, sc.inject, dp2);
        dt1 += dt1_extra;
        // t1 = t_in + dmsa(LN(t_in))
        Tensor da = dmsa_backward(sp.dmsa, sc.dmsa, dt1);
        Tensor dtn = layer_norm_backward(da, sp.tf_ln, sc.tf_ln);
        dt = dt1;
        dt += dtn;
        // p1 = point_block(p_in)
        dp = point_block_backward(sp.point_mlp, sc.point, dp1);
    }
    // embedding of the raw features into the transformer stream
    linear_backward(cache.features, params.tf_embed, dt);
}

}  // namespace rcbev
