#pragma once

#include "rcbev/bev_fusion.hpp"
#include "rcbev/bev_grid.hpp"
#include "rcbev/radar_backbone.hpp"

#include "json.hpp"

namespace rcbev {

/// Camera object queries: per-query feature plus a 3D absolute position.
struct SparseQuerySet {
    Tensor features;   // (M, C_q)
    Tensor positions;  // (M, 3) world meters

    int count() const { return features.dim(0); }
};

// --- JSON-lines interchange: {"pos":[x,y,z],"feat":[...]} per query ---------

inline void write_queries_jsonl(const SparseQuerySet& qs, std::ostream& os) {
    for (int i = 0; i < qs.count(); ++i) {
        nlohmann::json row;
        row["pos"] = {qs.positions.at(i, 0), qs.positions.at(i, 1), qs.positions.at(i, 2)};
        std::vector<double> feat(qs.features.row(i), qs.features.row(i) + qs.features.dim(1));
        row["feat"] = feat;
        os << row.dump() << "\n";
    }
}

inline SparseQuerySet read_queries_jsonl(std::istream& is) {
    std::vector<std::array<double, 3>> pos;
    std::vector<std::vector<double>> feat;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto row = nlohmann::json::parse(line);
        pos.push_back({row["pos"][0], row["pos"][1], row["pos"][2]});
        feat.push_back(row["feat"].get<std::vector<double>>());
    }
    const int m = static_cast<int>(pos.size());
    const int c = m > 0 ? static_cast<int>(feat[0].size()) : 0;
    SparseQuerySet qs{Tensor({m, c}), Tensor({m, 3})};
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < 3; ++j) qs.positions.at(i, j) = pos[static_cast<size_t>(i)][static_cast<size_t>(j)];
        for (int j = 0; j < c; ++j) qs.features.at(i, j) = feat[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
    return qs;
}

// ---------------------------------------------------------------------------
// project-and-sample
// ---------------------------------------------------------------------------

/// Projects each query's (x,y) into the radar BEV and samples one feature
/// vector with bilinear interpolation; out-of-grid queries get zeros.
inline Tensor project_and_sample(const SparseQuerySet& queries, const BEVGrid& radar_bev) {
    const int m = queries.count();
    const int c = radar_bev.channels();
    Tensor out({m, c});
    for (int i = 0; i < m; ++i) {
        auto [px, py] = radar_bev.world_to_pixel(queries.positions.at(i, 0), queries.positions.at(i, 1));
        bilinear_sample(radar_bev.data, px, py, out.row(i));
    }
    return out;
}

/// Continuous BEV pixel coordinates of each query (used as deformable
/// reference points).
inline Tensor query_bev_refs(const SparseQuerySet& queries, const BEVGrid& radar_bev) {
    Tensor refs({queries.count(), 2});
    for (int i = 0; i < queries.count(); ++i) {
        auto [px, py] = radar_bev.world_to_pixel(queries.positions.at(i, 0), queries.positions.at(i, 1));
        refs.at(i, 0) = px;
        refs.at(i, 1) = py;
    }
    return refs;
}

// ---------------------------------------------------------------------------
// sinusoidal positional embedding
// ---------------------------------------------------------------------------

/// Sine/cosine features of (x,y,z) over `octaves` doubling frequencies,
/// mapped through an MLP. The base wavelength spans the scene so low octaves
/// separate far-apart positions and high octaves resolve sub-meter shifts.
struct PosEmbedParams {
    int octaves = 10;
    double base_wavelength = 256.0;  // meters
    Mlp mlp;

    PosEmbedParams() = default;
    PosEmbedParams(int out_dim, Rng& rng, int octaves_ = 10, double base_wavelength_ = 256.0)
        : octaves(octaves_), base_wavelength(base_wavelength_),
          mlp({6 * octaves_, 2 * out_dim, out_dim}, rng) {}

    int sin_dim() const { return 6 * octaves; }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        mlp.collect(out, prefix + ".mlp");
    }
};

/// The raw sinusoid features, before the MLP: per axis and octave,
/// [sin(w_o u), cos(w_o u)], so the origin encodes as alternating 0/1.
inline Tensor sin_encode(const Tensor& positions, const PosEmbedParams& p) {
    const int m = positions.dim(0);
    Tensor out({m, p.sin_dim()});
    for (int i = 0; i < m; ++i) {
        int k = 0;
        for (int axis = 0; axis < 3; ++axis) {
            const double u = positions.at(i, axis);
            for (int o = 0; o < p.octaves; ++o) {
                const double w = 2.0 * M_PI / p.base_wavelength * std::pow(2.0, o);
                out.at(i, k++) = std::sin(w * u);
                out.at(i, k++) = std::cos(w * u);
            }
        }
    }
    return out;
}

struct PosEmbedCache {
    Tensor sin_feats;
    MlpCache mlp;
};

inline Tensor positional_embed(const Tensor& positions, const PosEmbedParams& p,
                               PosEmbedCache* cache = nullptr) {
    Tensor s = sin_encode(positions, p);
    MlpCache local;
    Tensor out = mlp_forward(s, p.mlp, cache ? &cache->mlp : &local);
    if (cache) cache->sin_feats = std::move(s);
    return out;
}

/// Positions are fixed data; only the MLP parameters receive gradients.
inline void positional_embed_backward(PosEmbedParams& p, const PosEmbedCache& cache,
                                      const Tensor& dout) {
    mlp_backward(p.mlp, cache.mlp, dout);
}

// ---------------------------------------------------------------------------
// sparse alignment + linear fusion
// ---------------------------------------------------------------------------

struct SparseAlignParams {
    DeformAttnParams deform;       // camera queries sample the dense radar BEV
    MultiHeadAttnParams radar_ca;  // radar sparse rows attend over camera rows

    SparseAlignParams() = default;
    SparseAlignParams(int c_q, int c_r, int c_radar_grid, int heads, int points, Rng& rng)
        : deform(heads, points, c_q, c_radar_grid, c_q, rng),
          radar_ca(heads, c_r, c_q, ((c_r + heads - 1) / heads) * heads, c_r, rng) {}

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        deform.collect(out, prefix + ".deform");
        radar_ca.collect(out, prefix + ".ca");
    }
};

struct SparseAlignCache {
    DeformAttnCache deform;
    AttnCache radar_ca;
};

/// queries' = queries + DeformAttn(queries, projected refs, dense radar BEV);
/// radar'   = radar + CrossAttn(radar as queries, camera queries as keys).
/// Both updates are residual, so zeroed projections leave the inputs intact.
inline std::pair<Tensor, Tensor> sparse_align(const Tensor& query_feats, const Tensor& sparse_radar,
                                              const Tensor& radar_grid, const Tensor& refs,
                                              SparseAlignParams& p, SparseAlignCache* cache = nullptr) {
    if (query_feats.dim(0) != sparse_radar.dim(0)) {
        throw std::invalid_argument("sparse_align: query/radar row mismatch");
    }
    Tensor dq = deform_cross_attn(query_feats, refs, radar_grid, p.deform,
                                  cache ? &cache->deform : nullptr);
    Tensor q_out = query_feats;
    q_out += dq;
    Tensor cr = multi_head_attention(sparse_radar, query_feats, p.radar_ca, nullptr,
                                     cache ? &cache->radar_ca : nullptr);
    Tensor r_out = sparse_radar;
    r_out += cr;
    return {std::move(q_out), std::move(r_out)};
}

/// Returns (d_query_feats, d_sparse_radar, d_radar_grid).
inline std::tuple<Tensor, Tensor, Tensor> sparse_align_backward(SparseAlignParams& p,
                                                                const SparseAlignCache& cache,
                                                                const Tensor& dq_out,
                                                                const Tensor& dr_out) {
    auto [dq_from_deform, dgrid] = deform_cross_attn_backward(p.deform, cache.deform, dq_out);
    auto [dr_from_ca, dq_from_ca] = multi_head_attention_backward(p.radar_ca, cache.radar_ca, dr_out);
    Tensor dq = dq_out;  // residual
    dq += dq_from_deform;
    dq += dq_from_ca;
    Tensor dr = dr_out;  // residual
    dr += dr_from_ca;
    return {std::move(dq), std::move(dr), std::move(dgrid)};
}

struct LinearFuseCache {
    Tensor concat;  // (M, C_q + C_r)
};

/// Per-row concat followed by one linear layer, no nonlinearity.
inline Tensor linear_fuse(const Tensor& queries, const Tensor& sparse_radar, const LinearParams& p,
                          LinearFuseCache* cache = nullptr) {
    if (queries.dim(0) != sparse_radar.dim(0)) {
        throw std::invalid_argument("linear_fuse: row count mismatch");
    }
    const int m = queries.dim(0), cq = queries.dim(1), cr = sparse_radar.dim(1);
    if (p.in_dim() != cq + cr) throw std::invalid_argument("linear_fuse: weight in_dim mismatch");
    Tensor x({m, cq + cr});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < cq; ++j) x.at(i, j) = queries.at(i, j);
        for (int j = 0; j < cr; ++j) x.at(i, cq + j) = sparse_radar.at(i, j);
    }
    Tensor out = linear(x, p);
    if (cache) cache->concat = std::move(x);
    return out;
}

/// Returns (d_queries, d_sparse_radar).
inline std::pair<Tensor, Tensor> linear_fuse_backward(LinearParams& p, const LinearFuseCache& cache,
                                                      const Tensor& dout, int c_q) {
    Tensor dx = linear_backward(cache.concat, p, dout);
    const int m = dx.dim(0), total = dx.dim(1);
    Tensor dq({m, c_q});
    Tensor dr({m, total - c_q});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < c_q; ++j) dq.at(i, j) = dx.at(i, j);
        for (int j = 0; j < total - c_q; ++j) dr.at(i, j) = dx.at(i, c_q + j);
    }
    return {std::move(dq), std::move(dr)};
}

}  // namespace rcbev
