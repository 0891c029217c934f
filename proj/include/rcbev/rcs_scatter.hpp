#pragma once

#include "rcbev/bev_grid.hpp"
#include "rcbev/ops.hpp"
#include "rcbev/radar_cloud.hpp"

namespace rcbev {

/// Scatter radius control. The RCS rule (cx^2+cy^2)*V_rcs mixes meters^2 with
/// a unitless RCS value, so a normalizer converts it into pixels; the radius
/// is capped because it grows quadratically with range. The default k_norm
/// gives a point 50 m out with V_rcs = 1 a radius of about 3 px on the default
/// 128x128 / 0.8 m-per-px grid.
struct ScatterParams {
    double k_norm = 3.0 / 2500.0;
    double r_max_px = 8.0;
};

/// The set of BEV pixels receiving one point's feature.
struct ScatterFootprint {
    int point_index = -1;
    // (py, px, gaussian weight-map value at the pixel center)
    struct Cell {
        int py;
        int px;
        double weight;
    };
    std::vector<Cell> cells;
};

namespace detail {

/// Denominator of the Gaussian-like weight map: (1/3)(cx^2+cy^2)*V_rcs in
/// meters^2. Non-positive values mean the map degenerates to a delta.
inline double gaussian_denom(const RadarPoint& pt) {
    return (pt.x * pt.x + pt.y * pt.y) * pt.rcs / 3.0;
}

inline double gaussian_value(const RadarPoint& pt, double wx, double wy, double denom) {
    const double dx = pt.x - wx, dy = pt.y - wy;
    return std::exp(-(dx * dx + dy * dy) / denom);
}

}  // namespace detail

/// Pixels whose pixel-space Euclidean distance to the point's continuous pixel
/// location is below the RCS-scaled radius; the point's own pixel is always
/// included when it lies inside the grid. Each cell carries the Gaussian-like
/// weight-map value evaluated at its center (1 for the delta case).
inline ScatterFootprint rcs_footprint(const RadarPoint& pt, const BEVGrid& grid,
                                      const ScatterParams& sp, int point_index = -1) {
    ScatterFootprint fp;
    fp.point_index = point_index;
    auto [px, py] = grid.world_to_pixel(pt.x, pt.y);
    const int ox = static_cast<int>(std::llround(px));
    const int oy = static_cast<int>(std::llround(py));

    const double range2 = pt.x * pt.x + pt.y * pt.y;
    const double r = std::clamp(range2 * std::max(pt.rcs, 0.0) * sp.k_norm, 0.0, sp.r_max_px);
    const double denom = detail::gaussian_denom(pt);
    const bool delta = !(denom > 0.0);

    const int x_lo = std::max(0, static_cast<int>(std::ceil(px - r)));
    const int x_hi = std::min(grid.width - 1, static_cast<int>(std::floor(px + r)));
    const int y_lo = std::max(0, static_cast<int>(std::ceil(py - r)));
    const int y_hi = std::min(grid.height - 1, static_cast<int>(std::floor(py + r)));
    for (int iy = y_lo; iy <= y_hi; ++iy) {
        for (int ix = x_lo; ix <= x_hi; ++ix) {
            const double dx = ix - px, dy = iy - py;
            const bool own = ix == ox && iy == oy;
            if (own || dx * dx + dy * dy < r * r) {
                double wv = 1.0;
                if (!delta) {
                    auto [wx, wy] = grid.pixel_to_world(ix, iy);
                    wv = detail::gaussian_value(pt, wx, wy, denom);
                } else {
                    wv = own ? 1.0 : 0.0;
                }
                fp.cells.push_back({iy, ix, wv});
            }
        }
    }
    if (fp.cells.empty() && grid.in_bounds(ox, oy)) {
        // radius window rounded away from the own pixel; keep it
        double wv = 1.0;
        if (!delta) {
            auto [wx, wy] = grid.pixel_to_world(ox, oy);
            wv = detail::gaussian_value(pt, wx, wy, denom);
        }
        fp.cells.push_back({oy, ox, wv});
    }
    return fp;
}

/// Full H x W Gaussian-like weight map for one point: the footprint cells get
/// exp(-dist^2 / ((1/3)(cx^2+cy^2)V_rcs)) evaluated in world meters, zero
/// elsewhere. Degenerate denominators give a delta map at the own pixel.
inline Tensor gaussian_bev_map(const RadarPoint& pt, const BEVGrid& grid, const ScatterParams& sp) {
    Tensor map = Tensor::zeros({grid.height, grid.width});
    for (const auto& c : rcs_footprint(pt, grid, sp).cells) {
        map[static_cast<int64_t>(c.py) * grid.width + c.px] = c.weight;
    }
    return map;
}

/// Summation pooling: every footprint pixel accumulates the point's full
/// feature vector. Points are processed in index order, cells in scan order,
/// so the reduction order is fixed.
inline Tensor scatter_sum(const Tensor& features, const std::vector<ScatterFootprint>& footprints,
                          int height, int width) {
    const int n = features.dim(0), c = features.dim(1);
    if (static_cast<size_t>(n) != footprints.size()) {
        throw std::invalid_argument("scatter_sum: feature rows != footprint count");
    }
    Tensor grid = Tensor::zeros({c, height, width});
    for (int i = 0; i < n; ++i) {
        const double* f = features.row(i);
        for (const auto& cell : footprints[static_cast<size_t>(i)].cells) {
            for (int ch = 0; ch < c; ++ch) {
                grid.plane(ch)[static_cast<int64_t>(cell.py) * width + cell.px] += f[ch];
            }
        }
    }
    return grid;
}

/// Adjoint of scatter_sum: each point's gradient is the sum of the grid
/// gradient over its footprint.
inline Tensor scatter_sum_backward(const Tensor& dgrid, const std::vector<ScatterFootprint>& footprints,
                                   int n, int c) {
    const int width = dgrid.dim(2);
    Tensor df = Tensor::zeros({n, c});
    for (int i = 0; i < n; ++i) {
        double* g = df.row(i);
        for (const auto& cell : footprints[static_cast<size_t>(i)].cells) {
            for (int ch = 0; ch < c; ++ch) {
                g[ch] += dgrid.plane(ch)[static_cast<int64_t>(cell.py) * width + cell.px];
            }
        }
    }
    return df;
}

/// Elementwise maximum over per-point weight maps; empty input gives zeros.
inline Tensor merge_gaussian_maps(const std::vector<Tensor>& maps, int height, int width) {
    Tensor out = Tensor::zeros({height, width});
    for (const Tensor& m : maps) {
        if (!m.same_shape(out)) throw std::invalid_argument("merge_gaussian_maps: shape mismatch");
        for (int64_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], m[i]);
    }
    return out;
}

// --- Eq-style fusion of the scattered feature with the merged weight map ----

struct FuseRcsCache {
    Tensor pixels_in;  // (H*W, C+1)
    MlpCache mlp;
};

/// Per pixel: MLP(Concat(feature channels, weight-map scalar)).
inline Tensor fuse_rcs(const Tensor& f_rcs, const Tensor& g_rcs, const Mlp& mlp,
                       FuseRcsCache* cache = nullptr) {
    const int c = f_rcs.dim(0), h = f_rcs.dim(1), w = f_rcs.dim(2);
    if (g_rcs.dim(0) != h || g_rcs.dim(1) != w) {
        throw std::invalid_argument("fuse_rcs: weight map shape mismatch");
    }
    if (mlp.in_dim() != c + 1) throw std::invalid_argument("fuse_rcs: mlp in_dim != C+1");
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor x({static_cast<int>(hw), c + 1});
    for (int64_t p = 0; p < hw; ++p) {
        double* r = x.row(static_cast<int>(p));
        for (int ch = 0; ch < c; ++ch) r[ch] = f_rcs.plane(ch)[p];
        r[c] = g_rcs[p];
    }
    MlpCache local;
    Tensor y = mlp_forward(x, mlp, cache ? &cache->mlp : &local);
    if (cache) cache->pixels_in = x;
    const int co = mlp.out_dim();
    Tensor out({co, h, w});
    for (int64_t p = 0; p < hw; ++p) {
        const double* r = y.row(static_cast<int>(p));
        for (int ch = 0; ch < co; ++ch) out.plane(ch)[p] = r[ch];
    }
    return out;
}

/// Returns the gradient with respect to f_rcs (the weight-map input is
/// data-derived, not trained through).
inline Tensor fuse_rcs_backward(Mlp& mlp, const FuseRcsCache& cache, const Tensor& dout) {
    const int co = dout.dim(0), h = dout.dim(1), w = dout.dim(2);
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor dy({static_cast<int>(hw), co});
    for (int64_t p = 0; p < hw; ++p) {
        for (int ch = 0; ch < co; ++ch) dy.row(static_cast<int>(p))[ch] = dout.plane(ch)[p];
    }
    Tensor dx = mlp_backward(mlp, cache.mlp, dy);
    const int c = dx.dim(1) - 1;
    Tensor df({c, h, w});
    for (int64_t p = 0; p < hw; ++p) {
        const double* r = dx.row(static_cast<int>(p));
        for (int ch = 0; ch < c; ++ch) df.plane(ch)[p] = r[ch];
    }
    return df;
}

// --- BEV encoder: concat with the base raster, then a stride-1 CBR stack ----

struct BevEncoderParams {
    std::vector<CbrParams> blocks;

    BevEncoderParams() = default;
    BevEncoderParams(int c_in, const std::vector<int>& widths, Rng& rng) {
        int c = c_in;
        for (int wdt : widths) {
            CbrParams b(wdt, c);
            b.init(rng);
            blocks.push_back(std::move(b));
            c = wdt;
        }
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        for (size_t i = 0; i < blocks.size(); ++i) {
            blocks[i].collect(out, prefix + ".cbr" + std::to_string(i));
        }
    }
};

struct BevEncodeCache {
    std::vector<CbrCache> blocks;
    int c_first = 0;
};

inline Tensor bev_encode(const Tensor& f_rcs_fused, const Tensor& base_bev, BevEncoderParams& params,
                         BevEncodeCache* cache = nullptr) {
    if (f_rcs_fused.dim(1) != base_bev.dim(1) || f_rcs_fused.dim(2) != base_bev.dim(2)) {
        throw std::invalid_argument("bev_encode: spatial mismatch");
    }
    Tensor h = concat_channels(f_rcs_fused, base_bev);
    if (cache) cache->c_first = f_rcs_fused.dim(0);
    for (size_t i = 0; i < params.blocks.size(); ++i) {
        if (cache) {
            cache->blocks.emplace_back();
            h = cbr_forward(h, params.blocks[i], &cache->blocks.back());
        } else {
            h = cbr_forward(h, params.blocks[i], nullptr);
        }
    }
    return h;
}

/// Gradients of (f_rcs_fused, base_bev).
inline std::pair<Tensor, Tensor> bev_encode_backward(BevEncoderParams& params,
                                                     const BevEncodeCache& cache, const Tensor& dout) {
    Tensor g = dout;
    for (size_t i = params.blocks.size(); i-- > 0;) {
        g = cbr_backward(params.blocks[i], cache.blocks[i], g);
    }
    return split_channels(g, cache.c_first);
}

}  // namespace rcbev
