#pragma once

#include <algorithm>
#include <optional>
#include <utility>

#include "rcbev/tensor.hpp"

namespace rcbev {

/// Instrumented multiply counter for the complexity measurements.
struct OpCounter {
    uint64_t mults = 0;
};

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// y = x W^T + b along the last dimension. x is (N,in) or (in).
inline Tensor linear(const Tensor& x, const LinearParams& p) {
    const int in = p.in_dim();
    const int out = p.out_dim();
    const bool vec = x.rank() == 1;
    const int n = vec ? 1 : x.dim(0);
    if ((vec ? x.dim(0) : x.dim(1)) != in) {
        throw std::invalid_argument("linear: input dim mismatch");
    }
    Tensor y = vec ? Tensor({out}) : Tensor({n, out});
    const double* W = p.weight.value.data();
    const double* b = p.bias.value.data();
    for (int i = 0; i < n; ++i) {
        const double* xi = x.data() + static_cast<int64_t>(i) * in;
        double* yi = y.data() + static_cast<int64_t>(i) * out;
        for (int o = 0; o < out; ++o) {
            const double* w = W + static_cast<int64_t>(o) * in;
            double acc = b[o];
            for (int k = 0; k < in; ++k) acc += w[k] * xi[k];
            yi[o] = acc;
        }
    }
    return y;
}

/// Returns dx; accumulates dW, db into p.
inline Tensor linear_backward(const Tensor& x, LinearParams& p, const Tensor& dy) {
    const int in = p.in_dim();
    const int out = p.out_dim();
    const bool vec = x.rank() == 1;
    const int n = vec ? 1 : x.dim(0);
    Tensor dx = vec ? Tensor({in}) : Tensor({n, in});
    double* dW = p.weight.grad.data();
    double* db = p.bias.grad.data();
    const double* W = p.weight.value.data();
    for (int i = 0; i < n; ++i) {
        const double* xi = x.data() + static_cast<int64_t>(i) * in;
        const double* dyi = dy.data() + static_cast<int64_t>(i) * out;
        double* dxi = dx.data() + static_cast<int64_t>(i) * in;
        for (int o = 0; o < out; ++o) {
            const double g = dyi[o];
            db[o] += g;
            const double* w = W + static_cast<int64_t>(o) * in;
            double* dwo = dW + static_cast<int64_t>(o) * in;
            for (int k = 0; k < in; ++k) {
                dwo[k] += g * xi[k];
                dxi[k] += g * w[k];
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// relu / sigmoid
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (int64_t i = 0; i < y.size(); ++i) y[i] = y[i] > 0.0 ? y[i] : 0.0;
    return y;
}

/// dx from dy with the pre-activation x defining the mask.
inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
    Tensor dx = dy;
    for (int64_t i = 0; i < dx.size(); ++i) {
        if (x[i] <= 0.0) dx[i] = 0.0;
    }
    return dx;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

/// log(sigmoid(x)), stable for large |x|.
inline double log_sigmoid(double x) { return -softplus(-x); }

// ---------------------------------------------------------------------------
// mlp: linear layers with ReLU between them, none after the last
// ---------------------------------------------------------------------------

struct Mlp {
    std::vector<LinearParams> layers;

    Mlp() = default;

    /// dims = [in, hidden..., out]
    Mlp(const std::vector<int>& dims, Rng& rng) {
        if (dims.size() < 2) throw std::invalid_argument("Mlp: need at least in/out dims");
        for (size_t i = 0; i + 1 < dims.size(); ++i) {
            LinearParams p(dims[i + 1], dims[i]);
            p.init(rng, std::sqrt(2.0));
            layers.push_back(std::move(p));
        }
    }

    int in_dim() const { return layers.front().in_dim(); }
    int out_dim() const { return layers.back().out_dim(); }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        for (size_t i = 0; i < layers.size(); ++i) {
            layers[i].collect(out, prefix + ".l" + std::to_string(i));
        }
    }
};

struct MlpCache {
    std::vector<Tensor> inputs;   // input to each layer (post-activation of previous)
    std::vector<Tensor> preacts;  // output of each linear before ReLU
};

inline Tensor mlp_forward(const Tensor& x, const Mlp& m, MlpCache* cache = nullptr) {
    if (m.layers.empty()) throw std::invalid_argument("mlp: empty layer list");
    Tensor h = x;
    for (size_t l = 0; l < m.layers.size(); ++l) {
        if (cache) cache->inputs.push_back(h);
        Tensor z = linear(h, m.layers[l]);
        if (cache) cache->preacts.push_back(z);
        h = (l + 1 < m.layers.size()) ? relu(z) : z;
    }
    return h;
}

inline Tensor mlp_backward(Mlp& m, const MlpCache& cache, const Tensor& dy) {
    Tensor g = dy;
    for (size_t li = m.layers.size(); li-- > 0;) {
        if (li + 1 < m.layers.size()) g = relu_backward(cache.preacts[li], g);
        g = linear_backward(cache.inputs[li], m.layers[li], g);
    }
    return g;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Numerically stable softmax along `axis` (negative axis counts from the back).
inline Tensor softmax(const Tensor& x, int axis) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("softmax: bad axis");
    int64_t inner = 1, outer = 1;
    const int64_t n = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);

    Tensor y = x;
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            double* base = y.data() + o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t k = 0; k < n; ++k) mx = std::max(mx, base[k * inner]);
            double sum = 0.0;
            for (int64_t k = 0; k < n; ++k) {
                double e = std::exp(base[k * inner] - mx);
                base[k * inner] = e;
                sum += e;
            }
            for (int64_t k = 0; k < n; ++k) base[k * inner] /= sum;
        }
    }
    return y;
}

/// dx given the softmax output y: dx = y * (dy - sum(dy*y)) along axis.
inline Tensor softmax_backward(const Tensor& y, const Tensor& dy, int axis) {
    const int r = y.rank();
    if (axis < 0) axis += r;
    int64_t inner = 1, outer = 1;
    const int64_t n = y.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= y.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= y.dim(i);

    Tensor dx = Tensor::zeros(y.shape());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const double* yb = y.data() + o * n * inner + in;
            const double* db = dy.data() + o * n * inner + in;
            double* xb = dx.data() + o * n * inner + in;
            double dot = 0.0;
            for (int64_t k = 0; k < n; ++k) dot += yb[k * inner] * db[k * inner];
            for (int64_t k = 0; k < n; ++k) {
                xb[k * inner] = yb[k * inner] * (db[k * inner] - dot);
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// layer norm (population variance, eps = 1e-5)
// ---------------------------------------------------------------------------

constexpr double kLayerNormEps = 1e-5;

struct LayerNormParams {
    Param scale;
    Param shift;

    LayerNormParams() = default;
    explicit LayerNormParams(int n) : scale(Tensor::ones({n})), shift(Tensor::zeros({n})) {}

    int dim() const { return scale.value.dim(0); }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        out.push_back({prefix + ".scale", &scale});
        out.push_back({prefix + ".shift", &shift});
    }
};

struct LayerNormCache {
    Tensor xhat;                  // normalized input before affine
    std::vector<double> inv_std;  // per row
};

/// Row-wise layer norm over the last dimension of a (N,C) or (C) tensor.
inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p, LayerNormCache* cache = nullptr) {
    const int c = p.dim();
    const bool vec = x.rank() == 1;
    const int n = vec ? 1 : x.dim(0);
    if ((vec ? x.dim(0) : x.dim(1)) != c) throw std::invalid_argument("layer_norm: dim mismatch");

    Tensor y = x;
    Tensor xhat(x.shape());
    std::vector<double> inv_std(static_cast<size_t>(n));
    const double* g = p.scale.value.data();
    const double* b = p.shift.value.data();
    for (int i = 0; i < n; ++i) {
        const double* xi = x.data() + static_cast<int64_t>(i) * c;
        double* yi = y.data() + static_cast<int64_t>(i) * c;
        double* hi = xhat.data() + static_cast<int64_t>(i) * c;
        double mean = 0.0;
        for (int k = 0; k < c; ++k) mean += xi[k];
        mean /= c;
        double var = 0.0;
        for (int k = 0; k < c; ++k) {
            double d = xi[k] - mean;
            var += d * d;
        }
        var /= c;
        double is = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int k = 0; k < c; ++k) {
            double h = (xi[k] - mean) * is;
            hi[k] = h;
            yi[k] = h * g[k] + b[k];
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

inline Tensor layer_norm_backward(const Tensor& dy, LayerNormParams& p, const LayerNormCache& cache) {
    const int c = p.dim();
    const bool vec = dy.rank() == 1;
    const int n = vec ? 1 : dy.dim(0);
    Tensor dx(dy.shape());
    const double* g = p.scale.value.data();
    double* dg = p.scale.grad.data();
    double* db = p.shift.grad.data();
    for (int i = 0; i < n; ++i) {
        const double* dyi = dy.data() + static_cast<int64_t>(i) * c;
        const double* hi = cache.xhat.data() + static_cast<int64_t>(i) * c;
        double* dxi = dx.data() + static_cast<int64_t>(i) * c;
        double m1 = 0.0, m2 = 0.0;
        for (int k = 0; k < c; ++k) {
            double dh = dyi[k] * g[k];
            m1 += dh;
            m2 += dh * hi[k];
            dg[k] += dyi[k] * hi[k];
            db[k] += dyi[k];
        }
        m1 /= c;
        m2 /= c;
        const double is = cache.inv_std[static_cast<size_t>(i)];
        for (int k = 0; k < c; ++k) {
            double dh = dyi[k] * g[k];
            dxi[k] = is * (dh - m1 - hi[k] * m2);
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// conv3x3 (stride 1, zero pad 1) on (C,H,W)
// ---------------------------------------------------------------------------

struct ConvParams {
    Param kernel;  // (Cout, Cin, 3, 3)
    Param bias;    // (Cout)

    ConvParams() = default;
    ConvParams(int c_out, int c_in)
        : kernel(Tensor::zeros({c_out, c_in, 3, 3})), bias(Tensor::zeros({c_out})) {}

    int c_in() const { return kernel.value.dim(1); }
    int c_out() const { return kernel.value.dim(0); }

    void init(Rng& rng) {
        double s = std::sqrt(2.0 / (9.0 * c_in()));
        for (int64_t i = 0; i < kernel.value.size(); ++i) kernel.value[i] = rng.normal() * s;
        bias.value.fill(0.0);
    }

    /// Kernel passing input channels straight through (center tap 1 on the diagonal).
    static ConvParams identity(int c) {
        ConvParams p(c, c);
        for (int i = 0; i < c; ++i) {
            p.kernel.value[((static_cast<int64_t>(i) * c + i) * 3 + 1) * 3 + 1] = 1.0;
        }
        return p;
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        out.push_back({prefix + ".k", &kernel});
        out.push_back({prefix + ".b", &bias});
    }
};

inline Tensor conv3x3(const Tensor& x, const ConvParams& p) {
    const int ci = p.c_in(), co = p.c_out();
    if (x.rank() != 3 || x.dim(0) != ci) throw std::invalid_argument("conv3x3: channel mismatch");
    const int h = x.dim(1), w = x.dim(2);
    Tensor y({co, h, w});
    for (int oc = 0; oc < co; ++oc) {
        double* yp = y.plane(oc);
        const double b = p.bias.value[oc];
        for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) yp[i] = b;
        for (int ic = 0; ic < ci; ++ic) {
            const double* xp = x.plane(ic);
            const double* k = p.kernel.value.data() + (static_cast<int64_t>(oc) * ci + ic) * 9;
            for (int yy = 0; yy < h; ++yy) {
                for (int xx = 0; xx < w; ++xx) {
                    double acc = 0.0;
                    for (int dy = -1; dy <= 1; ++dy) {
                        const int sy = yy + dy;
                        if (sy < 0 || sy >= h) continue;
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int sx = xx + dx;
                            if (sx < 0 || sx >= w) continue;
                            acc += k[(dy + 1) * 3 + (dx + 1)] * xp[static_cast<int64_t>(sy) * w + sx];
                        }
                    }
                    yp[static_cast<int64_t>(yy) * w + xx] += acc;
                }
            }
        }
    }
    return y;
}

inline Tensor conv3x3_backward(const Tensor& x, ConvParams& p, const Tensor& dy) {
    const int ci = p.c_in(), co = p.c_out();
    const int h = x.dim(1), w = x.dim(2);
    Tensor dx({ci, h, w});
    double* dk_all = p.kernel.grad.data();
    double* db = p.bias.grad.data();
    for (int oc = 0; oc < co; ++oc) {
        const double* dyp = dy.plane(oc);
        for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) db[oc] += dyp[i];
        for (int ic = 0; ic < ci; ++ic) {
            const double* xp = x.plane(ic);
            double* dxp = dx.plane(ic);
            const double* k = p.kernel.value.data() + (static_cast<int64_t>(oc) * ci + ic) * 9;
            double* dk = dk_all + (static_cast<int64_t>(oc) * ci + ic) * 9;
            for (int yy = 0; yy < h; ++yy) {
                for (int xx = 0; xx < w; ++xx) {
                    const double g = dyp[static_cast<int64_t>(yy) * w + xx];
                    if (g == 0.0) continue;
                    for (int dyk = -1; dyk <= 1; ++dyk) {
                        const int sy = yy + dyk;
                        if (sy < 0 || sy >= h) continue;
                        for (int dxk = -1; dxk <= 1; ++dxk) {
                            const int sx = xx + dxk;
                            if (sx < 0 || sx >= w) continue;
                            const int ki = (dyk + 1) * 3 + (dxk + 1);
                            dk[ki] += g * xp[static_cast<int64_t>(sy) * w + sx];
                            dxp[static_cast<int64_t>(sy) * w + sx] += g * k[ki];
                        }
                    }
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// bilinear sampling on (C,H,W), zero outside the grid
// ---------------------------------------------------------------------------

/// Samples all channels of F at continuous pixel (px,py); px indexes columns,
/// py rows, pixel centers at integer coordinates. Out-of-grid taps are zero.
inline void bilinear_sample(const Tensor& F, double px, double py, double* out,
                            OpCounter* counter = nullptr) {
    const int c = F.dim(0), h = F.dim(1), w = F.dim(2);
    const double fx0 = std::floor(px), fy0 = std::floor(py);
    const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
    const double ax = px - fx0, ay = py - fy0;
    const double w00 = (1.0 - ax) * (1.0 - ay), w01 = ax * (1.0 - ay);
    const double w10 = (1.0 - ax) * ay, w11 = ax * ay;
    const bool in00 = x0 >= 0 && x0 < w && y0 >= 0 && y0 < h;
    const bool in01 = x0 + 1 >= 0 && x0 + 1 < w && y0 >= 0 && y0 < h;
    const bool in10 = x0 >= 0 && x0 < w && y0 + 1 >= 0 && y0 + 1 < h;
    const bool in11 = x0 + 1 >= 0 && x0 + 1 < w && y0 + 1 >= 0 && y0 + 1 < h;
    for (int ch = 0; ch < c; ++ch) {
        const double* pl = F.plane(ch);
        double v = 0.0;
        if (in00) v += w00 * pl[static_cast<int64_t>(y0) * w + x0];
        if (in01) v += w01 * pl[static_cast<int64_t>(y0) * w + x0 + 1];
        if (in10) v += w10 * pl[static_cast<int64_t>(y0 + 1) * w + x0];
        if (in11) v += w11 * pl[static_cast<int64_t>(y0 + 1) * w + x0 + 1];
        out[ch] = v;
    }
    if (counter) counter->mults += static_cast<uint64_t>(4 * c);
}

inline Tensor bilinear_sample_vec(const Tensor& F, double px, double py) {
    Tensor out({F.dim(0)});
    bilinear_sample(F, px, py, out.data());
    return out;
}

/// Accumulates dF; returns (d/dpx, d/dpy) of sum(dout * sample).
inline std::pair<double, double> bilinear_sample_backward(const Tensor& F, double px, double py,
                                                          const double* dout, Tensor* dF) {
    const int c = F.dim(0), h = F.dim(1), w = F.dim(2);
    const double fx0 = std::floor(px), fy0 = std::floor(py);
    const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
    const double ax = px - fx0, ay = py - fy0;
    const double w00 = (1.0 - ax) * (1.0 - ay), w01 = ax * (1.0 - ay);
    const double w10 = (1.0 - ax) * ay, w11 = ax * ay;
    const bool in00 = x0 >= 0 && x0 < w && y0 >= 0 && y0 < h;
    const bool in01 = x0 + 1 >= 0 && x0 + 1 < w && y0 >= 0 && y0 < h;
    const bool in10 = x0 >= 0 && x0 < w && y0 + 1 >= 0 && y0 + 1 < h;
    const bool in11 = x0 + 1 >= 0 && x0 + 1 < w && y0 + 1 >= 0 && y0 + 1 < h;
    double dpx = 0.0, dpy = 0.0;
    for (int ch = 0; ch < c; ++ch) {
        const double* pl = F.plane(ch);
        const double g = dout[ch];
        const double v00 = in00 ? pl[static_cast<int64_t>(y0) * w + x0] : 0.0;
        const double v01 = in01 ? pl[static_cast<int64_t>(y0) * w + x0 + 1] : 0.0;
        const double v10 = in10 ? pl[static_cast<int64_t>(y0 + 1) * w + x0] : 0.0;
        const double v11 = in11 ? pl[static_cast<int64_t>(y0 + 1) * w + x0 + 1] : 0.0;
        dpx += g * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10));
        dpy += g * ((1.0 - ax) * (v10 - v00) + ax * (v11 - v01));
        if (dF) {
            double* dpl = dF->plane(ch);
            if (in00) dpl[static_cast<int64_t>(y0) * w + x0] += g * w00;
            if (in01) dpl[static_cast<int64_t>(y0) * w + x0 + 1] += g * w01;
            if (in10) dpl[static_cast<int64_t>(y0 + 1) * w + x0] += g * w10;
            if (in11) dpl[static_cast<int64_t>(y0 + 1) * w + x0 + 1] += g * w11;
        }
    }
    return {dpx, dpy};
}

// ---------------------------------------------------------------------------
// CBR block: conv3x3 -> per-channel affine norm -> ReLU
// ---------------------------------------------------------------------------

struct CbrParams {
    ConvParams conv;
    Param norm_scale;  // per channel
    Param norm_shift;

    CbrParams() = default;
    CbrParams(int c_out, int c_in)
        : conv(c_out, c_in), norm_scale(Tensor::ones({c_out})), norm_shift(Tensor::zeros({c_out})) {}

    void init(Rng& rng) { conv.init(rng); }

    static CbrParams pass_through(int c) {
        CbrParams p(c, c);
        p.conv = ConvParams::identity(c);
        return p;
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        conv.collect(out, prefix + ".conv");
        out.push_back({prefix + ".ns", &norm_scale});
        out.push_back({prefix + ".nt", &norm_shift});
    }
};

struct CbrCache {
    Tensor x;
    Tensor post_conv;
    Tensor pre_relu;
};

inline Tensor cbr_forward(const Tensor& x, const CbrParams& p, CbrCache* cache = nullptr) {
    Tensor z = conv3x3(x, p.conv);
    Tensor a(z.shape());
    const int c = z.dim(0);
    const int64_t hw = static_cast<int64_t>(z.dim(1)) * z.dim(2);
    for (int ch = 0; ch < c; ++ch) {
        const double s = p.norm_scale.value[ch], t = p.norm_shift.value[ch];
        const double* zp = z.plane(ch);
        double* ap = a.plane(ch);
        for (int64_t i = 0; i < hw; ++i) ap[i] = zp[i] * s + t;
    }
    Tensor y = relu(a);
    if (cache) {
        cache->x = x;
        cache->post_conv = std::move(z);
        cache->pre_relu = std::move(a);
    }
    return y;
}

inline Tensor cbr_backward(CbrParams& p, const CbrCache& cache, const Tensor& dy) {
    Tensor da = relu_backward(cache.pre_relu, dy);
    const int c = da.dim(0);
    const int64_t hw = static_cast<int64_t>(da.dim(1)) * da.dim(2);
    Tensor dz(da.shape());
    for (int ch = 0; ch < c; ++ch) {
        const double s = p.norm_scale.value[ch];
        const double* zp = cache.post_conv.plane(ch);
        const double* dap = da.plane(ch);
        double* dzp = dz.plane(ch);
        double ds = 0.0, dt = 0.0;
        for (int64_t i = 0; i < hw; ++i) {
            ds += dap[i] * zp[i];
            dt += dap[i];
            dzp[i] = dap[i] * s;
        }
        p.norm_scale.grad[ch] += ds;
        p.norm_shift.grad[ch] += dt;
    }
    return conv3x3_backward(cache.x, p.conv, dz);
}

/// Concatenate two (C,H,W) tensors along channels.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
        throw std::invalid_argument("concat_channels: spatial mismatch");
    }
    Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}

inline std::pair<Tensor, Tensor> split_channels(const Tensor& x, int c_first) {
    Tensor a({c_first, x.dim(1), x.dim(2)});
    Tensor b({x.dim(0) - c_first, x.dim(1), x.dim(2)});
    std::copy(x.data(), x.data() + a.size(), a.data());
    std::copy(x.data() + a.size(), x.data() + x.size(), b.data());
    return {std::move(a), std::move(b)};
}

}  // namespace rcbev
