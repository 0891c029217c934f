#pragma once

#include "rcbev/bev_grid.hpp"
#include "rcbev/ops.hpp"

#include "json.hpp"

namespace rcbev {

/// One decoded 3D detection in BEV (the toy heads regress planar boxes).
struct Detection {
    double x = 0.0, y = 0.0;    // center, meters
    double w = 1.0, l = 1.0;    // size, meters
    double yaw = 0.0;           // radians
    double vx = 0.0, vy = 0.0;  // m/s
    int class_id = 0;
    double score = 0.0;  // in [0,1]
    int attr_id = 0;
};

inline nlohmann::json detection_to_json(const Detection& d) {
    return {{"x", d.x},   {"y", d.y},   {"w", d.w},         {"l", d.l},
            {"yaw", d.yaw}, {"vx", d.vx}, {"vy", d.vy},       {"class_id", d.class_id},
            {"score", d.score}, {"attr_id", d.attr_id}};
}

inline Detection detection_from_json(const nlohmann::json& j) {
    Detection d;
    d.x = j["x"];
    d.y = j["y"];
    d.w = j["w"];
    d.l = j["l"];
    d.yaw = j["yaw"];
    d.vx = j["vx"];
    d.vy = j["vy"];
    d.class_id = j["class_id"];
    d.score = j["score"];
    d.attr_id = j.value("attr_id", 0);
    return d;
}

inline void write_detections_jsonl(const std::vector<Detection>& dets, std::ostream& os) {
    for (const auto& d : dets) os << detection_to_json(d).dump() << "\n";
}

inline std::vector<Detection> read_detections_jsonl(std::istream& is) {
    std::vector<Detection> out;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty()) out.push_back(detection_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// dense center head
// ---------------------------------------------------------------------------

/// Map channel layout produced by the dense head, after `n_classes` per-class
/// objectness logits: offset (px), log-size, yaw as (sin, cos), velocity.
struct HeadChannels {
    int n_classes = 3;
    int offset() const { return n_classes; }
    int size() const { return n_classes + 2; }
    int yaw() const { return n_classes + 4; }
    int vel() const { return n_classes + 6; }
    int total() const { return n_classes + 8; }
};

struct CenterHeadParams {
    HeadChannels ch;
    CbrParams trunk;      // C_f -> C_h, feeds objectness/offset/size/yaw
    ConvParams out;       // C_h -> ch.total() - 2
    CbrParams vel_trunk;  // C_f -> C_h, a separate branch for velocity
    ConvParams vel_out;   // C_h -> 2

    CenterHeadParams() = default;
    CenterHeadParams(int c_in, int c_hidden, int n_classes, Rng& rng)
        : trunk(c_hidden, c_in), out(HeadChannels{n_classes}.total() - 2, c_hidden),
          vel_trunk(c_hidden, c_in), vel_out(2, c_hidden) {
        ch.n_classes = n_classes;
        trunk.init(rng);
        vel_trunk.init(rng);
        // zero-initialized output convs: predictions start exactly at the
        // bias, with objectness at the prior probability sigmoid(-2); keeps
        // the first training steps free of huge regression errors
        for (int c = 0; c < n_classes; ++c) out.bias.value[c] = -2.0;
    }

    void collect(std::vector<NamedParam>& outp, const std::string& prefix) {
        trunk.collect(outp, prefix + ".trunk");
        out.collect(outp, prefix + ".out");
        vel_trunk.collect(outp, prefix + ".vtrunk");
        vel_out.collect(outp, prefix + ".vout");
    }
};

struct CenterHeadCache {
    CbrCache trunk;
    Tensor hidden;
    CbrCache vel_trunk;
    Tensor vel_hidden;
};

/// Raw prediction maps (objectness channels are logits). Velocity has its own
/// branch so its regression does not compete with objectness for capacity.
inline Tensor center_head(const Tensor& fused, CenterHeadParams& p, CenterHeadCache* cache = nullptr) {
    CbrCache local, vlocal;
    Tensor h = cbr_forward(fused, p.trunk, cache ? &cache->trunk : &local);
    Tensor main = conv3x3(h, p.out);
    Tensor hv = cbr_forward(fused, p.vel_trunk, cache ? &cache->vel_trunk : &vlocal);
    Tensor vel = conv3x3(hv, p.vel_out);
    if (cache) {
        cache->hidden = std::move(h);
        cache->vel_hidden = std::move(hv);
    }
    return concat_channels(main, vel);
}

inline Tensor center_head_backward(CenterHeadParams& p, const CenterHeadCache& cache,
                                   const Tensor& dmaps) {
    auto [dmain, dvel] = split_channels(dmaps, p.ch.total() - 2);
    Tensor dh = conv3x3_backward(cache.hidden, p.out, dmain);
    Tensor dx = cbr_backward(p.trunk, cache.trunk, dh);
    Tensor dhv = conv3x3_backward(cache.vel_hidden, p.vel_out, dvel);
    dx += cbr_backward(p.vel_trunk, cache.vel_trunk, dhv);
    return dx;
}

// ---------------------------------------------------------------------------
// detection decoding
// ---------------------------------------------------------------------------

/// Peak-picks each class objectness channel (strict local maxima over the
/// 8-neighborhood), reads the regression channels at the peak, and applies
/// greedy radius suppression per class in metric space.
inline std::vector<Detection> decode_detections(const Tensor& maps, const BEVGrid& geom,
                                                const HeadChannels& ch, double score_thresh,
                                                double radius_m) {
    if (score_thresh < 0.0 || score_thresh > 1.0 || radius_m < 0.0) {
        throw std::invalid_argument("decode_detections: bad thresholds");
    }
    const int h = maps.dim(1), w = maps.dim(2);
    struct Peak {
        double score;
        int cls, py, px;
    };
    std::vector<Peak> peaks;
    for (int c = 0; c < ch.n_classes; ++c) {
        const double* pl = maps.plane(c);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double v = pl[static_cast<int64_t>(y) * w + x];
                const double s = sigmoid(v);
                if (s < score_thresh) continue;
                bool is_peak = true;
                for (int dy = -1; dy <= 1 && is_peak; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        const int ny = y + dy, nx = x + dx;
                        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                        if (pl[static_cast<int64_t>(ny) * w + nx] >= v) {
                            is_peak = false;
                            break;
                        }
                    }
                }
                if (is_peak) peaks.push_back({s, c, y, x});
            }
        }
    }
    std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.cls != b.cls) return a.cls < b.cls;
        if (a.py != b.py) return a.py < b.py;
        return a.px < b.px;
    });

    std::vector<Detection> kept;
    for (const Peak& pk : peaks) {
        const double off_x = maps.at(ch.offset(), pk.py, pk.px);
        const double off_y = maps.at(ch.offset() + 1, pk.py, pk.px);
        auto [wx, wy] = geom.pixel_to_world(pk.px + off_x, pk.py + off_y);
        bool suppressed = false;
        for (const Detection& d : kept) {
            if (d.class_id == pk.cls && std::hypot(d.x - wx, d.y - wy) < radius_m) {
                suppressed = true;
                break;
            }
        }
        if (suppressed) continue;
        Detection d;
        d.x = wx;
        d.y = wy;
        d.w = std::exp(maps.at(ch.size(), pk.py, pk.px));
        d.l = std::exp(maps.at(ch.size() + 1, pk.py, pk.px));
        d.yaw = std::atan2(maps.at(ch.yaw(), pk.py, pk.px), maps.at(ch.yaw() + 1, pk.py, pk.px));
        d.vx = maps.at(ch.vel(), pk.py, pk.px);
        d.vy = maps.at(ch.vel() + 1, pk.py, pk.px);
        d.class_id = pk.cls;
        d.score = pk.score;
        kept.push_back(d);
    }
    return kept;
}

// ---------------------------------------------------------------------------
// focal loss
// ---------------------------------------------------------------------------

/// Mean over elements of -alpha_t (1-p_t)^gamma log(p_t) on sigmoid
/// probabilities. alpha < 0 disables the class balancing term (alpha_t = 1).
inline double focal_loss(const Tensor& logits, const Tensor& targets, double alpha = 0.25,
                         double gamma = 2.0, Tensor* dlogits = nullptr) {
    if (!logits.same_shape(targets)) throw std::invalid_argument("focal_loss: shape mismatch");
    const int64_t n = logits.size();
    if (n == 0) return 0.0;
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double t = targets[i];
        const double s = t > 0.5 ? 1.0 : -1.0;
        const double alpha_t = alpha < 0.0 ? 1.0 : (t > 0.5 ? alpha : 1.0 - alpha);
        const double x = logits[i];
        const double log_pt = log_sigmoid(s * x);
        const double one_minus_pt = sigmoid(-s * x);
        const double pt = sigmoid(s * x);
        loss += -alpha_t * std::pow(one_minus_pt, gamma) * log_pt;
        if (dlogits) {
            // d/dx of the per-element term, with p_t = sigmoid(s x)
            const double g =
                -alpha_t * s *
                (-gamma * std::pow(one_minus_pt, gamma) * pt * log_pt +
                 std::pow(one_minus_pt, gamma + 1.0));
            (*dlogits)[i] += g / static_cast<double>(n);
        }
    }
    return loss / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// multi-task BEV segmentation decoder
// ---------------------------------------------------------------------------

struct SegMasks {
    Tensor vehicle;   // (H,W) probabilities in [0,1]
    Tensor drivable;
    Tensor lane;

    const Tensor& task(int i) const { return i == 0 ? vehicle : (i == 1 ? drivable : lane); }
    Tensor& task(int i) { return i == 0 ? vehicle : (i == 1 ? drivable : lane); }
};

constexpr int kSegTasks = 3;
/// Per-task focal-loss weights (vehicle, drivable area, lane).
constexpr double kSegLossWeights[kSegTasks] = {400.0, 80.0, 200.0};

inline Tensor nearest_upsample(const Tensor& x, int factor) {
    if (factor == 1) return x;
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y({c, h * factor, w * factor});
    for (int ch = 0; ch < c; ++ch) {
        const double* xp = x.plane(ch);
        double* yp = y.plane(ch);
        for (int yy = 0; yy < h * factor; ++yy) {
            for (int xx = 0; xx < w * factor; ++xx) {
                yp[static_cast<int64_t>(yy) * w * factor + xx] =
                    xp[static_cast<int64_t>(yy / factor) * w + xx / factor];
            }
        }
    }
    return y;
}

inline Tensor nearest_upsample_backward(const Tensor& dy, int factor) {
    if (factor == 1) return dy;
    const int c = dy.dim(0), hf = dy.dim(1), wf = dy.dim(2);
    const int h = hf / factor, w = wf / factor;
    Tensor dx = Tensor::zeros({c, h, w});
    for (int ch = 0; ch < c; ++ch) {
        const double* dp = dy.plane(ch);
        double* xp = dx.plane(ch);
        for (int yy = 0; yy < hf; ++yy) {
            for (int xx = 0; xx < wf; ++xx) {
                xp[static_cast<int64_t>(yy / factor) * w + xx / factor] +=
                    dp[static_cast<int64_t>(yy) * wf + xx];
            }
        }
    }
    return dx;
}

/// Shared trunk with nearest upsampling, then one conv head per task.
struct SegDecoderParams {
    int upsample = 2;
    CbrParams trunk1;  // C_f -> C_s
    CbrParams trunk2;  // C_s -> C_s (after upsampling)
    std::vector<ConvParams> heads;  // per task: C_s -> 1

    SegDecoderParams() = default;
    SegDecoderParams(int c_in, int c_s, Rng& rng, int upsample_ = 2)
        : upsample(upsample_), trunk1(c_s, c_in), trunk2(c_s, c_s) {
        trunk1.init(rng);
        trunk2.init(rng);
        for (int i = 0; i < kSegTasks; ++i) {
            ConvParams hd(1, c_s);
            hd.init(rng);
            heads.push_back(std::move(hd));
        }
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) {
        trunk1.collect(out, prefix + ".t1");
        trunk2.collect(out, prefix + ".t2");
        for (size_t i = 0; i < heads.size(); ++i) {
            heads[i].collect(out, prefix + ".head" + std::to_string(i));
        }
    }
};

struct SegDecodeCache {
    CbrCache trunk1;
    CbrCache trunk2;
    Tensor up_in;  // trunk1 output before upsampling
    Tensor shared; // trunk2 output feeding every head
};

/// Per-task logits, each (1, H*U, W*U).
inline std::vector<Tensor> seg_decode_logits(const Tensor& fused, SegDecoderParams& p,
                                             SegDecodeCache* cache = nullptr) {
    CbrCache l1, l2;
    Tensor t1 = cbr_forward(fused, p.trunk1, cache ? &cache->trunk1 : &l1);
    Tensor up = nearest_upsample(t1, p.upsample);
    Tensor t2 = cbr_forward(up, p.trunk2, cache ? &cache->trunk2 : &l2);
    std::vector<Tensor> logits;
    for (auto& hd : p.heads) logits.push_back(conv3x3(t2, hd));
    if (cache) {
        cache->up_in = std::move(t1);
        cache->shared = std::move(t2);
    }
    return logits;
}

inline Tensor seg_decode_backward(SegDecoderParams& p, const SegDecodeCache& cache,
                                  const std::vector<Tensor>& dlogits) {
    Tensor dshared = Tensor::zeros(cache.shared.shape());
    for (size_t i = 0; i < p.heads.size(); ++i) {
        dshared += conv3x3_backward(cache.shared, p.heads[i], dlogits[i]);
    }
    Tensor dup = cbr_backward(p.trunk2, cache.trunk2, dshared);
    Tensor dt1 = nearest_upsample_backward(dup, p.upsample);
    return cbr_backward(p.trunk1, cache.trunk1, dt1);
}

/// Probability masks for reporting and IoU evaluation.
inline SegMasks seg_decode(const Tensor& fused, SegDecoderParams& p) {
    std::vector<Tensor> logits = seg_decode_logits(fused, p);
    SegMasks m;
    for (int i = 0; i < kSegTasks; ++i) {
        Tensor plane({logits[static_cast<size_t>(i)].dim(1), logits[static_cast<size_t>(i)].dim(2)});
        for (int64_t j = 0; j < plane.size(); ++j) plane[j] = sigmoid(logits[static_cast<size_t>(i)][j]);
        m.task(i) = std::move(plane);
    }
    return m;
}

}  // namespace rcbev
