#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rcbev/tensor.hpp"

namespace rcbev {

/// One radar return in the current ego frame.
struct RadarPoint {
    double x = 0.0, y = 0.0, z = 0.0;  // meters
    double rcs = 0.0;                  // radar cross section value
    double vx = 0.0, vy = 0.0;         // Doppler-derived velocity, m/s
    int sweep = 0;                     // 0 = current sweep
};

struct RadarPointCloud {
    std::vector<RadarPoint> points;

    size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
};

/// Rigid 2D transform taking one sweep's ego frame into the current ego frame.
struct EgoMotion {
    double rotation = 0.0;  // radians, in (-pi, pi]
    double tx = 0.0, ty = 0.0;

    static EgoMotion identity() { return {}; }
};

/// Merges per-sweep clouds into the current frame, tagging each point with its
/// source sweep index.
inline RadarPointCloud accumulate_sweeps(const std::vector<RadarPointCloud>& sweeps,
                                         const std::vector<EgoMotion>& motion) {
    if (sweeps.size() != motion.size()) {
        throw std::invalid_argument("accumulate_sweeps: sweeps/motion length mismatch");
    }
    RadarPointCloud out;
    for (size_t s = 0; s < sweeps.size(); ++s) {
        const double c = std::cos(motion[s].rotation);
        const double sn = std::sin(motion[s].rotation);
        for (const RadarPoint& p : sweeps[s].points) {
            RadarPoint q = p;
            q.x = c * p.x - sn * p.y + motion[s].tx;
            q.y = sn * p.x + c * p.y + motion[s].ty;
            q.vx = c * p.vx - sn * p.vy;
            q.vy = sn * p.vx + c * p.vy;
            q.sweep = static_cast<int>(s);
            out.points.push_back(q);
        }
    }
    return out;
}

struct Augment {
    enum class Kind { FlipX, FlipY, Rotate, Scale };
    Kind kind;
    double value = 0.0;  // angle for Rotate, factor for Scale

    static Augment flip_x() { return {Kind::FlipX, 0.0}; }
    static Augment flip_y() { return {Kind::FlipY, 0.0}; }
    static Augment rotate(double theta) { return {Kind::Rotate, theta}; }
    static Augment scale(double s) { return {Kind::Scale, s}; }
};

/// Coordinate augmentation. Flips negate the matching velocity component,
/// rotation rotates (vx,vy), scaling multiplies coordinates only; rcs is
/// never touched.
inline RadarPointCloud augment(const RadarPointCloud& pc, const Augment& op) {
    RadarPointCloud out = pc;
    switch (op.kind) {
        case Augment::Kind::FlipX:
            for (auto& p : out.points) {
                p.x = -p.x;
                p.vx = -p.vx;
            }
            break;
        case Augment::Kind::FlipY:
            for (auto& p : out.points) {
                p.y = -p.y;
                p.vy = -p.vy;
            }
            break;
        case Augment::Kind::Rotate: {
            if (!std::isfinite(op.value)) throw std::invalid_argument("augment: bad angle");
            const double c = std::cos(op.value), s = std::sin(op.value);
            for (auto& p : out.points) {
                const double x = p.x, y = p.y, vx = p.vx, vy = p.vy;
                p.x = c * x - s * y;
                p.y = s * x + c * y;
                p.vx = c * vx - s * vy;
                p.vy = s * vx + c * vy;
            }
            break;
        }
        case Augment::Kind::Scale:
            if (!(op.value > 0.0) || !std::isfinite(op.value)) {
                throw std::invalid_argument("augment: scale must be positive");
            }
            for (auto& p : out.points) {
                p.x *= op.value;
                p.y *= op.value;
                p.z *= op.value;
            }
            break;
    }
    return out;
}

/// Adds independent uniform noise in [-amplitude, amplitude] to x and y.
inline RadarPointCloud perturb_xy(const RadarPointCloud& pc, double amplitude, uint64_t seed) {
    if (amplitude < 0.0) throw std::invalid_argument("perturb_xy: negative amplitude");
    RadarPointCloud out = pc;
    Rng rng(seed);
    for (auto& p : out.points) {
        p.x += rng.uniform(-amplitude, amplitude);
        p.y += rng.uniform(-amplitude, amplitude);
    }
    return out;
}

/// Drops round(fraction*N) points, chosen by a seeded shuffle; survivors keep
/// their original order.
inline RadarPointCloud drop_radar(const RadarPointCloud& pc, double fraction, uint64_t seed) {
    if (fraction < 0.0 || fraction > 1.0) throw std::invalid_argument("drop_radar: bad fraction");
    const int n = static_cast<int>(pc.points.size());
    const int n_drop = static_cast<int>(std::llround(fraction * n));
    if (n_drop <= 0) return pc;
    Rng rng(seed);
    std::vector<int> perm = rng.permutation(n);
    std::vector<char> dropped(static_cast<size_t>(n), 0);
    for (int i = 0; i < n_drop; ++i) dropped[static_cast<size_t>(perm[static_cast<size_t>(i)])] = 1;
    RadarPointCloud out;
    for (int i = 0; i < n; ++i) {
        if (!dropped[static_cast<size_t>(i)]) out.points.push_back(pc.points[static_cast<size_t>(i)]);
    }
    return out;
}

/// Builds the backbone input feature matrix (N x feature_dim). The sweep index
/// enters as a scalar normalized to [0,1]; z is included unless disabled.
inline Tensor point_features(const RadarPointCloud& pc, int sweep_count, bool include_z = true) {
    const int f = include_z ? 7 : 6;
    Tensor out({static_cast<int>(pc.points.size()), f});
    const double sweep_norm = sweep_count > 1 ? 1.0 / (sweep_count - 1) : 0.0;
    for (size_t i = 0; i < pc.points.size(); ++i) {
        const RadarPoint& p = pc.points[i];
        double* r = out.row(static_cast<int>(i));
        int k = 0;
        r[k++] = p.x;
        r[k++] = p.y;
        if (include_z) r[k++] = p.z;
        r[k++] = p.rcs;
        r[k++] = p.vx;
        r[k++] = p.vy;
        r[k++] = p.sweep * sweep_norm;
    }
    return out;
}

/// N x 2 matrix of point xy coordinates.
inline Tensor point_coords(const RadarPointCloud& pc) {
    Tensor out({static_cast<int>(pc.points.size()), 2});
    for (size_t i = 0; i < pc.points.size(); ++i) {
        out.at(static_cast<int>(i), 0) = pc.points[i].x;
        out.at(static_cast<int>(i), 1) = pc.points[i].y;
    }
    return out;
}

// --- CSV interchange: header `x,y,z,rcs,vx,vy,sweep`, '.' decimal separator --

inline void write_radar_csv(const RadarPointCloud& pc, std::ostream& os) {
    os << "x,y,z,rcs,vx,vy,sweep\n";
    char buf[256];
    for (const auto& p : pc.points) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", p.x, p.y, p.z,
                      p.rcs, p.vx, p.vy, p.sweep);
        os << buf;
    }
}

inline void write_radar_csv(const RadarPointCloud& pc, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    write_radar_csv(pc, f);
}

inline RadarPointCloud read_radar_csv(std::istream& is) {
    RadarPointCloud pc;
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("radar csv: empty file");
    if (line != "x,y,z,rcs,vx,vy,sweep" && line != "x,y,z,rcs,vx,vy,sweep\r") {
        throw std::runtime_error("radar csv: unexpected header: " + line);
    }
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        RadarPoint p;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        if (!(ss >> p.x >> p.y >> p.z >> p.rcs >> p.vx >> p.vy >> p.sweep)) {
            throw std::runtime_error("radar csv: malformed row: " + line);
        }
        pc.points.push_back(p);
    }
    return pc;
}

inline RadarPointCloud read_radar_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    return read_radar_csv(f);
}

}  // namespace rcbev
