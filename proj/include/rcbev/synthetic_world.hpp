#pragma once

#include "rcbev/bev_grid.hpp"
#include "rcbev/heads.hpp"
#include "rcbev/radar_cloud.hpp"

#include "json.hpp"

namespace rcbev {

enum ObjectClass : int { kVehicle = 0, kPedestrian = 1, kBarrier = 2, kNumClasses = 3 };

struct SceneObject {
    double cx = 0.0, cy = 0.0, cz = 0.0;  // center, meters
    double w = 1.0, l = 1.0, h = 1.0;     // size, meters
    double yaw = 0.0;
    double vx = 0.0, vy = 0.0;
    int class_id = kVehicle;
    int attr_id = 0;
};

struct SceneParams {
    double area_extent = 40.0;   // objects placed in [-extent, extent]^2
    double v_max = 10.0;         // velocity range per axis
    int max_retries_per_object = 200;
    // class mix: vehicles dominate, as on real roads
    double class_weights[kNumClasses] = {0.5, 0.25, 0.25};
};

namespace detail {

inline void class_size(int cls, Rng& rng, double* w, double* l, double* h) {
    switch (cls) {
        case kVehicle:
            *w = 1.9 + rng.uniform(-0.2, 0.2);
            *l = 4.5 + rng.uniform(-0.5, 0.5);
            *h = 1.7;
            break;
        case kPedestrian:
            *w = 0.7 + rng.uniform(-0.1, 0.1);
            *l = 0.7 + rng.uniform(-0.1, 0.1);
            *h = 1.8;
            break;
        default:
            *w = 0.6;
            *l = 2.0 + rng.uniform(-0.3, 0.3);
            *h = 1.0;
            break;
    }
}

inline double half_diagonal(const SceneObject& o) { return 0.5 * std::hypot(o.w, o.l); }

}  // namespace detail

/// Places n objects without overlap (center distance above the sum of half
/// diagonals), with uniform random velocities. Throws after bounded retries
/// when the requested density is infeasible.
inline std::vector<SceneObject> generate_scene(int n_objects, const SceneParams& params,
                                               uint64_t seed) {
    if (n_objects < 0) throw std::invalid_argument("generate_scene: negative count");
    Rng rng(seed ^ 0x5ce7e5ULL);
    std::vector<SceneObject> objects;
    for (int i = 0; i < n_objects; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < params.max_retries_per_object; ++attempt) {
            SceneObject o;
            const double u = rng.uniform() *
                             (params.class_weights[0] + params.class_weights[1] + params.class_weights[2]);
            o.class_id = u < params.class_weights[0]
                             ? kVehicle
                             : (u < params.class_weights[0] + params.class_weights[1] ? kPedestrian
                                                                                      : kBarrier);
            detail::class_size(o.class_id, rng, &o.w, &o.l, &o.h);
            o.cx = rng.uniform(-params.area_extent, params.area_extent);
            o.cy = rng.uniform(-params.area_extent, params.area_extent);
            o.cz = 0.5 * o.h;
            o.yaw = rng.uniform(-M_PI, M_PI);
            o.vx = rng.uniform(-params.v_max, params.v_max);
            o.vy = rng.uniform(-params.v_max, params.v_max);
            o.attr_id = static_cast<int>(rng.uniform_int(2));
            bool ok = std::hypot(o.cx, o.cy) > 3.0;  // keep the ego cell empty
            for (const auto& other : objects) {
                if (std::hypot(o.cx - other.cx, o.cy - other.cy) <=
                    detail::half_diagonal(o) + detail::half_diagonal(other)) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                objects.push_back(o);
                placed = true;
                break;
            }
        }
        if (!placed) throw std::runtime_error("generate_scene: could not place object (density too high)");
    }
    return objects;
}

/// Constant-velocity motion model.
inline std::vector<SceneObject> step_scene(const std::vector<SceneObject>& objects, double dt) {
    if (!(dt > 0.0)) throw std::invalid_argument("step_scene: dt must be positive");
    std::vector<SceneObject> out = objects;
    for (auto& o : out) {
        o.cx += o.vx * dt;
        o.cy += o.vy * dt;
    }
    return out;
}

// ---------------------------------------------------------------------------
// radar simulation
// ---------------------------------------------------------------------------

struct RadarSimParams {
    double points_per_meter = 0.8;  // expected returns per meter of visible boundary
    double sigma_az = 0.01;         // azimuth noise, radians
    double sigma_doppler = 0.1;     // m/s on the radial speed
    double k_rcs = 1.0;             // V_rcs = k_rcs * (w*l) + noise
    double sigma_rcs = 0.5;
    double clutter_rate = 2.0;      // expected clutter points per frame
    double clutter_extent = 50.0;
};

/// Returns sampled on each object's ego-facing boundary edges, displaced by
/// zero-mean Gaussian azimuth noise in polar coordinates about the ego.
/// Doppler is the radial projection of object velocity; V_rcs scales with
/// footprint area and is floored at zero.
inline RadarPointCloud simulate_radar(const std::vector<SceneObject>& objects,
                                      const RadarSimParams& params, uint64_t seed) {
    Rng rng(seed ^ 0x7ada7ULL);
    RadarPointCloud pc;
    for (const auto& o : objects) {
        // oriented box corners
        const double c = std::cos(o.yaw), s = std::sin(o.yaw);
        const double hx = 0.5 * o.l, hy = 0.5 * o.w;
        const double cx[4] = {hx, -hx, -hx, hx};
        const double cy[4] = {hy, hy, -hy, -hy};
        double px[4], py[4];
        for (int i = 0; i < 4; ++i) {
            px[i] = o.cx + c * cx[i] - s * cy[i];
            py[i] = o.cy + s * cx[i] + c * cy[i];
        }
        // edges facing the ego: outward normal points toward the origin side
        struct Edge {
            double ax, ay, bx, by, len;
        };
        std::vector<Edge> visible;
        double visible_len = 0.0;
        for (int i = 0; i < 4; ++i) {
            const int j = (i + 1) % 4;
            const double mx = 0.5 * (px[i] + px[j]), my = 0.5 * (py[i] + py[j]);
            // outward normal direction = edge midpoint minus box center; the
            // edge faces the ego when that direction has positive dot product
            // with (ego - midpoint)
            const double ox = mx - o.cx, oy = my - o.cy;
            if (ox * (0.0 - mx) + oy * (0.0 - my) > 0.0) {
                const double len = std::hypot(px[j] - px[i], py[j] - py[i]);
                visible.push_back({px[i], py[i], px[j], py[j], len});
                visible_len += len;
            }
        }
        if (visible.empty()) continue;
        const int count = rng.poisson(params.points_per_meter * visible_len);
        const double v_rcs_base = params.k_rcs * o.w * o.l;
        for (int k = 0; k < count; ++k) {
            double u = rng.uniform(0.0, visible_len);
            double wx = visible.back().bx, wy = visible.back().by;
            for (const auto& e : visible) {
                if (u <= e.len) {
                    const double t = e.len > 0 ? u / e.len : 0.0;
                    wx = e.ax + t * (e.bx - e.ax);
                    wy = e.ay + t * (e.by - e.ay);
                    break;
                }
                u -= e.len;
            }
            // azimuth noise in polar coordinates about the ego
            const double r = std::hypot(wx, wy);
            double theta = std::atan2(wy, wx) + rng.normal(0.0, params.sigma_az);
            RadarPoint p;
            p.x = r * std::cos(theta);
            p.y = r * std::sin(theta);
            p.z = o.cz;
            p.rcs = std::max(0.0, v_rcs_base + rng.normal(0.0, params.sigma_rcs));
            // Doppler: radial component of object velocity (plus noise on the speed)
            const double rr = std::max(1e-9, std::hypot(p.x, p.y));
            const double rx = p.x / rr, ry = p.y / rr;
            const double v_rad = o.vx * rx + o.vy * ry + rng.normal(0.0, params.sigma_doppler);
            p.vx = v_rad * rx;
            p.vy = v_rad * ry;
            p.sweep = 0;
            pc.points.push_back(p);
        }
    }
    const int n_clutter = rng.poisson(params.clutter_rate);
    for (int k = 0; k < n_clutter; ++k) {
        RadarPoint p;
        p.x = rng.uniform(-params.clutter_extent, params.clutter_extent);
        p.y = rng.uniform(-params.clutter_extent, params.clutter_extent);
        p.z = 0.0;
        p.rcs = std::abs(rng.normal(0.0, 0.5));
        p.vx = rng.normal(0.0, 0.2);
        p.vy = rng.normal(0.0, 0.2);
        p.sweep = 0;
        pc.points.push_back(p);
    }
    return pc;
}

// ---------------------------------------------------------------------------
// idealized camera BEV rendering
// ---------------------------------------------------------------------------

struct CameraSimParams {
    double depth_bias = 3.0;   // blob center displaced along the viewing ray, meters
    double sigma_long = 4.0;   // blur along the ray (weak camera depth)
    double sigma_lat = 1.5;    // blur across the ray
    double depth_jitter = 0.0; // extra per-object random radial displacement
    double amplitude = 1.0;
};

/// One anisotropic Gaussian blob per object on its class channel, oriented
/// along the ego->object ray, displaced radially by the depth bias. This is
/// the weak-depth camera stand-in whose localization error the radar stream
/// must fix.
inline BEVGrid render_camera_bev(const std::vector<SceneObject>& objects, int grid_h, int grid_w,
                                 double resolution, const CameraSimParams& params, uint64_t seed) {
    BEVGrid grid = BEVGrid::centered(grid_h, grid_w, resolution, kNumClasses);
    Rng rng(seed ^ 0xca3e7aULL);
    for (const auto& o : objects) {
        const double range = std::max(1e-6, std::hypot(o.cx, o.cy));
        const double rx = o.cx / range, ry = o.cy / range;
        const double shift = params.depth_bias +
                             (params.depth_jitter > 0 ? rng.normal(0.0, params.depth_jitter) : 0.0);
        const double bx = o.cx + shift * rx;
        const double by = o.cy + shift * ry;
        auto [pcx, pcy] = grid.world_to_pixel(bx, by);
        const double reach = 3.0 * std::max(params.sigma_long, params.sigma_lat) / resolution;
        const int x_lo = std::max(0, static_cast<int>(std::floor(pcx - reach)));
        const int x_hi = std::min(grid_w - 1, static_cast<int>(std::ceil(pcx + reach)));
        const int y_lo = std::max(0, static_cast<int>(std::floor(pcy - reach)));
        const int y_hi = std::min(grid_h - 1, static_cast<int>(std::ceil(pcy + reach)));
        double* pl = grid.data.plane(o.class_id);
        for (int iy = y_lo; iy <= y_hi; ++iy) {
            for (int ix = x_lo; ix <= x_hi; ++ix) {
                auto [wx, wy] = grid.pixel_to_world(ix, iy);
                const double dx = wx - bx, dy = wy - by;
                const double u_long = dx * rx + dy * ry;
                const double u_lat = -dx * ry + dy * rx;
                const double g = params.amplitude *
                                 std::exp(-0.5 * (u_long * u_long / (params.sigma_long * params.sigma_long) +
                                                  u_lat * u_lat / (params.sigma_lat * params.sigma_lat)));
                pl[static_cast<int64_t>(iy) * grid_w + ix] += g;
            }
        }
    }
    return grid;
}

/// Partitions the BEV plane into 6 azimuthal sectors (the camera-rig stand-in)
/// and zeroes n of them, chosen by seed; n = 6 clears everything.
inline BEVGrid drop_camera_views(const BEVGrid& camera_bev, int n_views_dropped, uint64_t seed) {
    if (n_views_dropped < 0 || n_views_dropped > 6) {
        throw std::invalid_argument("drop_camera_views: n must be in [0,6]");
    }
    if (n_views_dropped == 0) return camera_bev;
    Rng rng(seed ^ 0xd201ULL);
    std::vector<int> order = rng.permutation(6);
    bool dropped[6] = {false, false, false, false, false, false};
    for (int i = 0; i < n_views_dropped; ++i) dropped[order[static_cast<size_t>(i)]] = true;

    BEVGrid out = camera_bev;
    for (int iy = 0; iy < out.height; ++iy) {
        for (int ix = 0; ix < out.width; ++ix) {
            auto [wx, wy] = out.pixel_to_world(ix, iy);
            const double theta = std::atan2(wy, wx);  // [-pi, pi]
            int sector = static_cast<int>(std::floor((theta + M_PI) / (M_PI / 3.0)));
            sector = std::clamp(sector, 0, 5);
            if (dropped[sector]) {
                for (int c = 0; c < out.channels(); ++c) {
                    out.data.plane(c)[static_cast<int64_t>(iy) * out.width + ix] = 0.0;
                }
            }
        }
    }
    return out;
}

/// Azimuthal sector index of a world position, matching drop_camera_views.
inline int view_sector(double wx, double wy) {
    const double theta = std::atan2(wy, wx);
    return std::clamp(static_cast<int>(std::floor((theta + M_PI) / (M_PI / 3.0))), 0, 5);
}

// ---------------------------------------------------------------------------
// ground-truth segmentation masks
// ---------------------------------------------------------------------------

struct SegGtParams {
    double drivable_radius = 36.0;
    double lane_offsets[2] = {-6.0, 6.0};
    double lane_half_width = 1.0;
};

inline bool point_in_oriented_box(double wx, double wy, const SceneObject& o) {
    const double c = std::cos(o.yaw), s = std::sin(o.yaw);
    const double dx = wx - o.cx, dy = wy - o.cy;
    const double u = c * dx + s * dy;   // along length
    const double v = -s * dx + c * dy;  // along width
    return std::abs(u) <= 0.5 * o.l && std::abs(v) <= 0.5 * o.w;
}

/// Binary masks at the segmentation resolution: vehicle = union of vehicle
/// footprints, drivable = disk around the ego, lanes = two straight bands
/// clipped to the drivable disk.
inline SegMasks render_gt_seg(const std::vector<SceneObject>& objects, int h, int w,
                              double resolution, const SegGtParams& params = {}) {
    BEVGrid geom = BEVGrid::centered(h, w, resolution, 1);
    SegMasks m;
    m.vehicle = Tensor::zeros({h, w});
    m.drivable = Tensor::zeros({h, w});
    m.lane = Tensor::zeros({h, w});
    for (int iy = 0; iy < h; ++iy) {
        for (int ix = 0; ix < w; ++ix) {
            auto [wx, wy] = geom.pixel_to_world(ix, iy);
            const int64_t idx = static_cast<int64_t>(iy) * w + ix;
            const bool driv = std::hypot(wx, wy) <= params.drivable_radius;
            if (driv) m.drivable[idx] = 1.0;
            if (driv && (std::abs(wy - params.lane_offsets[0]) <= params.lane_half_width ||
                         std::abs(wy - params.lane_offsets[1]) <= params.lane_half_width)) {
                m.lane[idx] = 1.0;
            }
            for (const auto& o : objects) {
                if (o.class_id == kVehicle && point_in_oriented_box(wx, wy, o)) {
                    m.vehicle[idx] = 1.0;
                    break;
                }
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// frames and serialization
// ---------------------------------------------------------------------------

struct SceneFrame {
    double timestamp = 0.0;
    std::vector<SceneObject> objects;
    RadarPointCloud radar;
    BEVGrid camera_bev;
    SegMasks gt_seg;
};

inline nlohmann::json scene_to_json(const std::vector<SceneObject>& objects) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& o : objects) {
        arr.push_back({{"center", {o.cx, o.cy, o.cz}},
                       {"size", {o.w, o.l, o.h}},
                       {"yaw", o.yaw},
                       {"velocity", {o.vx, o.vy}},
                       {"class_id", o.class_id},
                       {"attr_id", o.attr_id}});
    }
    return arr;
}

inline std::vector<SceneObject> scene_from_json(const nlohmann::json& arr) {
    std::vector<SceneObject> out;
    for (const auto& j : arr) {
        SceneObject o;
        o.cx = j["center"][0];
        o.cy = j["center"][1];
        o.cz = j["center"][2];
        o.w = j["size"][0];
        o.l = j["size"][1];
        o.h = j["size"][2];
        o.yaw = j["yaw"];
        o.vx = j["velocity"][0];
        o.vy = j["velocity"][1];
        o.class_id = j["class_id"];
        o.attr_id = j["attr_id"];
        out.push_back(o);
    }
    return out;
}

}  // namespace rcbev
