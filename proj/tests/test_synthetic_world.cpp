#include <gtest/gtest.h>

#include <set>

#include "rcbev/synthetic_world.hpp"

using namespace rcbev;

namespace {

/// Distance from a point to the boundary of an oriented box (0 if on it).
double distance_to_box_boundary(double wx, double wy, const SceneObject& o) {
    const double c = std::cos(o.yaw), s = std::sin(o.yaw);
    const double dx = wx - o.cx, dy = wy - o.cy;
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    const double du = std::abs(u) - 0.5 * o.l;
    const double dv = std::abs(v) - 0.5 * o.w;
    if (du <= 0 && dv <= 0) return std::min(-du, -dv);  // inside: depth to nearest edge
    const double ox = std::max(du, 0.0), oy = std::max(dv, 0.0);
    return std::hypot(ox, oy);
}

}  // namespace

TEST(GenerateScene, CountsAndPlacement) {
    SceneParams params;
    EXPECT_TRUE(generate_scene(0, params, 1).empty());
    auto one = generate_scene(1, params, 2);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_LE(std::abs(one[0].cx), params.area_extent);
    EXPECT_LE(std::abs(one[0].cy), params.area_extent);
    EXPECT_GT(one[0].w, 0.0);
}

TEST(GenerateScene, PairwiseNonOverlap) {
    SceneParams params;
    auto objs = generate_scene(20, params, 7);
    ASSERT_EQ(objs.size(), 20u);
    for (size_t i = 0; i < objs.size(); ++i) {
        for (size_t j = i + 1; j < objs.size(); ++j) {
            const double d = std::hypot(objs[i].cx - objs[j].cx, objs[i].cy - objs[j].cy);
            const double min_d = 0.5 * std::hypot(objs[i].w, objs[i].l) +
                                 0.5 * std::hypot(objs[j].w, objs[j].l);
            EXPECT_GT(d, min_d);
        }
    }
}

TEST(GenerateScene, DeterministicPerSeedAndInfeasibleThrows) {
    SceneParams params;
    auto a = generate_scene(8, params, 42);
    auto b = generate_scene(8, params, 42);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].cx, b[i].cx);
        EXPECT_EQ(a[i].vy, b[i].vy);
        EXPECT_EQ(a[i].class_id, b[i].class_id);
    }
    SceneParams tiny;
    tiny.area_extent = 4.0;
    tiny.max_retries_per_object = 20;
    EXPECT_THROW(generate_scene(60, tiny, 3), std::runtime_error);
}

TEST(SimulateRadar, NoiseOffPointsLieOnBoundaries) {
    SceneParams sp;
    auto objs = generate_scene(6, sp, 11);
    RadarSimParams rp;
    rp.sigma_az = 0.0;
    rp.sigma_rcs = 0.0;
    rp.sigma_doppler = 0.0;
    rp.clutter_rate = 0.0;
    rp.points_per_meter = 2.0;
    auto pc = simulate_radar(objs, rp, 5);
    ASSERT_GT(pc.size(), 0u);
    for (const auto& p : pc.points) {
        double best = 1e300;
        for (const auto& o : objs) best = std::min(best, distance_to_box_boundary(p.x, p.y, o));
        EXPECT_LT(best, 1e-9);
    }
}

TEST(SimulateRadar, StationaryObjectHasZeroDoppler) {
    SceneObject o;
    o.cx = 20.0;
    o.cy = 5.0;
    o.w = 2.0;
    o.l = 4.0;
    o.vx = 0.0;
    o.vy = 0.0;
    RadarSimParams rp;
    rp.sigma_az = 0.0;
    rp.sigma_doppler = 0.0;
    rp.clutter_rate = 0.0;
    auto pc = simulate_radar({o}, rp, 8);
    ASSERT_GT(pc.size(), 0u);
    for (const auto& p : pc.points) {
        EXPECT_NEAR(p.vx, 0.0, 1e-12);
        EXPECT_NEAR(p.vy, 0.0, 1e-12);
    }
}

TEST(SimulateRadar, RcsTracksFootprintArea) {
    SceneObject small, big;
    small.cx = big.cx = 15.0;
    small.w = 0.7;
    small.l = 0.7;
    big.cy = 30.0;
    big.w = 2.0;
    big.l = 4.5;
    RadarSimParams rp;
    rp.sigma_rcs = 0.0;
    rp.clutter_rate = 0.0;
    rp.points_per_meter = 3.0;
    auto pc = simulate_radar({small, big}, rp, 9);
    for (const auto& p : pc.points) {
        const bool near_small = std::hypot(p.x - small.cx, p.y - small.cy) < 5.0;
        EXPECT_NEAR(p.rcs, near_small ? 0.49 : 9.0, 1e-9);
    }
}

TEST(SimulateRadar, AzimuthNoiseMatchesHalfNormalMean) {
    // A point-like object at range r: lateral displacement = r * dtheta, so
    // E|lateral| = r * sigma * sqrt(2/pi).
    SceneObject o;
    o.cx = 30.0;
    o.cy = 0.0;
    o.w = 0.02;
    o.l = 0.02;
    RadarSimParams rp;
    rp.sigma_az = 0.01;
    rp.sigma_rcs = 0.0;
    rp.sigma_doppler = 0.0;
    rp.clutter_rate = 0.0;
    rp.points_per_meter = 10000.0;  // many returns from the tiny boundary
    double acc = 0.0;
    int n = 0;
    for (uint64_t seed = 0; seed < 100 && n < 10000; ++seed) {
        auto pc = simulate_radar({o}, rp, seed);
        for (const auto& p : pc.points) {
            acc += std::abs(p.y);  // lateral axis for an object on +x
            ++n;
        }
    }
    ASSERT_GE(n, 10000);
    const double mean = acc / n;
    const double want = 30.0 * rp.sigma_az * std::sqrt(2.0 / M_PI);
    EXPECT_NEAR(mean, want, 0.05 * want);
}

TEST(RenderCameraBev, EmptySceneIsZero) {
    CameraSimParams cp;
    BEVGrid g = render_camera_bev({}, 16, 16, 2.0, cp, 1);
    EXPECT_DOUBLE_EQ(max_abs_diff(g.data, Tensor::zeros({kNumClasses, 16, 16})), 0.0);
}

TEST(RenderCameraBev, ArgmaxAtObjectPixelWithoutBias) {
    // odd grid so the object sits exactly on a pixel center (no rounding tie)
    SceneObject o;
    o.cx = 8.0;
    o.cy = -6.0;
    o.class_id = kVehicle;
    CameraSimParams cp;
    cp.depth_bias = 0.0;
    cp.depth_jitter = 0.0;
    BEVGrid g = render_camera_bev({o}, 33, 33, 2.0, cp, 1);
    auto [px, py] = g.world_to_pixel(o.cx, o.cy);
    EXPECT_DOUBLE_EQ(px, std::round(px));
    int best = 0;
    const double* pl = g.data.plane(kVehicle);
    for (int64_t i = 1; i < 33 * 33; ++i) {
        if (pl[i] > pl[best]) best = static_cast<int>(i);
    }
    EXPECT_EQ(best % 33, static_cast<int>(std::llround(px)));
    EXPECT_EQ(best / 33, static_cast<int>(std::llround(py)));
}

TEST(RenderCameraBev, DepthBiasDisplacesArgmaxAlongRay) {
    SceneObject o;
    o.cx = 16.0;  // on the +x axis so the ray is the x axis
    o.cy = 0.0;
    o.class_id = kVehicle;
    CameraSimParams cp;
    cp.depth_bias = 6.0;
    cp.depth_jitter = 0.0;
    const double res = 2.0;
    BEVGrid g = render_camera_bev({o}, 33, 33, res, cp, 1);
    auto [px, py] = g.world_to_pixel(o.cx + cp.depth_bias, o.cy);
    EXPECT_DOUBLE_EQ(px, std::round(px));
    int best = 0;
    const double* pl = g.data.plane(kVehicle);
    for (int64_t i = 1; i < 33 * 33; ++i) {
        if (pl[i] > pl[best]) best = static_cast<int>(i);
    }
    // the blob peak moved by depth_bias / resolution pixels along the ray
    auto [px0, py0] = g.world_to_pixel(o.cx, o.cy);
    EXPECT_EQ(best % 33, static_cast<int>(std::llround(px0)) + static_cast<int>(cp.depth_bias / res));
    EXPECT_EQ(best % 33, static_cast<int>(std::llround(px)));
    EXPECT_EQ(best / 33, static_cast<int>(std::llround(py)));
}

TEST(StepScene, ConstantVelocityAndComposability) {
    SceneObject o;
    o.cx = 1.0;
    o.cy = 2.0;
    o.vx = 2.0;
    o.vy = 0.0;
    auto s = step_scene({o}, 0.5);
    EXPECT_DOUBLE_EQ(s[0].cx, 2.0);
    EXPECT_DOUBLE_EQ(s[0].cy, 2.0);

    SceneObject still = o;
    still.vx = still.vy = 0.0;
    auto s2 = step_scene({still}, 1.0);
    EXPECT_DOUBLE_EQ(s2[0].cx, still.cx);

    std::vector<SceneObject> a = {o}, b = {o};
    for (int i = 0; i < 10; ++i) a = step_scene(a, 0.1);
    b = step_scene(b, 1.0);
    EXPECT_NEAR(a[0].cx, b[0].cx, 1e-12);
    EXPECT_NEAR(a[0].cy, b[0].cy, 1e-12);
}

TEST(DropCameraViews, EndpointsAndSectorPredicate) {
    Rng rng(2);
    BEVGrid g = BEVGrid::centered(24, 24, 2.0, 2);
    g.data = rand_uniform({2, 24, 24}, rng, 0.5, 1.0);  // strictly positive

    BEVGrid same = drop_camera_views(g, 0, 5);
    EXPECT_DOUBLE_EQ(max_abs_diff(same.data, g.data), 0.0);

    BEVGrid none = drop_camera_views(g, 6, 5);
    EXPECT_DOUBLE_EQ(max_abs_diff(none.data, Tensor::zeros({2, 24, 24})), 0.0);

    const uint64_t seed = 17;
    BEVGrid half = drop_camera_views(g, 3, seed);
    // recover which sectors were zeroed, then verify every pixel against the
    // sector predicate
    std::set<int> zeroed;
    for (int iy = 0; iy < 24; ++iy) {
        for (int ix = 0; ix < 24; ++ix) {
            auto [wx, wy] = g.pixel_to_world(ix, iy);
            if (half.data.at(0, iy, ix) == 0.0) zeroed.insert(view_sector(wx, wy));
        }
    }
    EXPECT_EQ(zeroed.size(), 3u);
    for (int iy = 0; iy < 24; ++iy) {
        for (int ix = 0; ix < 24; ++ix) {
            auto [wx, wy] = g.pixel_to_world(ix, iy);
            const bool should_zero = zeroed.count(view_sector(wx, wy)) > 0;
            for (int c = 0; c < 2; ++c) {
                if (should_zero) {
                    EXPECT_DOUBLE_EQ(half.data.at(c, iy, ix), 0.0);
                } else {
                    EXPECT_DOUBLE_EQ(half.data.at(c, iy, ix), g.data.at(c, iy, ix));
                }
            }
        }
    }
}

TEST(GtSeg, VehicleMaskMatchesRasterizationOracle) {
    SceneParams sp;
    auto objs = generate_scene(10, sp, 23);
    SegMasks m = render_gt_seg(objs, 48, 48, 2.0);
    BEVGrid geom = BEVGrid::centered(48, 48, 2.0, 1);
    for (int iy = 0; iy < 48; ++iy) {
        for (int ix = 0; ix < 48; ++ix) {
            auto [wx, wy] = geom.pixel_to_world(ix, iy);
            bool inside = false;
            for (const auto& o : objs) {
                if (o.class_id != kVehicle) continue;
                // independent oracle: rotate into the box frame
                const double dx = wx - o.cx, dy = wy - o.cy;
                const double u = std::cos(o.yaw) * dx + std::sin(o.yaw) * dy;
                const double v = -std::sin(o.yaw) * dx + std::cos(o.yaw) * dy;
                if (std::abs(u) <= 0.5 * o.l && std::abs(v) <= 0.5 * o.w) inside = true;
            }
            EXPECT_DOUBLE_EQ(m.vehicle[static_cast<int64_t>(iy) * 48 + ix], inside ? 1.0 : 0.0);
        }
    }
}

TEST(SceneJson, RoundTrips) {
    SceneParams sp;
    auto objs = generate_scene(5, sp, 3);
    auto j = scene_to_json(objs);
    auto back = scene_from_json(j);
    ASSERT_EQ(back.size(), objs.size());
    for (size_t i = 0; i < objs.size(); ++i) {
        EXPECT_EQ(back[i].cx, objs[i].cx);
        EXPECT_EQ(back[i].yaw, objs[i].yaw);
        EXPECT_EQ(back[i].class_id, objs[i].class_id);
        EXPECT_EQ(back[i].attr_id, objs[i].attr_id);
    }
}

TEST(Determinism, SensorsAreBitwisePure) {
    SceneParams sp;
    auto objs = generate_scene(7, sp, 31);
    RadarSimParams rp;
    auto r1 = simulate_radar(objs, rp, 9);
    auto r2 = simulate_radar(objs, rp, 9);
    ASSERT_EQ(r1.size(), r2.size());
    for (size_t i = 0; i < r1.points.size(); ++i) {
        EXPECT_EQ(r1.points[i].x, r2.points[i].x);
        EXPECT_EQ(r1.points[i].rcs, r2.points[i].rcs);
    }
    CameraSimParams cp;
    cp.depth_jitter = 0.5;
    BEVGrid c1 = render_camera_bev(objs, 24, 24, 2.0, cp, 4);
    BEVGrid c2 = render_camera_bev(objs, 24, 24, 2.0, cp, 4);
    EXPECT_DOUBLE_EQ(max_abs_diff(c1.data, c2.data), 0.0);
}
