#include <gtest/gtest.h>

#include "rcbev/metrics.hpp"

using namespace rcbev;

namespace {

Detection pred_at(double x, double y, double score, int cls = 0) {
    Detection d;
    d.x = x;
    d.y = y;
    d.score = score;
    d.class_id = cls;
    return d;
}

SceneObject gt_at(double x, double y, int cls = 0) {
    SceneObject o;
    o.cx = x;
    o.cy = y;
    o.class_id = cls;
    return o;
}

}  // namespace

TEST(MatchByDistance, ExactPredictionsAllMatch) {
    std::vector<SceneObject> gts = {gt_at(0, 0), gt_at(10, 0), gt_at(0, 10)};
    std::vector<Detection> preds;
    for (const auto& g : gts) preds.push_back(pred_at(g.cx, g.cy, 0.9));
    auto res = match_by_distance(preds, gts, 2.0);
    EXPECT_EQ(res.matches.size(), 3u);
    EXPECT_EQ(res.fp, 0);
    EXPECT_EQ(res.fn, 0);
}

TEST(MatchByDistance, EmptyPredictionsAllMissed) {
    std::vector<SceneObject> gts = {gt_at(0, 0), gt_at(5, 5)};
    auto res = match_by_distance({}, gts, 2.0);
    EXPECT_EQ(res.fn, 2);
    EXPECT_EQ(res.fp, 0);
}

TEST(MatchByDistance, CraftedCaseMatchesGreedyOracle) {
    // Higher-scored prediction picks its nearest gt first even when a later
    // prediction is closer to it.
    std::vector<SceneObject> gts = {gt_at(0, 0), gt_at(3, 0)};
    std::vector<Detection> preds = {pred_at(1.2, 0, 0.9), pred_at(0.2, 0, 0.8), pred_at(7, 7, 0.7)};
    auto res = match_by_distance(preds, gts, 2.0);
    // oracle: pred0 (score .9) -> gt0 (1.2 < 1.8); pred1 -> nearest unmatched
    // is gt1 at 2.8 > threshold -> FP; pred2 -> FP
    ASSERT_EQ(res.matches.size(), 1u);
    EXPECT_EQ(res.matches[0].first, 0);
    EXPECT_EQ(res.matches[0].second, 0);
    EXPECT_EQ(res.fp, 2);
    EXPECT_EQ(res.fn, 1);
    // bookkeeping identities
    EXPECT_EQ(res.fp + static_cast<int>(res.matches.size()), 3);
    EXPECT_EQ(res.fn + static_cast<int>(res.matches.size()), 2);
}

TEST(AveragePrecision, PerfectAndWorthlessDetectors) {
    std::vector<SceneObject> gts = {gt_at(0, 0), gt_at(20, 0), gt_at(0, 20)};
    std::vector<Detection> perfect;
    for (const auto& g : gts) perfect.push_back(pred_at(g.cx, g.cy, 0.99));
    EXPECT_DOUBLE_EQ(average_precision(perfect, gts, 2.0), 1.0);

    std::vector<Detection> wrong = {pred_at(100, 100, 0.9), pred_at(-50, 0, 0.8)};
    EXPECT_DOUBLE_EQ(average_precision(wrong, gts, 2.0), 0.0);
}

TEST(AveragePrecision, FivePredictionStaircase) {
    // Ranked by score: TP, FP, TP, FP, TP over 3 ground truths.
    std::vector<SceneObject> gts = {gt_at(0, 0), gt_at(30, 0), gt_at(0, 30)};
    std::vector<Detection> preds = {
        pred_at(0, 0, 0.9),    // TP
        pred_at(90, 90, 0.8),  // FP
        pred_at(30, 0, 0.7),   // TP
        pred_at(70, 70, 0.6),  // FP
        pred_at(0, 30, 0.5),   // TP
    };
    // Hand staircase: p(r)=1 for r<=1/3, 2/3 for r<=2/3, 3/5 for r<=1.
    // 40 samples j/40, j=5..40 kept (r>0.1):
    //   9 samples at p=1, 13 at p=2/3, 14 at p=3/5, each (p-0.1)/0.9.
    const double want = (9 * (1.0 - 0.1) + 13 * (2.0 / 3.0 - 0.1) + 14 * (0.6 - 0.1)) / 0.9 / 36.0;
    EXPECT_NEAR(average_precision(preds, gts, 2.0), want, 1e-12);
    EXPECT_NEAR(want, 0.69341563786008232, 1e-12);
}

TEST(TpErrors, PerfectPredictionsScoreZero) {
    std::vector<std::pair<Detection, SceneObject>> pairs;
    SceneObject g = gt_at(5, 5);
    g.w = 2.0;
    g.l = 4.0;
    g.yaw = 0.4;
    g.vx = 3.0;
    g.vy = -1.0;
    Detection p;
    p.x = 5;
    p.y = 5;
    p.w = 2.0;
    p.l = 4.0;
    p.yaw = 0.4;
    p.vx = 3.0;
    p.vy = -1.0;
    pairs.emplace_back(p, g);
    TpErrors e = tp_errors(pairs);
    EXPECT_DOUBLE_EQ(e.ate, 0.0);
    EXPECT_DOUBLE_EQ(e.ase, 0.0);
    EXPECT_DOUBLE_EQ(e.aoe, 0.0);
    EXPECT_DOUBLE_EQ(e.ave, 0.0);
    EXPECT_DOUBLE_EQ(e.aae, 0.0);
}

TEST(TpErrors, YawAndScaleCases) {
    SceneObject g = gt_at(0, 0);
    g.w = 2.0;
    g.l = 4.0;
    Detection p;
    p.w = 2.0;
    p.l = 4.0;
    p.yaw = M_PI / 2;
    std::vector<std::pair<Detection, SceneObject>> pairs = {{p, g}};
    EXPECT_NEAR(tp_errors(pairs).aoe, M_PI / 2, 1e-12);

    Detection p2;
    p2.w = 4.0;  // double one axis: aligned IoU = 1/2
    p2.l = 4.0;
    std::vector<std::pair<Detection, SceneObject>> pairs2 = {{p2, g}};
    EXPECT_NEAR(tp_errors(pairs2).ase, 0.5, 1e-12);

    // no matches: every error is 1 by convention
    TpErrors none = tp_errors({});
    EXPECT_DOUBLE_EQ(none.ate, 1.0);
    EXPECT_DOUBLE_EQ(none.aae, 1.0);
}

TEST(Nds, ReproducesPublishedRows) {
    // (mAP, ate, ase, aoe, ave, aae) -> published NDS/100, from full-system
    // evaluations on the standard benchmark.
    struct Row {
        double map, ate, ase, aoe, ave, aae, published;
    };
    const std::vector<Row> rows = {
        {0.550, 0.390, 0.234, 0.362, 0.259, 0.113, 0.639},
        {0.6734, 0.341, 0.234, 0.241, 0.147, 0.130, 0.727},
        {0.603, 0.262, 0.239, 0.361, 0.288, 0.136, 0.673},
        {0.655, 0.256, 0.240, 0.351, 0.278, 0.129, 0.702},
        {0.049, 0.823, 0.428, 0.607, 2.081, 1.000, 0.139},
        {0.326, 0.631, 0.261, 0.516, 0.614, 0.115, 0.449},
        {0.406, 0.484, 0.257, 0.587, 0.702, 0.140, 0.486},
        {0.411, 0.467, 0.268, 0.456, 0.519, 0.114, 0.523},
        {0.481, 0.582, 0.256, 0.375, 0.378, 0.126, 0.569},
        {0.626, 0.437, 0.252, 0.181, 0.203, 0.191, 0.687},
    };
    for (const auto& r : rows) {
        const double got = nds(r.map, {r.ate, r.ase, r.aoe, r.ave, r.aae});
        EXPECT_NEAR(got, r.published, 0.0015) << "row with mAP " << r.map;
    }
}

TEST(Nds, PerfectScoreAndClampsAndMonotonicity) {
    EXPECT_DOUBLE_EQ(nds(1.0, {0, 0, 0, 0, 0}), 1.0);
    // errors at or above 1 contribute exactly zero
    EXPECT_DOUBLE_EQ(nds(0.5, {1.0, 2.5, 1.0, 7.0, 1.0}), 0.25);
    // monotone: increasing mAP raises NDS, increasing any error never raises it
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const double map = rng.uniform(0, 1);
        TpErrors e = {rng.uniform(0, 1.5), rng.uniform(0, 1.5), rng.uniform(0, 1.5),
                      rng.uniform(0, 2.5), rng.uniform(0, 1.5)};
        const double base = nds(map, e);
        EXPECT_GE(nds(std::min(1.0, map + 0.1), e) + 1e-15, base);
        TpErrors worse = e;
        worse.ate += 0.2;
        EXPECT_LE(nds(map, worse), base + 1e-15);
    }
}

TEST(Motar, ClosedFormCases) {
    // P=10, r=0.5, IDS=0, FP=1, FN=5 -> 1 - (1+5-5)/5 = 0.8
    EXPECT_NEAR(motar(0, 1, 5, 0.5, 10), 0.8, 1e-12);
    // clamps at zero when the error budget is exceeded
    EXPECT_DOUBLE_EQ(motar(10, 20, 5, 0.5, 10), 0.0);
    EXPECT_DOUBLE_EQ(motar(0, 0, 0, 0.0, 10), 0.0);
}

namespace {

TrackEvalInput perfect_tracking_scenario(int n_objects, int n_frames) {
    TrackEvalInput in;
    Rng rng(5);
    std::vector<std::pair<double, double>> pos;
    std::vector<std::pair<double, double>> vel;
    for (int i = 0; i < n_objects; ++i) {
        pos.push_back({rng.uniform(-30, 30), rng.uniform(-30, 30)});
        vel.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3)});
    }
    for (int f = 0; f < n_frames; ++f) {
        std::vector<TrackSnapshot> hyps;
        std::vector<GtSnapshot> gts;
        for (int i = 0; i < n_objects; ++i) {
            const double x = pos[static_cast<size_t>(i)].first + vel[static_cast<size_t>(i)].first * f;
            const double y = pos[static_cast<size_t>(i)].second + vel[static_cast<size_t>(i)].second * f;
            hyps.push_back({i, x, y, 0.9, 0});
            gts.push_back({i, x, y, 0});
        }
        in.hyp_frames.push_back(hyps);
        in.gt_frames.push_back(gts);
    }
    return in;
}

}  // namespace

TEST(Amota, PerfectTrackingScoresOne) {
    auto in = perfect_tracking_scenario(5, 8);
    EXPECT_DOUBLE_EQ(amota(in), 1.0);
    EXPECT_DOUBLE_EQ(amotp(in), 0.0);
}

TEST(Amotp, ConstantOffsetGivesThatDistance) {
    auto in = perfect_tracking_scenario(4, 6);
    for (auto& frame : in.hyp_frames) {
        for (auto& h : frame) h.x += 0.5;  // every match at distance 0.5
    }
    EXPECT_NEAR(amotp(in), 0.5, 1e-12);
    EXPECT_DOUBLE_EQ(amota(in), 1.0);  // still within the 2 m gate, no errors
}

TEST(Amotp, CraftedTwoFrameHandSum) {
    TrackEvalInput in;
    in.gt_frames = {{{0, 0, 0, 0}, {1, 10, 0, 0}}, {{0, 1, 0, 0}, {1, 11, 0, 0}}};
    in.hyp_frames = {{{100, 0.3, 0, 0.9, 0}, {101, 10.4, 0, 0.9, 0}},
                     {{100, 1.3, 0, 0.9, 0}, {101, 11.4, 0, 0.9, 0}}};
    // single threshold (all scores equal): recall 1, distances 0.3 and 0.4 per
    // frame -> AMOTP = (0.3+0.4+0.3+0.4)/4
    EXPECT_NEAR(amotp(in), 0.35, 1e-12);
}

TEST(Amota, IdentitySwitchAndFalsePositivesLowerScore) {
    auto in = perfect_tracking_scenario(4, 6);
    // identity switch mid-sequence on object 0
    for (size_t f = 3; f < in.hyp_frames.size(); ++f) in.hyp_frames[f][0].track_id = 99;
    // one stray hypothesis each frame
    for (auto& frame : in.hyp_frames) frame.push_back({55, 200.0, 200.0, 0.9, 0});
    const double a = amota(in);
    EXPECT_LT(a, 1.0);
    EXPECT_GE(a, 0.0);
}

TEST(Miou, BasicCases) {
    Tensor a = Tensor::zeros({4, 4});
    Tensor b = Tensor::zeros({4, 4});
    // identical nonempty masks
    a[0] = a[1] = 1.0;
    b[0] = b[1] = 1.0;
    EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0);
    // disjoint nonempty masks
    Tensor c = Tensor::zeros({4, 4});
    c[5] = 1.0;
    EXPECT_DOUBLE_EQ(mask_iou(a, c), 0.0);
    // both empty
    EXPECT_DOUBLE_EQ(mask_iou(Tensor::zeros({4, 4}), Tensor::zeros({4, 4})), 1.0);
    // half-overlapping rectangles: 8 and 8 cells with 4 shared -> 4/12
    Tensor r1 = Tensor::zeros({4, 4});
    Tensor r2 = Tensor::zeros({4, 4});
    for (int y = 0; y < 4; ++y) {
        r1[y * 4 + 0] = r1[y * 4 + 1] = 1.0;
        r2[y * 4 + 1] = r2[y * 4 + 2] = 1.0;
    }
    EXPECT_NEAR(mask_iou(r1, r2), 1.0 / 3.0, 1e-12);
}

TEST(MetricsReport, SchemaHasAllKeys) {
    TpErrors e = {0.3, 0.2, 0.1, 0.5, 0.0};
    auto j = metrics_report(0.5, e, nds(0.5, e), std::nullopt, std::nullopt, std::nullopt,
                            {{"vehicle_ap", 0.7}});
    for (const char* key :
         {"map", "mate", "mase", "maoe", "mave", "maae", "nds", "amota", "amotp", "miou", "per_class"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_TRUE(j["amota"].is_null());
    EXPECT_DOUBLE_EQ(j["per_class"]["vehicle_ap"].get<double>(), 0.7);
}
