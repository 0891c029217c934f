#include <gtest/gtest.h>

#include "rcbev/bev_fusion.hpp"
#include "rcbev/gradcheck.hpp"

using namespace rcbev;

namespace {

DeformAttnParams identity_single_point(int c) {
    Rng rng(1);
    DeformAttnParams p(1, 1, c, c, c, rng);
    p.value_proj.value.fill(0.0);
    p.out_weight.value.fill(0.0);
    for (int i = 0; i < c; ++i) {
        p.value_proj.value[static_cast<int64_t>(i) * c + i] = 1.0;   // W' = I
        p.out_weight.value[static_cast<int64_t>(i) * c + i] = 1.0;   // W = I
    }
    // offset and weight predictors are zero-initialized: identity sampling,
    // softmax over a single key = 1.
    return p;
}

void zero_update_path(DeformAttnParams& p) {
    p.value_proj.value.fill(0.0);
    p.out_weight.value.fill(0.0);
}

}  // namespace

TEST(DeformAttn, DegeneratesToBilinearSampling) {
    Rng rng(3);
    const int c = 3;
    DeformAttnParams p = identity_single_point(c);
    Tensor grid = randn({c, 5, 6}, rng);
    Tensor queries = randn({4, c}, rng);
    Tensor refs({4, 2}, {1.3, 2.6, 0.0, 0.0, 4.9, 3.1, 2.5, 2.5});
    Tensor out = deform_cross_attn(queries, refs, grid, p);
    for (int q = 0; q < 4; ++q) {
        Tensor want = bilinear_sample_vec(grid, refs.at(q, 0), refs.at(q, 1));
        for (int ch = 0; ch < c; ++ch) EXPECT_NEAR(out.at(q, ch), want[ch], 1e-12);
    }
}

TEST(DeformAttn, OutOfGridReferenceContributesZero) {
    Rng rng(4);
    const int c = 2;
    DeformAttnParams p = identity_single_point(c);
    Tensor grid = randn({c, 4, 4}, rng);
    Tensor queries = randn({1, c}, rng);
    Tensor refs({1, 2}, {-7.0, 10.5});
    Tensor out = deform_cross_attn(queries, refs, grid, p);
    EXPECT_DOUBLE_EQ(out.at(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(out.at(0, 1), 0.0);
}

TEST(DeformAttn, TwoPointHandEvaluation) {
    Rng rng(5);
    const int c = 2;
    DeformAttnParams p(1, 2, c, c, c, rng);
    // fixed offsets via predictor bias: k=0 -> (0.5, 0), k=1 -> (-1, 0.25)
    p.offset_pred.bias.value = Tensor({4}, {0.5, 0.0, -1.0, 0.25});
    // fixed attention logits 0.3 / -0.2
    p.weight_pred.bias.value = Tensor({2}, {0.3, -0.2});
    Tensor grid = randn({c, 4, 4}, rng);
    Tensor queries = randn({1, c}, rng);
    Tensor refs({1, 2}, {1.5, 2.0});
    Tensor out = deform_cross_attn(queries, refs, grid, p);

    const double e0 = std::exp(0.3), e1 = std::exp(-0.2);
    const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
    Tensor s0 = bilinear_sample_vec(grid, 2.0, 2.0);
    Tensor s1 = bilinear_sample_vec(grid, 0.5, 2.25);
    for (int ch = 0; ch < c; ++ch) {
        double want = 0.0;
        for (int e = 0; e < c; ++e) {
            double wv0 = 0.0, wv1 = 0.0;
            for (int cc = 0; cc < c; ++cc) {
                wv0 += p.value_proj.value[static_cast<int64_t>(e) * c + cc] * s0[cc];
                wv1 += p.value_proj.value[static_cast<int64_t>(e) * c + cc] * s1[cc];
            }
            want += p.out_weight.value[static_cast<int64_t>(ch) * c + e] * (a0 * wv0 + a1 * wv1);
        }
        EXPECT_NEAR(out.at(0, ch), want, 1e-12);
    }
}

TEST(DeformAttn, AttentionWeightsSumToOnePerHead) {
    Rng rng(6);
    DeformAttnParams p(2, 3, 4, 4, 4, rng);
    p.weight_pred.init(rng);  // non-trivial logits
    Tensor grid = randn({4, 4, 4}, rng);
    Tensor queries = randn({5, 4}, rng);
    Tensor refs = rand_uniform({5, 2}, rng, 0.0, 3.0);
    DeformAttnCache cache;
    deform_cross_attn(queries, refs, grid, p, &cache);
    for (int q = 0; q < 5; ++q) {
        for (int h = 0; h < 2; ++h) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += cache.attn.at(q, h * 3 + k);
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(CamfAlign, ZeroProjectionsGiveIdentity) {
    Rng rng(7);
    CamfAlignParams p(3, 4, 4, 2, 2, rng);
    zero_update_path(p.cam_update);
    zero_update_path(p.rad_update);
    Tensor fc = randn({3, 4, 4}, rng);
    Tensor fr = randn({3, 4, 4}, rng);
    auto [oc, orr] = camf_align(fc, fr, p);
    EXPECT_LE(max_abs_diff(oc, fc), 1e-12);
    EXPECT_LE(max_abs_diff(orr, fr), 1e-12);
}

TEST(CamfAlign, SharedParametersSwapSymmetry) {
    Rng rng(8);
    CamfAlignParams p(3, 4, 4, 2, 2, rng);
    // make both directions and both embeddings identical
    p.rad_update = p.cam_update;
    p.pe_rad.value = p.pe_cam.value;
    p.cam_update.offset_pred.bias.value = rand_uniform({2 * 2 * 2}, rng, -0.6, 0.6);
    p.rad_update.offset_pred.bias.value = p.cam_update.offset_pred.bias.value;
    Tensor fc = randn({3, 4, 4}, rng);
    Tensor fr = randn({3, 4, 4}, rng);
    auto [oc, orr] = camf_align(fc, fr, p);
    auto [oc2, or2] = camf_align(fr, fc, p);
    EXPECT_LE(max_abs_diff(oc2, orr), 1e-12);
    EXPECT_LE(max_abs_diff(or2, oc), 1e-12);
}

TEST(CamfAlign, MatchesOpByOpReference) {
    Rng rng(9);
    CamfAlignParams p(2, 4, 4, 2, 2, rng);
    p.cam_update.offset_pred.init(rng);
    p.rad_update.weight_pred.init(rng);
    Tensor fc = randn({2, 4, 4}, rng);
    Tensor fr = randn({2, 4, 4}, rng);
    auto [oc, orr] = camf_align(fc, fr, p);

    Tensor cam_pe = fc;
    cam_pe += p.pe_cam.value;
    Tensor rad_pe = fr;
    rad_pe += p.pe_rad.value;
    Tensor refs = detail::own_pixel_refs(4, 4);
    Tensor upd_c = deform_cross_attn(detail::grid_rows(rad_pe), refs, cam_pe, p.cam_update);
    Tensor upd_r = deform_cross_attn(detail::grid_rows(cam_pe), refs, rad_pe, p.rad_update);
    Tensor want_c = fc;
    want_c += detail::rows_to_grid(upd_c, 4, 4);
    Tensor want_r = fr;
    want_r += detail::rows_to_grid(upd_r, 4, 4);
    EXPECT_DOUBLE_EQ(max_abs_diff(oc, want_c), 0.0);
    EXPECT_DOUBLE_EQ(max_abs_diff(orr, want_r), 0.0);
}

TEST(ChannelSpatialFuse, ConstructedPassThroughReproducesConcat) {
    Rng rng(10);
    const int c = 2;
    ChannelSpatialFuseParams p;
    p.first = CbrParams(2 * c, 2 * c);  // zero conv -> residual passes concat through
    for (int i = 0; i < 3; ++i) p.rest.push_back(CbrParams::pass_through(2 * c));
    Tensor fc = rand_uniform({c, 4, 4}, rng, 0.0, 1.0);
    Tensor fr = rand_uniform({c, 4, 4}, rng, 0.0, 1.0);
    Tensor out = channel_spatial_fuse(fc, fr, p);
    EXPECT_LE(max_abs_diff(out, concat_channels(fc, fr)), 1e-15);
}

TEST(ChannelSpatialFuse, ZeroInputsGiveDeterministicBiasImage) {
    Rng rng(11);
    ChannelSpatialFuseParams p(4, 3, rng);
    Tensor z = Tensor::zeros({2, 5, 5});
    Tensor out1 = channel_spatial_fuse(z, z, p);
    Tensor out2 = channel_spatial_fuse(z, z, p);
    EXPECT_DOUBLE_EQ(max_abs_diff(out1, out2), 0.0);
    // constant over the interior (border differs due to padding)
    for (int ch = 0; ch < 3; ++ch) {
        EXPECT_DOUBLE_EQ(out1.at(ch, 2, 2), out1.at(ch, 2, 3));
    }
}

TEST(ChannelSpatialFuse, MatchesBlockByBlockReference) {
    Rng rng(12);
    ChannelSpatialFuseParams p(4, 3, rng);
    Tensor fc = randn({2, 4, 4}, rng);
    Tensor fr = randn({2, 4, 4}, rng);
    Tensor out = channel_spatial_fuse(fc, fr, p);
    Tensor h = concat_channels(fc, fr);
    Tensor r = cbr_forward(h, p.first);
    r += h;
    for (auto& b : p.rest) r = cbr_forward(r, b);
    EXPECT_DOUBLE_EQ(max_abs_diff(out, r), 0.0);
}

TEST(Complexity, DeformableScalesLinearlyVanillaQuadratically) {
    Rng rng(13);
    const int c = 8;
    VanillaCrossAttnParams vp(c, rng);
    DeformAttnParams dp(2, 4, c, c, c, rng);
    std::vector<double> ratios;
    for (int side : {8, 16, 32}) {
        Tensor q = randn({c, side, side}, rng, 0.1);
        Tensor v = randn({c, side, side}, rng, 0.1);
        OpCounter cv, cd;
        vanilla_cross_attn_dense(q, v, vp, &cv);
        Tensor refs = detail::own_pixel_refs(side, side);
        deform_cross_attn(detail::grid_rows(q), refs, v, dp, nullptr, &cd);
        ASSERT_GT(cd.mults, 0u);
        ratios.push_back(static_cast<double>(cv.mults) / static_cast<double>(cd.mults));
    }
    EXPECT_GT(ratios[1], ratios[0]);
    EXPECT_GT(ratios[2], ratios[1]);
    // side doubling quadruples HW; the vanilla/deformable ratio tracks it
    EXPECT_GE(ratios[2] / ratios[1], 3.5);
}

TEST(Complexity, CountsAreDeterministic) {
    Rng rng(14);
    const int c = 4;
    DeformAttnParams dp(2, 2, c, c, c, rng);
    OpCounter c1, c2;
    for (OpCounter* cnt : {&c1, &c2}) {
        Tensor q = randn({c, 8, 8}, rng, 0.1);  // different data each time
        Tensor v = randn({c, 8, 8}, rng, 0.1);
        Tensor refs = detail::own_pixel_refs(8, 8);
        deform_cross_attn(detail::grid_rows(q), refs, v, dp, nullptr, cnt);
    }
    EXPECT_EQ(c1.mults, c2.mults);
}

TEST(FusionGradients, DeformAttnIncludingBilinear) {
    for (uint64_t seed : {21ULL, 22ULL, 23ULL}) {
        Rng rng(seed);
        const int c = 3;
        DeformAttnParams p(2, 2, c, c, c, rng);
        // non-degenerate fractional sampling positions
        p.offset_pred.bias.value = rand_uniform({2 * 2 * 2}, rng, -0.8, 0.8);
        p.offset_pred.weight.value = randn({2 * 2 * 2, c}, rng, 0.05);
        p.weight_pred.init(rng);
        Tensor grid = randn({c, 5, 5}, rng);
        Tensor queries = randn({3, c}, rng);
        Tensor refs({3, 2}, {1.4, 1.7, 2.6, 0.3, 3.2, 3.8});

        Tensor w = randn({3, c}, rng);
        auto loss_fn = [&]() {
            Tensor y = deform_cross_attn(queries, refs, grid, p);
            double l = 0.0;
            for (int64_t i = 0; i < y.size(); ++i) l += y[i] * w[i];
            return l;
        };
        std::vector<NamedParam> params;
        p.collect(params, "da");
        for (auto& np : params) np.p->zero_grad();
        DeformAttnCache cache;
        deform_cross_attn(queries, refs, grid, p, &cache);
        auto [dq, dgrid] = deform_cross_attn_backward(p, cache, w);
        EXPECT_LT(check_param_gradients(params, loss_fn).max_rel_error, 1e-5) << "seed " << seed;
        EXPECT_LT(check_input_gradient(queries, dq, loss_fn), 1e-5);
        EXPECT_LT(check_input_gradient(grid, dgrid, loss_fn), 1e-5);
    }
}

TEST(FusionGradients, CamfAlignAndChannelSpatialFuse) {
    Rng rng(31);
    CamfAlignParams ap(2, 3, 3, 1, 2, rng);
    ap.cam_update.offset_pred.bias.value = rand_uniform({4}, rng, -0.7, 0.7);
    ap.rad_update.offset_pred.bias.value = rand_uniform({4}, rng, -0.7, 0.7);
    ap.cam_update.weight_pred.init(rng);
    ap.rad_update.weight_pred.init(rng);
    ChannelSpatialFuseParams fp(4, 3, rng);
    Tensor fc = randn({2, 3, 3}, rng);
    Tensor fr = randn({2, 3, 3}, rng);
    Tensor w = randn({3, 3, 3}, rng);
    auto loss_fn = [&]() {
        auto [oc, orr] = camf_align(fc, fr, ap);
        Tensor y = channel_spatial_fuse(oc, orr, fp);
        double l = 0.0;
        for (int64_t i = 0; i < y.size(); ++i) l += y[i] * w[i];
        return l;
    };
    std::vector<NamedParam> params;
    ap.collect(params, "align");
    fp.collect(params, "fuse");
    for (auto& np : params) np.p->zero_grad();
    CamfAlignCache ac;
    ChannelSpatialFuseCache fcache;
    auto [oc, orr] = camf_align(fc, fr, ap, &ac);
    channel_spatial_fuse(oc, orr, fp, &fcache);
    auto [doc, dorr] = channel_spatial_fuse_backward(fp, fcache, w);
    auto [dfc, dfr] = camf_align_backward(ap, ac, doc, dorr);
    EXPECT_LT(check_param_gradients(params, loss_fn).max_rel_error, 1e-5);
    EXPECT_LT(check_input_gradient(fc, dfc, loss_fn), 1e-5);
    EXPECT_LT(check_input_gradient(fr, dfr, loss_fn), 1e-5);
}
