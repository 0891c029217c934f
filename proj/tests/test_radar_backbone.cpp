#include <gtest/gtest.h>

#include "rcbev/gradcheck.hpp"
#include "rcbev/radar_backbone.hpp"

using namespace rcbev;

namespace {

/// Independent multi-head attention reference used to cross-check DMSA and the
/// exchange attention. Plain loops over heads/rows, its own softmax.
Tensor reference_mhsa(const Tensor& x_q, const Tensor& x_kv, const MultiHeadAttnParams& p,
                      const Tensor* dist = nullptr, const double* betas = nullptr) {
    const int nq = x_q.dim(0), nk = x_kv.dim(0);
    const int h = p.heads, d = p.head_dim();
    Tensor q = linear(x_q, p.q_proj), k = linear(x_kv, p.k_proj), v = linear(x_kv, p.v_proj);
    Tensor concat({nq, p.attn_dim()});
    for (int hd = 0; hd < h; ++hd) {
        for (int i = 0; i < nq; ++i) {
            std::vector<double> logits(static_cast<size_t>(nk));
            double mx = -1e300;
            for (int j = 0; j < nk; ++j) {
                double acc = 0.0;
                for (int kk = 0; kk < d; ++kk) acc += q.at(i, hd * d + kk) * k.at(j, hd * d + kk);
                acc /= std::sqrt(static_cast<double>(d));
                if (dist) acc -= betas[hd] * dist->at(i, j) * dist->at(i, j);
                logits[static_cast<size_t>(j)] = acc;
                mx = std::max(mx, acc);
            }
            double z = 0.0;
            for (double& l : logits) {
                l = std::exp(l - mx);
                z += l;
            }
            for (int kk = 0; kk < d; ++kk) {
                double acc = 0.0;
                for (int j = 0; j < nk; ++j) acc += logits[static_cast<size_t>(j)] / z * v.at(j, hd * d + kk);
                concat.at(i, hd * d + kk) = acc;
            }
        }
    }
    return linear(concat, p.out_proj);
}

RadarPointCloud random_cloud(int n, Rng& rng) {
    RadarPointCloud pc;
    for (int i = 0; i < n; ++i) {
        RadarPoint p;
        p.x = rng.uniform(-20, 20);
        p.y = rng.uniform(-20, 20);
        p.z = rng.normal() * 0.5;
        p.rcs = rng.uniform(0, 8);
        p.vx = rng.uniform(-5, 5);
        p.vy = rng.uniform(-5, 5);
        p.sweep = static_cast<int>(rng.uniform_int(3));
        pc.points.push_back(p);
    }
    return pc;
}

void zero_all(std::vector<NamedParam>& params) {
    for (auto& np : params) np.p->zero_grad();
}

}  // namespace

TEST(PairwiseDistances, BasicCases) {
    Tensor coincident({3, 2}, {1, 1, 1, 1, 1, 1});
    Tensor d = pairwise_distances(coincident);
    EXPECT_DOUBLE_EQ(max_abs_diff(d, Tensor::zeros({3, 3})), 0.0);

    Tensor two({2, 2}, {0, 0, 3, 4});
    Tensor d2 = pairwise_distances(two);
    EXPECT_DOUBLE_EQ(d2.at(0, 1), 5.0);
    EXPECT_DOUBLE_EQ(d2.at(1, 0), 5.0);
    EXPECT_DOUBLE_EQ(d2.at(0, 0), 0.0);
}

TEST(PairwiseDistances, MatchesBruteForce) {
    Rng rng(2);
    Tensor pts = randn({4, 2}, rng, 10.0);
    Tensor d = pairwise_distances(pts);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            const double dx = pts.at(i, 0) - pts.at(j, 0);
            const double dy = pts.at(i, 1) - pts.at(j, 1);
            EXPECT_NEAR(d.at(i, j), std::sqrt(dx * dx + dy * dy), 1e-12);
        }
    }
}

TEST(PointBlock, SinglePointDuplicatesItself) {
    Mlp m;
    m.layers.push_back(LinearParams::identity(3));
    Tensor f({1, 3}, {0.4, -1.0, 2.5});
    Tensor out = point_block(f, m);
    ASSERT_EQ(out.dim(1), 6);
    for (int j = 0; j < 3; ++j) {
        EXPECT_DOUBLE_EQ(out.at(0, j), f.at(0, j));
        EXPECT_DOUBLE_EQ(out.at(0, 3 + j), f.at(0, j));
    }
}

TEST(PointBlock, IdenticalPointsGiveIdenticalRows) {
    Rng rng(4);
    Mlp m({3, 4, 4}, rng);
    Tensor f({2, 3}, {0.1, 0.2, 0.3, 0.1, 0.2, 0.3});
    Tensor out = point_block(f, m);
    for (int j = 0; j < out.dim(1); ++j) EXPECT_DOUBLE_EQ(out.at(0, j), out.at(1, j));
}

TEST(PointBlock, GlobalHalfIsColumnwiseMax) {
    Mlp m;
    m.layers.push_back(LinearParams::identity(3));
    Rng rng(5);
    Tensor f = randn({3, 3}, rng);
    Tensor out = point_block(f, m);
    for (int j = 0; j < 3; ++j) {
        double mx = std::max({f.at(0, j), f.at(1, j), f.at(2, j)});
        for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(out.at(i, 3 + j), mx);
    }
}

TEST(PointBlock, EmptyCloudGivesEmptyOutput) {
    Rng rng(6);
    Mlp m({3, 4, 4}, rng);
    Tensor out = point_block(Tensor::zeros({0, 3}), m);
    EXPECT_EQ(out.dim(0), 0);
    EXPECT_EQ(out.dim(1), 8);
}

TEST(Dmsa, ZeroBetaEqualsVanillaSelfAttention) {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const int n = 2 + static_cast<int>(rng.uniform_int(10));
        DMSAParams p(4, 8, rng);
        p.beta_free.value.fill(0.0);
        Tensor f = randn({n, 8}, rng);
        Tensor coords = randn({n, 2}, rng, 10.0);
        Tensor d = pairwise_distances(coords);
        Tensor got = dmsa(f, d, p);
        const double betas[4] = {0, 0, 0, 0};
        Tensor want = reference_mhsa(f, f, p.attn, &d, betas);
        EXPECT_LE(max_abs_diff(got, want), 1e-12) << "seed " << seed;
        // and the same reference without any modulation term at all
        Tensor vanilla = reference_mhsa(f, f, p.attn);
        EXPECT_LE(max_abs_diff(got, vanilla), 1e-12);
    }
}

TEST(Dmsa, HugeBetaCollapsesToSelfValueProjection) {
    Rng rng(77);
    const int n = 6;
    DMSAParams p(2, 8, rng);
    p.beta_free.value.fill(1e3);  // beta = 1e6
    RadarPointCloud pc = random_cloud(n, rng);
    Tensor f = randn({n, 8}, rng);
    Tensor d = pairwise_distances(point_coords(pc));
    Tensor got = dmsa(f, d, p);
    // row i should be the output projection of point i's own value projection
    Tensor v = linear(f, p.attn.v_proj);
    Tensor want = linear(v, p.attn.out_proj);
    EXPECT_LT(max_abs_diff(got, want), 1e-8);
}

TEST(Dmsa, ScalarFormulaOracle) {
    // N=3, H=1, d=1: every projection is a scalar multiply; evaluate the
    // formula with plain doubles.
    Rng rng(1);
    DMSAParams p(1, 1, rng);
    p.attn.q_proj.weight.value[0] = 0.7;
    p.attn.k_proj.weight.value[0] = -1.3;
    p.attn.v_proj.weight.value[0] = 0.9;
    p.attn.out_proj.weight.value[0] = 1.1;
    p.attn.q_proj.bias.value[0] = 0.05;
    p.attn.k_proj.bias.value[0] = -0.1;
    p.attn.v_proj.bias.value[0] = 0.2;
    p.attn.out_proj.bias.value[0] = 0.0;
    p.beta_free.value[0] = 1.0;  // beta = 1

    Tensor f({3, 1}, {0.5, -0.25, 1.5});
    Tensor d({3, 3}, {0, 1, 2, 1, 0, 1.5, 2, 1.5, 0});
    Tensor got = dmsa(f, d, p);

    for (int i = 0; i < 3; ++i) {
        double q = 0.7 * f.at(i, 0) + 0.05;
        double num = 0.0, den = 0.0, mx = -1e300;
        double logits[3], vals[3];
        for (int j = 0; j < 3; ++j) {
            double k = -1.3 * f.at(j, 0) - 0.1;
            logits[j] = q * k / 1.0 - 1.0 * d.at(i, j) * d.at(i, j);
            vals[j] = 0.9 * f.at(j, 0) + 0.2;
            mx = std::max(mx, logits[j]);
        }
        for (int j = 0; j < 3; ++j) {
            const double e = std::exp(logits[j] - mx);
            num += e * vals[j];
            den += e;
        }
        EXPECT_NEAR(got.at(i, 0), 1.1 * (num / den), 1e-12);
    }
}

TEST(Dmsa, AttentionRowsAreStochasticAndLogRatioScalesWithBeta) {
    Rng rng(9);
    const int n = 5;
    DMSAParams p(1, 4, rng);
    p.beta_free.value[0] = 1.0;
    Tensor f = randn({n, 4}, rng);
    Tensor d = pairwise_distances(randn({n, 2}, rng, 3.0));

    DMSACache cache;
    dmsa(f, d, p, &cache);
    const Tensor& a = cache.attn.attn[0];
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += a.at(i, j);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }

    // log(w_ij / w_ik) = q_i . (k_j - k_k)/sqrt(d) - beta (D_ij^2 - D_ik^2)
    const Tensor& q = cache.attn.q;
    const Tensor& k = cache.attn.k;
    const double beta = p.beta(0);
    const int dd = p.attn.head_dim();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            for (int kk = 0; kk < n; ++kk) {
                double dot = 0.0;
                for (int e = 0; e < dd; ++e) dot += q.at(i, e) * (k.at(j, e) - k.at(kk, e));
                const double want =
                    dot / std::sqrt(static_cast<double>(dd)) -
                    beta * (d.at(i, j) * d.at(i, j) - d.at(i, kk) * d.at(i, kk));
                EXPECT_NEAR(std::log(a.at(i, j) / a.at(i, kk)), want, 1e-9);
            }
        }
    }

    // doubling beta doubles the distance term of the log ratio
    DMSAParams p2 = p;
    p2.beta_free.value[0] = std::sqrt(2.0);  // beta = 2
    DMSACache cache2;
    dmsa(f, d, p2, &cache2);
    const Tensor& a2 = cache2.attn.attn[0];
    const int i = 1, j = 0, kk = 3;
    double dot = 0.0;
    for (int e = 0; e < dd; ++e) dot += q.at(i, e) * (k.at(j, e) - k.at(kk, e));
    dot /= std::sqrt(static_cast<double>(dd));
    const double dist_term1 = std::log(a.at(i, j) / a.at(i, kk)) - dot;
    const double dist_term2 = std::log(a2.at(i, j) / a2.at(i, kk)) - dot;
    EXPECT_NEAR(dist_term2, 2.0 * dist_term1, 1e-9);
}

TEST(Injection, GammaZeroIsIdentity) {
    Rng rng(11);
    InjectionParams p(2, 4, 6, rng);
    p.gamma.value[0] = 0.0;
    Tensor fp = randn({3, 4}, rng);
    Tensor ft = randn({3, 6}, rng);
    EXPECT_DOUBLE_EQ(max_abs_diff(injection(fp, ft, p), fp), 0.0);
}

TEST(Injection, SingleKeySoftmaxIsOne) {
    Rng rng(12);
    InjectionParams p(2, 4, 6, rng);
    p.gamma.value[0] = 0.8;
    Tensor fp = randn({1, 4}, rng);
    Tensor ft = randn({1, 6}, rng);
    Tensor got = injection(fp, ft, p);
    // attention weight over one key is exactly 1
    Tensor nkv = layer_norm(ft, p.ln_kv);
    Tensor want = linear(linear(nkv, p.attn.v_proj), p.attn.out_proj);
    for (int j = 0; j < 4; ++j) {
        EXPECT_NEAR(got.at(0, j), fp.at(0, j) + 0.8 * want.at(0, j), 1e-12);
    }
}

TEST(Injection, TwoPointOracle) {
    Rng rng(13);
    InjectionParams p(2, 4, 6, rng);
    p.gamma.value[0] = 0.5;
    Tensor fp = randn({2, 4}, rng);
    Tensor ft = randn({2, 6}, rng);
    Tensor got = injection(fp, ft, p);
    Tensor ca = reference_mhsa(layer_norm(fp, p.ln_q), layer_norm(ft, p.ln_kv), p.attn);
    for (int64_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], fp[i] + 0.5 * ca[i], 1e-12);
}

TEST(Extraction, IdentityFfnAndZeroValueProjection) {
    Rng rng(14);
    ExtractionParams p(2, 4, 6, 8, rng);
    p.attn.v_proj.weight.value.fill(0.0);
    p.attn.v_proj.bias.value.fill(0.0);
    p.attn.out_proj.bias.value.fill(0.0);
    // FFN computing the identity: relu(x) - relu(-x) = x
    p.ffn = Mlp();
    LinearParams l1(8, 4), l2(4, 8);
    for (int i = 0; i < 4; ++i) {
        l1.weight.value.at(i, i) = 1.0;
        l1.weight.value.at(4 + i, i) = -1.0;
        l2.weight.value.at(i, i) = 1.0;
        l2.weight.value.at(i, 4 + i) = -1.0;
    }
    p.ffn.layers.push_back(std::move(l1));
    p.ffn.layers.push_back(std::move(l2));

    Tensor ft = randn({3, 4}, rng);
    Tensor fp = randn({3, 6}, rng);
    EXPECT_LT(max_abs_diff(extraction(ft, fp, p), ft), 1e-12);
}

TEST(Extraction, SingleKeyInnerTerm) {
    Rng rng(15);
    ExtractionParams p(1, 4, 6, 8, rng);
    Tensor ft = randn({1, 4}, rng);
    Tensor fp = randn({1, 6}, rng);
    Tensor got = extraction(ft, fp, p);
    Tensor nkv = layer_norm(fp, p.ln_kv);
    Tensor inner = linear(linear(nkv, p.attn.v_proj), p.attn.out_proj);
    inner += ft;
    Tensor want = mlp_forward(inner, p.ffn);
    EXPECT_LT(max_abs_diff(got, want), 1e-12);
}

TEST(Extraction, TwoPointOracle) {
    Rng rng(16);
    ExtractionParams p(2, 4, 6, 8, rng);
    Tensor ft = randn({2, 4}, rng);
    Tensor fp = randn({2, 6}, rng);
    Tensor got = extraction(ft, fp, p);
    Tensor ca = reference_mhsa(layer_norm(ft, p.ln_q), layer_norm(fp, p.ln_kv), p.attn);
    ca += ft;
    Tensor want = mlp_forward(ca, p.ffn);
    EXPECT_LT(max_abs_diff(got, want), 1e-12);
}

namespace {

DualStreamConfig small_backbone_config() {
    DualStreamConfig cfg;
    cfg.stages = 2;
    cfg.point_widths = {8, 16};
    cfg.tf_width = 8;
    cfg.dmsa_heads = 2;
    cfg.exchange_heads = 2;
    cfg.sweep_count = 3;
    return cfg;
}

}  // namespace

TEST(DualStream, DecoupledStreamsWithZeroedExchange) {
    Rng rng(21);
    DualStreamConfig cfg = small_backbone_config();
    cfg.stages = 1;
    cfg.point_widths = {8};
    DualStreamParams params(cfg, rng);
    auto& st = params.stages[0];
    st.inject.gamma.value[0] = 0.0;
    st.extract.attn.v_proj.weight.value.fill(0.0);
    st.extract.attn.v_proj.bias.value.fill(0.0);
    st.extract.attn.out_proj.bias.value.fill(0.0);

    Rng crng(1);
    RadarPointCloud pc = random_cloud(5, crng);
    Tensor out = dual_stream_forward(pc, params);

    // independent stream outputs computed op by op
    Tensor feats = point_features(pc, cfg.sweep_count, cfg.include_z);
    Tensor d = pairwise_distances(point_coords(pc));
    Tensor p_ref = point_block(feats, st.point_mlp);
    Tensor t0 = linear(feats, params.tf_embed);
    Tensor a = dmsa(layer_norm(t0, st.tf_ln), d, st.dmsa);
    a += t0;
    Tensor t_ref = mlp_forward(a, st.extract.ffn);

    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 8; ++j) EXPECT_NEAR(out.at(i, j), p_ref.at(i, j), 1e-12);
        for (int j = 0; j < 8; ++j) EXPECT_NEAR(out.at(i, 8 + j), t_ref.at(i, j), 1e-12);
    }
}

TEST(DualStream, PermutationEquivariant) {
    Rng rng(22);
    DualStreamParams params(small_backbone_config(), rng);
    Rng crng(2);
    RadarPointCloud pc = random_cloud(6, crng);
    Tensor out = dual_stream_forward(pc, params);

    std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    RadarPointCloud shuffled;
    for (int idx : perm) shuffled.points.push_back(pc.points[static_cast<size_t>(idx)]);
    Tensor out_s = dual_stream_forward(shuffled, params);
    for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < out.dim(1); ++j) {
            EXPECT_NEAR(out_s.at(i, j), out.at(perm[static_cast<size_t>(i)], j), 1e-10);
        }
    }
}

TEST(DualStream, MatchesStageByStageReference) {
    Rng rng(23);
    DualStreamConfig cfg = small_backbone_config();
    cfg.stages = 3;
    cfg.point_widths = {8, 16, 32};
    DualStreamParams params(cfg, rng);
    Rng crng(3);
    RadarPointCloud pc = random_cloud(5, crng);
    Tensor out = dual_stream_forward(pc, params);

    Tensor feats = point_features(pc, cfg.sweep_count, cfg.include_z);
    Tensor d = pairwise_distances(point_coords(pc));
    Tensor fp = feats;
    Tensor ft = linear(feats, params.tf_embed);
    for (auto& st : params.stages) {
        Tensor p1 = point_block(fp, st.point_mlp);
        Tensor a = dmsa(layer_norm(ft, st.tf_ln), d, st.dmsa);
        a += ft;
        Tensor p2 = injection(p1, a, st.inject);
        ft = extraction(a, p2, st.extract);
        fp = p2;
    }
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < fp.dim(1); ++j) EXPECT_DOUBLE_EQ(out.at(i, j), fp.at(i, j));
        for (int j = 0; j < ft.dim(1); ++j) EXPECT_DOUBLE_EQ(out.at(i, fp.dim(1) + j), ft.at(i, j));
    }
}

TEST(DualStream, EmptyCloudShortCircuits) {
    Rng rng(24);
    DualStreamParams params(small_backbone_config(), rng);
    Tensor out = dual_stream_forward(RadarPointCloud{}, params);
    EXPECT_EQ(out.dim(0), 0);
    EXPECT_EQ(out.dim(1), params.cfg.out_dim());
}

TEST(BackboneGradients, OpLevel) {
    for (uint64_t seed : {31ULL, 32ULL}) {
        Rng rng(seed);
        // point_block
        {
            Mlp m({3, 4, 4}, rng);
            Tensor f = randn({4, 3}, rng);
            Tensor w = randn({4, 8}, rng);
            auto loss_fn = [&]() {
                Tensor y = point_block(f, m);
                double l = 0.0;
                for (int64_t i = 0; i < y.size(); ++i) l += y[i] * w[i];
                return l;
            };
            std::vector<NamedParam> params;
            m.collect(params, "pb");
            zero_all(params);
            PointBlockCache cache;
            point_block(f, m, &cache);
            Tensor df = point_block_backward(m, cache, w);
            EXPECT_LT(check_param_gradients(params, loss_fn).max_rel_error, 1e-5);
            EXPECT_LT(check_input_gradient(f, df, loss_fn), 1e-5);
        }
        // dmsa
        {
            DMSAParams p(2, 6, rng);
            p.beta_free.value = rand_uniform({2}, rng, 0.5, 1.5);
            Tensor f = randn({5, 6}, rng);
            Tensor d = pairwise_distances(randn({5, 2}, rng, 2.0));
            Tensor w = randn({5, 6}, rng);
            auto loss_fn = [&]() {
                Tensor y = dmsa(f, d, p);
                double l = 0.0;
                for (int64_t i = 0; i < y.size(); ++i) l += y[i] * w[i];
                return l;
            };
            std::vector<NamedParam> params;
            p.collect(params, "dmsa");
            zero_all(params);
            DMSACache cache;
            dmsa(f, d, p, &cache);
            Tensor df = dmsa_backward(p, cache, w);
            EXPECT_LT(check_param_gradients(params, loss_fn).max_rel_error, 1e-5);
            EXPECT_LT(check_input_gradient(f, df, loss_fn), 1e-5);
        }
        // injection
        {
            InjectionParams p(2, 4, 6, rng);
            p.gamma.value[0] = 0.7;
            Tensor fp = randn({3, 4}, rng);
            Tensor ft = randn({3, 6}, rng);
            Tensor w = randn({3, 4}, rng);
            auto loss_fn = [&]() {
                Tensor y = injection(fp, ft, p);
                double l = 0.0;
                for (int64_t i = 0; i < y.size(); ++i) l += y[i] * w[i];
                return l;
            };
            std::vector<NamedParam> params;
            p.collect(params, "inj");
            zero_all(params);
            InjectionCache cache;
            injection(fp, ft, p, &cache);
            auto [dfp, dft] = injection_backward(p, cache, w);
            EXPECT_LT(check_param_gradients(params, loss_fn).max_rel_error, 1e-5);
            EXPECT_LT(check_input_gradient(fp, dfp, loss_fn), 1e-5);
            EXPECT_LT(check_input_gradient(ft, dft, loss_fn), 1e-5);
        }
        // extraction
        {
            ExtractionParams p(2, 4, 6, 8, rng);
            Tensor ft = randn({3, 4}, rng);
            Tensor fp = randn({3, 6}, rng);
            Tensor w = randn({3, 4}, rng);
            auto loss_fn = [&]() {
                Tensor y = extraction(ft, fp, p);
                double l = 0.0;
                for (int64_t i = 0; i < y.size(); ++i) l += y[i] * w[i];
                return l;
            };
            std::vector<NamedParam> params;
            p.collect(params, "ext");
            zero_all(params);
            ExtractionCache cache;
            extraction(ft, fp, p, &cache);
            auto [dft, dfp] = extraction_backward(p, cache, w);
            EXPECT_LT(check_param_gradients(params, loss_fn).max_rel_error, 1e-5);
            EXPECT_LT(check_input_gradient(ft, dft, loss_fn), 1e-5);
            EXPECT_LT(check_input_gradient(fp, dfp, loss_fn), 1e-5);
        }
    }
}

TEST(BackboneGradients, FullForwardBackward) {
    Rng rng(41);
    DualStreamConfig cfg = small_backbone_config();
    DualStreamParams params(cfg, rng);
    Rng crng(5);
    RadarPointCloud pc = random_cloud(4, crng);
    Tensor w = randn({4, cfg.out_dim()}, rng);

    auto loss_fn = [&]() {
        Tensor y = dual_stream_forward(pc, params);
        double l = 0.0;
        for (int64_t i = 0; i < y.size(); ++i) l += y[i] * w[i];
        return l;
    };
    std::vector<NamedParam> all;
    params.collect(all, "bb");
    zero_all(all);
    DualStreamCache cache;
    dual_stream_forward(pc, params, &cache);
    dual_stream_backward(params, cache, w);
    auto report = check_param_gradients(all, loss_fn);
    EXPECT_LT(report.max_rel_error, 1e-5);
}
