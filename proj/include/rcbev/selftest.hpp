#pragma once

#include <filesystem>
#include <sstream>

#include "rcbev/experiments.hpp"
#include "rcbev/gradcheck.hpp"

namespace rcbev {

/// Runs the registered invariant and oracle checks, printing one line per
/// check. Returns the number of failures. The output is deterministic so two
/// runs of the same binary produce identical bytes.
inline int run_selftest(std::ostream& os) {
    int failures = 0;
    int count = 0;
    auto check = [&](const std::string& name, bool ok) {
        ++count;
        os << (ok ? "ok   " : "FAIL ") << name << "\n";
        if (!ok) ++failures;
    };
    auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };

    // --- numerics ---
    {
        Tensor y = softmax(Tensor({3}, {0.0, 0.0, 0.0}), 0);
        check("softmax.uniform", near(y[0], 1.0 / 3.0, 1e-15));
        Tensor big = softmax(Tensor({2}, {1000.0, 1000.0}), 0);
        check("softmax.stable", big[0] == 0.5 && big[1] == 0.5);
        Rng rng(1);
        Tensor x = randn({4, 6}, rng);
        Tensor s = softmax(x, 1);
        double worst = 0.0;
        for (int i = 0; i < 4; ++i) {
            double sum = 0.0;
            for (int j = 0; j < 6; ++j) sum += s.at(i, j);
            worst = std::max(worst, std::abs(sum - 1.0));
        }
        check("softmax.rows_stochastic", worst < 1e-12);
    }
    {
        LinearParams p(2, 2);
        p.weight.value = Tensor({2, 2}, {1, 1, 0, 1});
        p.bias.value = Tensor({2}, {0.5, 0.0});
        Tensor y = linear(Tensor({2}, {1.0, 2.0}), p);
        check("linear.hand_case", y[0] == 3.5 && y[1] == 2.0);
    }
    {
        LayerNormParams p(3);
        Tensor y = layer_norm(Tensor({3}, {1.0, 2.0, 3.0}), p);
        check("layer_norm.population_variance", near(y[2], std::sqrt(1.5), 1e-4) && near(y[1], 0.0, 1e-12));
    }
    {
        Rng rng(2);
        Tensor x = randn({2, 4, 4}, rng);
        check("conv3x3.identity_kernel", max_abs_diff(conv3x3(x, ConvParams::identity(2)), x) < 1e-15);
    }
    {
        Tensor f({1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
        Tensor v = bilinear_sample_vec(f, 0.5, 0.5);
        check("bilinear.cell_center_average", v[0] == 1.5);
        Tensor outside = bilinear_sample_vec(f, -3.0, 0.0);
        check("bilinear.outside_zero", outside[0] == 0.0);
    }
    {
        auto f = [](const Tensor& t) { return t[0] * t[0]; };
        Tensor g = finite_diff_gradient(f, Tensor({1}, {3.0}), 1e-5);
        check("finite_diff.quadratic", near(g[0], 6.0, 1e-8));
    }
    {
        Rng rng(3);
        Mlp m({3, 4, 2}, rng);
        Tensor x = randn({2, 3}, rng);
        Tensor w = randn({2, 2}, rng);
        auto loss_fn = [&]() {
            Tensor y = mlp_forward(x, m);
            double l = 0.0;
            for (int64_t i = 0; i < y.size(); ++i) l += y[i] * w[i];
            return l;
        };
        std::vector<NamedParam> params;
        m.collect(params, "m");
        zero_grads(params);
        MlpCache cache;
        mlp_forward(x, m, &cache);
        mlp_backward(m, cache, w);
        check("gradcheck.mlp", check_param_gradients(params, loss_fn).max_rel_error < 1e-5);
    }

    // --- radar ingest ---
    {
        RadarPointCloud pc;
        RadarPoint p;
        p.x = 1;
        p.y = 2;
        p.vx = 3;
        p.vy = 4;
        pc.points.push_back(p);
        auto f = augment(pc, Augment::flip_x());
        check("augment.flip_x", f.points[0].x == -1 && f.points[0].vx == -3 && f.points[0].vy == 4);
        auto ff = augment(f, Augment::flip_x());
        check("augment.flip_involution", ff.points[0].x == 1 && ff.points[0].vx == 3);
        auto r = augment(augment(pc, Augment::rotate(0.37)), Augment::rotate(-0.37));
        check("augment.rotate_roundtrip", near(r.points[0].x, 1.0, 1e-12) && near(r.points[0].y, 2.0, 1e-12));
    }
    {
        RadarPointCloud cur, prev;
        RadarPoint p;
        p.x = 2;
        p.y = 3;
        prev.points.push_back(p);
        EgoMotion m;
        m.tx = 1.0;
        auto acc = accumulate_sweeps({cur, prev}, {EgoMotion::identity(), m});
        check("accumulate.translation", acc.points[0].x == 3.0 && acc.points[0].sweep == 1);
    }
    {
        RadarPointCloud pc;
        for (int i = 0; i < 100; ++i) {
            RadarPoint p;
            p.x = i;
            pc.points.push_back(p);
        }
        auto a = perturb_xy(pc, 1.0, 7);
        auto b = perturb_xy(pc, 1.0, 7);
        bool same = true;
        for (size_t i = 0; i < 100; ++i) same = same && a.points[i].x == b.points[i].x;
        check("perturb.deterministic", same);
        check("drop.exact_count", drop_radar(pc, 0.5, 3).size() == 50 && drop_radar(pc, 1.0, 3).empty());
    }

    // --- RCS scattering ---
    {
        BEVGrid g = BEVGrid::centered(9, 9, 1.0, 1);
        ScatterParams sp;
        RadarPoint origin;
        origin.rcs = 5.0;
        auto fp = rcs_footprint(origin, g, sp);
        check("footprint.origin_single_pixel", fp.cells.size() == 1);
        RadarPoint neg;
        neg.x = 2;
        neg.y = 1;
        neg.rcs = -1.0;
        check("footprint.negative_rcs_delta", rcs_footprint(neg, g, sp).cells.size() == 1);
    }
    {
        BEVGrid g = BEVGrid::centered(9, 9, 1.0, 1);
        ScatterParams sp;
        sp.k_norm = 1.0;
        RadarPoint pt;
        pt.x = 2.0;
        pt.y = 1.0;
        pt.rcs = 1.0;
        Tensor m = gaussian_bev_map(pt, g, sp);
        double mx = 0.0;
        for (int64_t i = 0; i < m.size(); ++i) mx = std::max(mx, m[i]);
        check("gaussian_map.unit_peak", mx == 1.0);
    }
    {
        Rng rng(4);
        BEVGrid g = BEVGrid::centered(8, 8, 1.0, 1);
        ScatterParams sp;
        sp.k_norm = 0.05;
        const int n = 6;
        Tensor feats = randn({n, 2}, rng);
        std::vector<ScatterFootprint> fps;
        double mass_want = 0.0;
        for (int i = 0; i < n; ++i) {
            RadarPoint pt;
            pt.x = rng.uniform(-3, 3);
            pt.y = rng.uniform(-3, 3);
            pt.rcs = rng.uniform(0, 4);
            fps.push_back(rcs_footprint(pt, g, sp, i));
            mass_want += (feats.at(i, 0) + feats.at(i, 1)) * static_cast<double>(fps.back().cells.size());
        }
        Tensor grid = scatter_sum(feats, fps, 8, 8);
        Tensor ref = Tensor::zeros({2, 8, 8});
        for (int i = 0; i < n; ++i) {
            for (const auto& c : fps[static_cast<size_t>(i)].cells) {
                ref.at(0, c.py, c.px) += feats.at(i, 0);
                ref.at(1, c.py, c.px) += feats.at(i, 1);
            }
        }
        check("scatter.naive_oracle", max_abs_diff(grid, ref) == 0.0);
        double mass = 0.0;
        for (int64_t i = 0; i < grid.size(); ++i) mass += grid[i];
        check("scatter.mass_identity", near(mass, mass_want, 1e-9));
        Tensor merged = merge_gaussian_maps({Tensor::full({2, 2}, 0.25), Tensor::full({2, 2}, 0.75)}, 2, 2);
        check("merge.elementwise_max", merged[0] == 0.75);
    }

    // --- backbone ---
    {
        Tensor two({2, 2}, {0, 0, 3, 4});
        check("pairwise.hypotenuse", pairwise_distances(two).at(0, 1) == 5.0);
    }
    {
        Mlp ident;
        ident.layers.push_back(LinearParams::identity(2));
        Tensor f({3, 2}, {1, 5, 2, 4, 3, 3});
        Tensor out = point_block(f, ident);
        check("point_block.global_max", out.at(0, 2) == 3.0 && out.at(0, 3) == 5.0);
    }
    {
        Rng rng(5);
        DMSAParams p(2, 8, rng);
        p.beta_free.value.fill(0.0);
        Tensor f = randn({6, 8}, rng);
        Tensor d = pairwise_distances(randn({6, 2}, rng, 5.0));
        Tensor got = dmsa(f, d, p);
        // vanilla multi-head self-attention on the same projections
        Tensor vanilla = multi_head_attention(f, f, p.attn);
        check("dmsa.beta_zero_vanilla", max_abs_diff(got, vanilla) <= 1e-12);
        DMSAParams ph(1, 8, rng);
        ph.beta_free.value.fill(1e3);
        Tensor got_h = dmsa(f, d, ph);
        Tensor want_h = linear(linear(f, ph.attn.v_proj), ph.attn.out_proj);
        check("dmsa.huge_beta_self_only", max_abs_diff(got_h, want_h) < 1e-8);
    }
    {
        Rng rng(6);
        InjectionParams p(2, 4, 6, rng);
        p.gamma.value[0] = 0.0;
        Tensor fp = randn({3, 4}, rng);
        Tensor ft = randn({3, 6}, rng);
        check("injection.gamma_zero_identity", max_abs_diff(injection(fp, ft, p), fp) == 0.0);
    }
    {
        Rng rng(7);
        DualStreamConfig cfg;
        cfg.stages = 1;
        cfg.point_widths = {8};
        cfg.tf_width = 8;
        cfg.dmsa_heads = 2;
        cfg.exchange_heads = 2;
        DualStreamParams params(cfg, rng);
        RadarPointCloud pc;
        for (int i = 0; i < 5; ++i) {
            RadarPoint p;
            p.x = rng.uniform(-10, 10);
            p.y = rng.uniform(-10, 10);
            p.rcs = 1.0;
            pc.points.push_back(p);
        }
        Tensor out = dual_stream_forward(pc, params);
        check("backbone.output_width", out.dim(0) == 5 && out.dim(1) == cfg.out_dim());
        check("backbone.empty_cloud", dual_stream_forward(RadarPointCloud{}, params).dim(0) == 0);
    }

    // --- fusion ---
    {
        Rng rng(8);
        const int c = 3;
        DeformAttnParams p(1, 1, c, c, c, rng);
        p.value_proj.value.fill(0.0);
        p.out_weight.value.fill(0.0);
        for (int i = 0; i < c; ++i) {
            p.value_proj.value[static_cast<int64_t>(i) * c + i] = 1.0;
            p.out_weight.value[static_cast<int64_t>(i) * c + i] = 1.0;
        }
        Tensor grid = randn({c, 5, 5}, rng);
        Tensor queries = randn({1, c}, rng);
        Tensor refs({1, 2}, {1.3, 2.6});
        Tensor out = deform_cross_attn(queries, refs, grid, p);
        Tensor want = bilinear_sample_vec(grid, 1.3, 2.6);
        check("deform.degenerates_to_bilinear", near(out.at(0, 0), want[0], 1e-12));
    }
    {
        Rng rng(9);
        CamfAlignParams p(2, 4, 4, 1, 2, rng);
        p.cam_update.value_proj.value.fill(0.0);
        p.cam_update.out_weight.value.fill(0.0);
        p.rad_update.value_proj.value.fill(0.0);
        p.rad_update.out_weight.value.fill(0.0);
        Tensor fc = randn({2, 4, 4}, rng);
        Tensor fr = randn({2, 4, 4}, rng);
        auto [oc, orr] = camf_align(fc, fr, p);
        check("camf.residual_identity", max_abs_diff(oc, fc) <= 1e-12 && max_abs_diff(orr, fr) <= 1e-12);
    }
    {
        auto rows = run_bench({8, 16}, 8, 10);
        const double r0 = static_cast<double>(rows[0].vanilla_mults) / rows[0].deform_mults;
        const double r1 = static_cast<double>(rows[1].vanilla_mults) / rows[1].deform_mults;
        check("complexity.ratio_grows", r1 > 2.5 * r0);
    }
    {
        Rng rng(11);
        SparseAlignParams p(4, 4, 2, 2, 2, rng);
        p.deform.value_proj.value.fill(0.0);
        p.deform.out_weight.value.fill(0.0);
        p.radar_ca.v_proj.weight.value.fill(0.0);
        p.radar_ca.v_proj.bias.value.fill(0.0);
        p.radar_ca.out_proj.bias.value.fill(0.0);
        Tensor q = randn({3, 4}, rng);
        Tensor r = randn({3, 4}, rng);
        Tensor grid = randn({2, 4, 4}, rng);
        Tensor refs = rand_uniform({3, 2}, rng, 0.0, 3.0);
        auto [qo, ro] = sparse_align(q, r, grid, refs, p);
        check("sparse.residual_identity", max_abs_diff(qo, q) <= 1e-12 && max_abs_diff(ro, r) <= 1e-12);
        LinearParams sel(4, 8);
        for (int i = 0; i < 4; ++i) sel.weight.value.at(i, i) = 1.0;
        check("sparse.linear_fuse_selector", max_abs_diff(linear_fuse(q, r, sel), q) == 0.0);
    }

    // --- heads / tracker ---
    {
        Tensor logit({1}, {0.0});
        Tensor target({1}, {1.0});
        check("focal.closed_form",
              near(focal_loss(logit, target, 0.25, 2.0), 0.25 * 0.25 * std::log(2.0), 1e-12));
        Rng rng(12);
        Tensor lg = randn({8}, rng);
        Tensor tg({8});
        for (int i = 0; i < 8; ++i) tg[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
        double bce = 0.0;
        for (int i = 0; i < 8; ++i) {
            bce += tg[i] > 0.5 ? -log_sigmoid(lg[i]) : -log_sigmoid(-lg[i]);
        }
        check("focal.gamma0_is_bce", near(focal_loss(lg, tg, -1.0, 0.0), bce / 8.0, 1e-12));
    }
    {
        HeadChannels ch{1};
        BEVGrid geom = BEVGrid::centered(8, 8, 1.0, 1);
        Tensor maps = Tensor::full({ch.total(), 8, 8}, 0.0);
        for (int64_t i = 0; i < 64; ++i) maps.plane(0)[i] = -9.0;
        maps.at(0, 4, 4) = 3.0;
        auto dets = decode_detections(maps, geom, ch, 0.3, 2.0);
        check("decode.single_peak", dets.size() == 1 && dets[0].class_id == 0);
    }
    {
        int next_id = 0;
        Detection d;
        d.x = 0;
        d.vx = 4;
        d.score = 0.9;
        auto tracks = greedy_track({}, {d}, 0.5, {}, &next_id);
        Detection d2 = d;
        d2.x = 2;
        auto tracks2 = greedy_track(tracks, {d2}, 0.5, {}, &next_id);
        check("tracker.velocity_keeps_id", tracks2.size() == 1 && tracks2[0].id == tracks[0].id);
    }

    // --- synthetic world ---
    {
        SceneParams sp;
        auto objs = generate_scene(12, sp, 5);
        bool ok = objs.size() == 12;
        for (size_t i = 0; i < objs.size() && ok; ++i) {
            for (size_t j = i + 1; j < objs.size(); ++j) {
                const double d = std::hypot(objs[i].cx - objs[j].cx, objs[i].cy - objs[j].cy);
                if (d <= 0.5 * std::hypot(objs[i].w, objs[i].l) + 0.5 * std::hypot(objs[j].w, objs[j].l)) {
                    ok = false;
                }
            }
        }
        check("scene.non_overlap", ok);
        auto moved = step_scene(objs, 0.5);
        check("scene.step_linear", near(moved[0].cx, objs[0].cx + 0.5 * objs[0].vx, 1e-12));
    }
    {
        SceneParams sp;
        auto objs = generate_scene(4, sp, 6);
        CameraSimParams cp;
        BEVGrid a = render_camera_bev(objs, 16, 16, 4.0, cp, 3);
        BEVGrid b = render_camera_bev(objs, 16, 16, 4.0, cp, 3);
        check("camera.deterministic", max_abs_diff(a.data, b.data) == 0.0);
        BEVGrid dropped = drop_camera_views(a, 6, 1);
        check("camera.drop_all_zero", max_abs_diff(dropped.data, Tensor::zeros(a.data.shape())) == 0.0);
    }

    // --- metrics ---
    {
        check("nds.published_row_639",
              near(nds(0.550, {0.390, 0.234, 0.362, 0.259, 0.113}), 0.639, 0.0015));
        check("nds.published_row_727",
              near(nds(0.6734, {0.341, 0.234, 0.241, 0.147, 0.130}), 0.727, 0.0015));
        check("nds.perfect", nds(1.0, {0, 0, 0, 0, 0}) == 1.0);
        check("motar.hand_case", near(motar(0, 1, 5, 0.5, 10), 0.8, 1e-12));
    }
    {
        std::vector<SceneObject> gts = {SceneObject{}, SceneObject{}};
        gts[1].cx = 10.0;
        std::vector<Detection> preds;
        for (const auto& g : gts) {
            Detection d;
            d.x = g.cx;
            d.y = g.cy;
            d.score = 0.9;
            preds.push_back(d);
        }
        check("ap.perfect_detector", average_precision(preds, gts, 2.0) == 1.0);
        auto m = match_by_distance(preds, gts, 2.0);
        check("match.bookkeeping", m.fp + static_cast<int>(m.matches.size()) == 2 &&
                                       m.fn + static_cast<int>(m.matches.size()) == 2);
    }
    {
        Tensor a = Tensor::zeros({3, 3});
        Tensor b = Tensor::zeros({3, 3});
        a[0] = b[0] = 1.0;
        check("miou.identical", mask_iou(a, b) == 1.0);
        Tensor c = Tensor::zeros({3, 3});
        c[5] = 1.0;
        check("miou.disjoint", mask_iou(a, c) == 0.0);
    }

    // --- checkpoint / config ---
    {
        namespace fs = std::filesystem;
        const fs::path dir = fs::temp_directory_path() / "rcbev_selftest";
        fs::create_directories(dir);
        Rng rng(13);
        LinearParams p(3, 4);
        p.init(rng);
        std::vector<NamedParam> params;
        p.collect(params, "p");
        const std::string path = (dir / "ck.bin").string();
        save_checkpoint(params, path);
        LinearParams q(3, 4);
        std::vector<NamedParam> qparams;
        q.collect(qparams, "p");
        load_checkpoint(qparams, path);
        check("checkpoint.roundtrip", max_abs_diff(q.weight.value, p.weight.value) == 0.0);
        // corrupt the magic and expect rejection
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXXX", 5);
        f.close();
        bool threw = false;
        try {
            load_checkpoint(qparams, path);
        } catch (const std::exception&) {
            threw = true;
        }
        check("checkpoint.rejects_corruption", threw);
    }
    {
        ExperimentConfig cfg;
        cfg.seed = 17;
        cfg.fusion = "concat";
        cfg.lr = 0.00325;
        std::istringstream is(serialize_config(cfg));
        ExperimentConfig back = parse_config(is);
        check("config.roundtrip", back == cfg && serialize_config(back) == serialize_config(cfg));
        bool threw = false;
        try {
            std::istringstream bad("nonsense_key = 1\n");
            parse_config(bad);
        } catch (const std::exception&) {
            threw = true;
        }
        check("config.rejects_unknown_key", threw);
    }

    os << (failures == 0 ? "PASS" : "FAIL") << " " << (count - failures) << "/" << count
       << " checks\n";
    return failures;
}

}  // namespace rcbev
