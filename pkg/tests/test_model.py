import numpy as np
import pytest

import helpers
from hnet import model as mdl
from hnet import ot
from hnet import tensor as t

TINY = mdl.ModelConfig(height=8, width=16, widths=(4, 8), scales=2, attention="off")
TINY3 = mdl.ModelConfig(height=8, width=16, widths=(4, 6, 8), scales=3,
                        attention="ot-mea",
                        sinkhorn=ot.SinkhornConfig(epsilon=0.1, max_iters=25, tol=0.0))


class TestConfig:
    def test_rejects_indivisible_size(self):
        with pytest.raises(ValueError, match="divisible"):
            mdl.ModelConfig(height=10, width=16, widths=(4, 8), scales=2,
                            attention="off")

    def test_rejects_too_many_scales(self):
        with pytest.raises(ValueError, match="scales"):
            mdl.ModelConfig(height=8, width=16, widths=(4, 8), scales=3,
                            attention="off")

    def test_attention_needs_three_stages(self):
        with pytest.raises(ValueError, match="3 stages"):
            mdl.ModelConfig(height=8, width=16, widths=(4, 8), scales=2,
                            attention="ot-mea")

    def test_unknown_attention(self):
        with pytest.raises(ValueError, match="attention"):
            mdl.ModelConfig(height=8, width=16, widths=(4, 8), scales=2,
                            attention="fancy")

    def test_table_family_constructible(self):
        # SE-SD plus each attention variant plus the full model
        for mode in ("off", "eg-mea", "eg-mnl", "ot-mnl", "ot-mea"):
            cfg = mdl.ModelConfig(height=16, width=16, widths=(4, 6, 8), scales=3,
                                  attention=mode)
            assert mdl.build(cfg, 0) is not None


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a = mdl.build(TINY3, 5)
        b = mdl.build(TINY3, 5)
        assert a.names() == b.names()
        for n in a.names():
            assert np.array_equal(a.arrays[n], b.arrays[n])

    def test_different_seed_differs(self):
        a = mdl.build(TINY, 1)
        b = mdl.build(TINY, 2)
        assert any(not np.array_equal(a.arrays[n], b.arrays[n]) for n in a.names())

    def test_value_projections_start_zero(self):
        p = mdl.build(TINY3, 0)
        v_names = [n for n in p.names() if ".conv_v." in n]
        assert v_names
        for n in v_names:
            assert np.all(p.arrays[n] == 0.0)

    def test_matches_analytic_count(self):
        # hand count for widths (4,8), scales 2, no attention:
        # enc0: 4*3*9+4 + 4*4*9+4 + 4*3+4 ; enc1: 8*4*9+8 + 8*8*9+8 + 8*4+8
        enc = (108 + 4) + (144 + 4) + (12 + 4) + (288 + 8) + (576 + 8) + (32 + 8)
        fuse = 2 * (8 * 16 * 9 + 8)
        # dec0: in 8 up + skip 4 = 12 -> 4 ; dec1: in 4 -> 4
        dec0 = (4 * 12 * 9 + 4) + (4 * 4 * 9 + 4) + (4 * 12 + 4)
        dec1 = (4 * 4 * 9 + 4) + (4 * 4 * 9 + 4) + (4 * 4 + 4)
        heads = (1 * 4 * 9 + 1) * 2
        expect = enc + fuse + dec0 + dec1 + heads
        params = mdl.build(TINY, 0)
        assert mdl.param_count(params) == expect
        comps = mdl.expected_param_count(TINY)
        assert comps["total"] == expect
        assert comps["attention"] == 0

    def test_eg_vs_ot_differ_by_mass_convs(self):
        base = dict(height=16, width=16, widths=(4, 6, 8), scales=3)
        eg = mdl.expected_param_count(mdl.ModelConfig(attention="eg-mea", **base))
        ots = mdl.expected_param_count(mdl.ModelConfig(attention="ot-mea", **base))
        mass = sum(2 * (c + 1) for _, c in
                   mdl.attention_sites(mdl.ModelConfig(attention="ot-mea", **base)))
        assert ots["total"] - eg["total"] == mass
        assert ots["encoder"] == eg["encoder"]

    def test_attention_increment_is_isolated(self):
        base = dict(height=16, width=16, widths=(4, 6, 8), scales=3)
        off = mdl.expected_param_count(mdl.ModelConfig(attention="off", **base))
        on = mdl.expected_param_count(mdl.ModelConfig(attention="ot-mea", **base))
        assert on["total"] - off["total"] == on["attention"]
        for comp in ("encoder", "fusion", "decoder", "heads"):
            assert on[comp] == off[comp]

    def test_doubling_widths_quadruples_attention_weight_matrices(self):
        base = dict(height=32, width=32, scales=3, attention="ot-mea")
        small = mdl.ModelConfig(widths=(4, 6, 8), **base)
        big = mdl.ModelConfig(widths=(8, 12, 16), **base)

        def square_weight_count(cfg):
            return sum(int(np.prod(shape))
                       for name, shape in mdl.param_shapes(cfg).items()
                       if name.startswith("att.") and name.endswith("conv_v.w"))

        assert square_weight_count(big) == 4 * square_weight_count(small)


class TestDepthTransform:
    def test_endpoints(self):
        assert mdl.sigmoid_to_depth(np.array(1.0)) == pytest.approx(0.1, abs=1e-12)
        assert mdl.sigmoid_to_depth(np.array(0.0)) == pytest.approx(100.0, abs=1e-9)

    def test_midpoint(self):
        d = mdl.sigmoid_to_depth(np.array(0.5))
        assert d == pytest.approx(1.0 / (9.99 * 0.5 + 0.01), abs=1e-12)

    def test_monotone_decreasing(self):
        om = np.linspace(0.0, 1.0, 101)
        d = mdl.sigmoid_to_depth(om)
        assert np.all(np.diff(d) < 0)

    def test_bounds_hold_exactly(self):
        om = np.concatenate([[0.0, 1.0], t.make_rng(0).random(1000)])
        d = mdl.sigmoid_to_depth(om)
        assert np.all(d >= 0.1) and np.all(d <= 100.0)

    def test_disparity_round_trip(self):
        assert mdl.depth_to_disparity(np.array(4.0), 10, 2) == 5.0
        rng = t.make_rng(1)
        depth = rng.uniform(0.1, 100.0, size=(1, 4, 4))
        disp = mdl.depth_to_disparity(depth, 35.0, 0.3)
        back = mdl.disparity_to_depth(disp, 35.0, 0.3)
        np.testing.assert_allclose(back, depth, rtol=1e-12)

    def test_min_disparity_at_far_plane(self):
        assert mdl.depth_to_disparity(np.array(100.0), 10, 2) == pytest.approx(0.2)


class TestForward:
    def test_scale_shapes_halve(self):
        params = mdl.build(TINY3, 3)
        il, ir = helpers.images_for(TINY3, 0)
        sl, sr = mdl.forward(il, ir, params)
        assert len(sl) == len(sr) == 3
        for s in range(3):
            hs, ws = 8 >> s, 16 >> s
            assert sl[s].shape == (1, hs, ws)
            assert sr[s].shape == (1, hs, ws)

    def test_outputs_in_unit_interval(self):
        params = mdl.build(TINY3, 4)
        il, ir = helpers.images_for(TINY3, 1)
        sl, sr = mdl.forward(il, ir, params)
        for o in sl + sr:
            assert np.all(o >= 0) and np.all(o <= 1)

    def test_shared_encoder_on_equal_inputs(self):
        params = mdl.build(TINY3, 5)
        il, _ = helpers.images_for(TINY3, 2)
        _, _, feats = mdl.forward(il, il.copy(), params, want_features=True)
        for fl, fr in zip(feats["enc_left"], feats["enc_right"]):
            assert np.array_equal(fl, fr)

    def test_weight_sharing_single_storage(self):
        params = mdl.build(TINY3, 6)
        # no branch-specific encoder/decoder copies exist
        assert not any(".left" in n or ".right" in n
                       for n in params.names() if not n.startswith("fuse."))
        il, ir = helpers.images_for(TINY3, 3)
        _, _, base = mdl.forward(il, ir, params, want_features=True)
        params.arrays["enc0.conv1.w"][0, 0, 0, 0] += 0.05
        _, _, pert = mdl.forward(il, ir, params, want_features=True)
        dl = np.abs(base["enc_left"][0] - pert["enc_left"][0]).max()
        dr = np.abs(base["enc_right"][0] - pert["enc_right"][0]).max()
        assert dl > 0 and dr > 0  # one mutation moves both branches

    def test_identity_at_init_bitwise(self):
        base = dict(height=8, width=16, widths=(4, 6, 8), scales=3)
        cfg_off = mdl.ModelConfig(attention="off", **base)
        il, ir = helpers.images_for(cfg_off, 4)
        off = mdl.forward(il, ir, mdl.build(cfg_off, 11))
        for mode in ("eg-mea", "ot-mea", "eg-mnl", "ot-mnl"):
            cfg_on = mdl.ModelConfig(attention=mode, **base)
            on = mdl.forward(il, ir, mdl.build(cfg_on, 11))
            for a, b in zip(off[0] + off[1], on[0] + on[1]):
                assert np.array_equal(a, b)

    def test_rejects_bad_shape_and_range(self):
        params = mdl.build(TINY, 0)
        il, ir = helpers.images_for(TINY, 5)
        with pytest.raises(ValueError, match="must be"):
            mdl.forward(il[:, :4], ir, params)
        with pytest.raises(ValueError, match="0,1"):
            mdl.forward(il + 1.0, ir, params)

    def test_forward_deterministic(self):
        params = mdl.build(TINY3, 7)
        il, ir = helpers.images_for(TINY3, 6)
        a = mdl.forward(il, ir, params)
        b = mdl.forward(il, ir, params)
        for x, y in zip(a[0] + a[1], b[0] + b[1]):
            assert np.array_equal(x, y)


class TestGradients:
    def test_tiny_model_depth_gradcheck_sampled(self):
        op, names = helpers.model_depth_diffop(TINY)
        _, arrs = helpers.build_arrays(TINY, 21)
        il, ir = helpers.images_for(TINY, 7)
        err = t.gradcheck(op, [il, ir] + arrs, step=1e-5,
                          rng=t.make_rng(0), sample=40)
        assert err < 1e-4, f"err={err}"

    def test_attention_model_depth_gradcheck_sampled(self):
        op, names = helpers.model_depth_diffop(TINY3)
        _, arrs = helpers.build_arrays(TINY3, 22)
        il, ir = helpers.images_for(TINY3, 8)
        err = t.gradcheck(op, [il, ir] + arrs, step=1e-5,
                          rng=t.make_rng(1), sample=12)
        assert err < 1e-4, f"err={err}"


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = mdl.build(TINY3, 9)
        path = str(tmp_path / "model.ckpt")
        mdl.save_checkpoint(path, params)
        loaded = mdl.load_checkpoint(path)
        assert loaded.config == params.config
        assert loaded.names() == params.names()
        for n in params.names():
            assert np.array_equal(loaded.arrays[n], params.arrays[n])
            assert loaded.arrays[n].dtype == np.float64

    def test_magic_checked(self, tmp_path):
        path = str(tmp_path / "junk.ckpt")
        with open(path, "wb") as f:
            f.write(b"NOTANCKP" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            mdl.load_checkpoint(path)

    def test_config_text_round_trip(self):
        text = mdl.config_to_text(TINY3)
        cfg = mdl.config_from_text(text)
        assert cfg == TINY3

    def test_config_text_rejects_unknown_keys(self):
        text = mdl.config_to_text(TINY) + "extra = 1\n"
        with pytest.raises(ValueError, match="unknown key"):
            mdl.config_from_text(text)
