import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatcascade.autodiff import Tensor, grad_check
from heatcascade.coarse import (
    BINOMIAL5,
    CoarseConfig,
    HeatMapSet,
    argmax_extract,
    build_pyramid,
    coarse_forward,
    init_coarse_params,
    loss_e1,
    render_target,
)


def small_config(**kw):
    base = dict(height=16, width=16, levels=3, pool_factor=4, n_joints=2, conv1_channels=2, conv2_channels=2,
                kernel=3, context_channels=3, context_kernel=3, head_hidden=4)
    base.update(kw)
    return CoarseConfig(**base)


class TestConfig:
    def test_pool_must_divide(self):
        with pytest.raises(ValueError, match="pool_factor"):
            CoarseConfig(height=60, width=64)

    def test_joint_count(self):
        with pytest.raises(ValueError):
            CoarseConfig(n_joints=0)

    def test_bank_geometry(self):
        cfg = CoarseConfig(pool_factor=4, levels=3)
        assert [cfg.bank_pool(s) for s in cfg.bank_scales] == [4, 2, 1]
        cfg = CoarseConfig(pool_factor=16, levels=3)
        assert [cfg.bank_pool(s) for s in cfg.bank_scales] == [16, 8, 4]
        assert cfg.heatmap_shape == (4, 4)


class TestPyramid:
    def test_single_level_identity(self):
        img = np.random.default_rng(0).uniform(size=(1, 3, 8, 8))
        pyr = build_pyramid(img, 1)
        assert len(pyr) == 1
        np.testing.assert_array_equal(pyr.levels[0], img)

    def test_constant_preserved(self):
        pyr = build_pyramid(np.full((2, 3, 32, 32), 0.3), 3)
        assert [lv.shape[-1] for lv in pyr.levels] == [32, 16, 8]
        for lv in pyr.levels:
            np.testing.assert_allclose(lv, 0.3, atol=1e-15)

    def test_impulse_response(self):
        img = np.zeros((1, 1, 32, 32))
        img[0, 0, 16, 16] = 1.0
        lvl1 = build_pyramid(img, 2).levels[1][0, 0]
        k2 = np.outer(BINOMIAL5, BINOMIAL5)
        expected = np.zeros((16, 16))
        # blurred impulse covers rows/cols 14..18; even ones survive decimation
        expected[7:10, 7:10] = k2[::2, ::2]
        np.testing.assert_allclose(lvl1, expected, atol=1e-15)
        assert lvl1[8, 8] == pytest.approx(0.140625)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            build_pyramid(np.zeros((1, 3, 30, 30)), 3)


class TestRenderTarget:
    def test_center_cell_is_one(self):
        cfg = CoarseConfig()
        joints = np.array([[[2 * 8 + 3.5, 3 * 8 + 3.5]] * 7])
        maps = render_target(joints, cfg).values
        assert maps[0, 0, 3, 2] == pytest.approx(1.0)
        assert maps.max() <= 1.0

    def test_value_at_one_sigma(self):
        cfg = CoarseConfig()
        joints = np.full((1, 7, 2), 3.5)
        joints[0, 0] = [3.5 + 1.5 * 8, 3.5]  # 1.5 cells right of cell (0, 0)
        maps = render_target(joints, cfg, dtype=np.float64).values
        assert maps[0, 0, 0, 0] == pytest.approx(np.exp(-0.5), abs=1e-12)
        assert np.exp(-0.5) == pytest.approx(0.6065, abs=1e-4)

    def test_invalid_joint_zero(self):
        cfg = CoarseConfig()
        valid = np.ones((1, 7), bool)
        valid[0, 3] = False
        maps = render_target(np.full((1, 7, 2), 30.0), cfg, valid).values
        np.testing.assert_array_equal(maps[0, 3], 0.0)
        assert maps[0, 2].max() > 0

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 63), st.floats(0, 63)), min_size=7, max_size=7), st.sampled_from([4, 8, 16]))
    def test_flip_equivariance(self, pts, pool):
        cfg = CoarseConfig(pool_factor=pool)
        j = np.array(pts)[None]
        flipped = j.copy()
        flipped[..., 0] = cfg.width - 1 - flipped[..., 0]
        a = render_target(j, cfg, dtype=np.float64).values
        b = render_target(flipped, cfg, dtype=np.float64).values
        np.testing.assert_allclose(b, a[..., ::-1], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 63), st.floats(0, 63), st.sampled_from([4, 8, 16]))
    def test_geometry_round_trip(self, x, y, pool):
        cfg = CoarseConfig(pool_factor=pool)
        hm = render_target(np.zeros((1, 7, 2)), cfg)
        p = np.array([x, y])
        cell = np.floor(hm.to_heat(p) + 0.5)
        assert np.all(np.abs(hm.to_input(cell) - p) <= pool / 2)


class TestArgmax:
    @pytest.mark.parametrize("pool", [4, 8, 16])
    def test_recovers_rendered_joint(self, pool):
        cfg = CoarseConfig(pool_factor=pool)
        joints = np.random.default_rng(pool).uniform(0, 63, size=(3, 7, 2))
        got = argmax_extract(render_target(joints, cfg))
        assert np.all(np.abs(got - joints) <= pool / 2)

    def test_uniform_map_cell_zero(self):
        hm = HeatMapSet(Tensor(np.zeros((1, 1, 8, 8))), 8.0, np.full(2, 3.5))
        np.testing.assert_array_equal(argmax_extract(hm)[0, 0], [3.5, 3.5])

    def test_tie_lower_row_major(self):
        m = np.zeros((1, 1, 8, 8))
        m[0, 0, 5, 1] = 1.0
        m[0, 0, 2, 6] = 1.0
        hm = HeatMapSet(Tensor(m), 8.0, np.full(2, 3.5))
        np.testing.assert_array_equal(argmax_extract(hm)[0, 0], [6 * 8 + 3.5, 2 * 8 + 3.5])


class TestCoarseForward:
    @pytest.mark.parametrize("pool", [4, 8, 16])
    def test_output_extents(self, pool):
        cfg = CoarseConfig(pool_factor=pool)
        params = init_coarse_params(cfg, np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(size=(2, 3, 64, 64)).astype(np.float32)
        out = coarse_forward(build_pyramid(img, 3), params, cfg)
        assert out.heatmaps.values.shape == (2, 7, 64 // pool, 64 // pool)
        for bank, s in zip(out.banks, out.bank_scales):
            assert bank.shape == (2, cfg.feature_channels, 64 // s, 64 // s)

    def test_zero_head_gives_bias(self):
        cfg = CoarseConfig()
        params = init_coarse_params(cfg, np.random.default_rng(0))
        params["coarse.head2.w"].data[:] = 0.0
        params["coarse.head2.b"].data[:] = np.arange(7)
        img = np.random.default_rng(1).uniform(size=(1, 3, 64, 64)).astype(np.float32)
        maps = coarse_forward(build_pyramid(img, 3), params, cfg).heatmaps.values
        np.testing.assert_array_equal(maps, np.broadcast_to(np.arange(7.0)[None, :, None, None], maps.shape))

    def test_params_mismatch(self):
        cfg = CoarseConfig()
        params = init_coarse_params(CoarseConfig(levels=2), np.random.default_rng(0))
        img = np.zeros((1, 3, 64, 64), np.float32)
        with pytest.raises(KeyError, match="bank2"):
            coarse_forward(build_pyramid(img, 3), params, cfg)

    def test_train_needs_rng(self):
        cfg = CoarseConfig()
        params = init_coarse_params(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError, match="rng"):
            coarse_forward(build_pyramid(np.zeros((1, 3, 64, 64), np.float32), 3), params, cfg, "train")

    @pytest.mark.parametrize("phase", ["infer", "train"])
    def test_full_model_gradcheck(self, phase):
        cfg = small_config(p_drop=0.3)
        params = init_coarse_params(cfg, np.random.default_rng(0), np.float64)
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(2, 3, 16, 16))
        pyr = build_pyramid(img, cfg.levels)
        target = render_target(rng.uniform(0, 15, size=(2, 2, 2)), cfg, dtype=np.float64)

        def f():
            out = coarse_forward(pyr, params, cfg, phase, np.random.default_rng(7))
            return loss_e1(out.heatmaps, target)

        rep = grad_check(f, params.tensors, max_per_param=12)
        assert rep.max_rel_error < 1e-5, rep.summary()
        assert rep.checked > 100
