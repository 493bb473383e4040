"""Finite-difference gradient suite over every primitive and both full
models, in double precision at 16x16 inputs."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .cascade import FineConfig, crop_features, fine_forward, init_fine_params, loss_e2, loss_e3, render_fine_target
from .coarse import CoarseConfig, build_pyramid, coarse_forward, init_coarse_params, loss_e1, render_target
from .layers import spatial_dropout, standard_dropout

DESK_COARSE = dict(height=16, width=16, levels=3, pool_factor=4, n_joints=2, conv1_channels=2, conv2_channels=2,
                   kernel=3, context_channels=3, context_kernel=3, head_hidden=4)


def desk_configs(p_drop: float = 0.0) -> tuple[CoarseConfig, FineConfig]:
    return CoarseConfig(**DESK_COARSE, p_drop=p_drop), FineConfig(context_size=8, trunk_channels=2, fuse_channels=2)


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    """Scalar sum(y * w) with a fixed random weighting, so every output
    element contributes a distinct gradient."""
    return ad.tensor_sum(ad.multiply_mask(y, w))


def _fixed(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=shape)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    x, k, b = leaf(2, 3, 8, 8), leaf(4, 3, 3, 3), leaf(4)
    w_conv = rng.normal(size=(2, 4, 4, 4))
    a, c = leaf(2, 3, 4, 4), leaf(2, 2, 4, 4)
    w4 = rng.normal(size=(2, 3, 4, 4))
    w8 = rng.normal(size=(2, 3, 8, 8))
    h_in, hw, hb = leaf(6, 5, 4, 4), leaf(3, 5), leaf(3)
    target = rng.normal(size=(2, 3, 4, 4))
    mask = rng.normal(size=(1, 3, 1, 4))
    d_rng_seed = int(rng.integers(2**31))
    return {
        "conv2d": (lambda: _weighted(ad.conv2d(x, k, b, stride=2, pad=1), w_conv), {"x": x, "kernel": k, "bias": b}),
        "maxpool2d": (lambda: _weighted(ad.maxpool2d(x, 2), w4), {"x": x}),
        "upsample_nearest": (lambda: _weighted(ad.upsample_nearest(a, 2), w8), {"x": a}),
        "relu": (lambda: _weighted(ad.relu(a), w4), {"x": a}),
        "add": (lambda: _weighted(ad.add(a, ad.scale(a, 0.5)), w4), {"x": a}),
        "scale": (lambda: _weighted(ad.scale(a, -1.7), w4), {"x": a}),
        "multiply_mask": (lambda: _weighted(ad.multiply_mask(a, mask), w4), {"x": a}),
        "concat_channels": (
            lambda: _weighted(ad.concat_channels([a, c]), _fixed(5, (2, 5, 4, 4))), {"a": a, "b": c}),
        "tensor_sum": (lambda: ad.tensor_sum(ad.relu(a)), {"x": a}),
        "joint_heads": (lambda: _weighted(ad.joint_heads(h_in, hw, hb, 3), _fixed(6, (2, 3, 4, 4))),
                        {"x": h_in, "weight": hw, "bias": hb}),
        "mse_heatmap_loss": (lambda: ad.mse_heatmap_loss(a, target), {"pred": a}),
        "spatial_dropout": (
            lambda: _weighted(spatial_dropout(a, 0.4, "train", np.random.default_rng(d_rng_seed))[0], w4), {"x": a}),
        "standard_dropout": (
            lambda: _weighted(standard_dropout(a, 0.4, "train", np.random.default_rng(d_rng_seed))[0], w4), {"x": a}),
    }


def _model_cases(rng: np.random.Generator):
    ccfg, fcfg = desk_configs(p_drop=0.3)
    params = init_coarse_params(ccfg, rng, np.float64)
    init_fine_params(ccfg.feature_channels, ccfg.levels, ccfg.n_joints, fcfg, rng, np.float64, params=params)
    img = rng.uniform(size=(2, 3, 16, 16))
    pyr = build_pyramid(img, ccfg.levels)
    joints = rng.uniform(2, 13, size=(2, ccfg.n_joints, 2))
    coarse_target = render_target(joints, ccfg, dtype=np.float64)
    # crop positions are held constant: argmax is piecewise constant
    crop_xy = joints + rng.normal(scale=1.5, size=joints.shape)

    def coarse(phase):
        def f():
            out = coarse_forward(pyr, params, ccfg, phase, np.random.default_rng(7))
            return loss_e1(out.heatmaps, coarse_target)
        return f

    def cascade():
        out = coarse_forward(pyr, params, ccfg, "train", np.random.default_rng(7))
        e1 = loss_e1(out.heatmaps, coarse_target)
        crops, windows = crop_features(out.banks, crop_xy, ccfg.pool_factor, fcfg, out.bank_scales)
        fine = fine_forward(crops, params, fcfg, windows)
        e2 = loss_e2(fine, render_fine_target(joints, None, windows, fcfg, np.float64))
        return loss_e3(e1, e2, fcfg.lam)

    coarse_only = {n: params[n] for n in params.names("coarse")}
    return {
        "coarse_model[infer]": (coarse("infer"), coarse_only),
        "coarse_model[train]": (coarse("train"), coarse_only),
        "cascade_model[E3]": (cascade, dict(params.tensors)),
    }


def run_gradient_suite(seed: int = 0, max_per_param: int = 12, tol: float = 1e-5) -> list[tuple[str, GradCheckReport]]:
    """Check every primitive and both full models.  Returns (name, report)
    pairs; pool-tie and relu-zero kinks are excluded and counted."""
    rng = np.random.default_rng(seed)
    cases = {**_primitive_cases(rng), **_model_cases(rng)}
    return [(name, grad_check(f, params, tol=tol, max_per_param=max_per_param, seed=seed)) for name, (f, params) in cases.items()]
