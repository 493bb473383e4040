"""Shared-feature refinement: crop coarse conv features around each coarse
joint estimate and regress a full-resolution heat-map inside the window.

Windows keep a constant context in input pixels: bank ``l`` (scale 2**l)
crops ``context_size / 2**l`` of its own pixels.  Crop positions are
per-step constants; the gradient of a crop is scattered back (added) into the
bank it came from.

The fine model is a Siamese network: one trunk (two 3x3 convs per bank,
nearest upsampling to bank-0 resolution, sum, a 1x1 stage) is applied to
every joint instance, stacked along the batch axis, and each joint then has
its own unshared 1x1 head.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, conv2d, joint_heads, mse_heatmap_loss, record, relu, scale, upsample_nearest
from .coarse import HeatMapSet, render_gaussians
from .params import ModelParams, he_normal


@dataclass
class FineConfig:
    context_size: int | None = None  # input pixels; None -> 2 * pool_factor + 8
    trunk_channels: int = 16
    trunk_kernel: int = 3
    fuse_channels: int = 16
    lam: float = 0.1
    target_sigma: float = 1.5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    def context(self, pool_factor: int) -> int:
        return self.context_size if self.context_size is not None else 2 * pool_factor + 8

    def replace(self, **kw) -> "FineConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class CropWindow:
    joint: int
    bank: int
    top_left: tuple[int, int]  # (x, y) in bank pixels, after clamping
    extent: int
    clamp_offset: tuple[int, int]  # clamped - requested top-left
    context_size: int


@dataclass
class CropWindows:
    """Windows for every (item, joint, bank).

    ``top_left`` and ``clamp_offset`` are int arrays [B, N, L, 2] in (x, y)
    bank-pixel order; ``extents[l]`` is the square window side in bank l.
    """

    top_left: np.ndarray
    clamp_offset: np.ndarray
    extents: list[int]
    scales: list[int]
    bank_shapes: list[tuple[int, int]]
    context_size: int

    @property
    def n_items(self) -> int:
        return self.top_left.shape[0]

    @property
    def n_joints(self) -> int:
        return self.top_left.shape[1]

    def window(self, item: int, joint: int, bank: int) -> CropWindow:
        tl = self.top_left[item, joint, bank]
        off = self.clamp_offset[item, joint, bank]
        return CropWindow(joint, bank, (int(tl[0]), int(tl[1])), self.extents[bank], (int(off[0]), int(off[1])), self.context_size)

    def fine_offset(self) -> np.ndarray:
        """Input-pixel position of fine-map cell (0, 0) per item/joint: [B, N, 2]."""
        return self.top_left[:, :, 0, :].astype(np.float64) * self.scales[0]


def make_windows(
    coarse_xy: np.ndarray,
    bank_shapes: list[tuple[int, int]],
    scales: list[int],
    context_size: int,
) -> CropWindows:
    coarse_xy = np.asarray(coarse_xy, dtype=np.float64)
    B, N, _ = coarse_xy.shape
    L = len(scales)
    tl = np.zeros((B, N, L, 2), dtype=np.int64)
    off = np.zeros_like(tl)
    extents = []
    for l, s in enumerate(scales):
        if context_size % s:
            raise ValueError(f"context size {context_size} not divisible by bank scale {s}")
        E = context_size // s
        H, W = bank_shapes[l]
        if E > H or E > W:
            raise ValueError(f"window {E} exceeds bank {l} extents {H}x{W}")
        extents.append(E)
        anchor = np.floor(coarse_xy / s + 0.5).astype(np.int64)
        want = anchor - E // 2
        got = np.stack([np.clip(want[..., 0], 0, W - E), np.clip(want[..., 1], 0, H - E)], axis=-1)
        tl[:, :, l] = got
        off[:, :, l] = got - want
    return CropWindows(tl, off, extents, list(scales), [tuple(s) for s in bank_shapes], context_size)


def _crop_array(bank: np.ndarray, windows: CropWindows, l: int) -> np.ndarray:
    B, N = windows.n_items, windows.n_joints
    E = windows.extents[l]
    out = np.empty((B * N, bank.shape[1], E, E), dtype=bank.dtype)
    for b in range(B):
        for j in range(N):
            x, y = windows.top_left[b, j, l]
            out[b * N + j] = bank[b, :, y : y + E, x : x + E]
    return out


def crop_backward(grads: list[np.ndarray], windows: CropWindows) -> list[np.ndarray]:
    """Scatter-add per-bank crop gradients [B*N, C, E, E] into zero-initialized
    bank gradients [B, C, H, W]; overlapping windows accumulate."""
    return [_scatter_bank(g, windows, l) for l, g in enumerate(grads)]


def crop_features(
    banks: list[Tensor],
    coarse_xy: np.ndarray,
    pool_factor: int,
    cfg: FineConfig,
    scales: list[int] | None = None,
) -> tuple[list[Tensor], CropWindows]:
    """Crop every bank around each joint; returns per-bank [B*N, C, E, E]."""
    scales = scales or [2**l for l in range(len(banks))]
    shapes = [t.shape[2:] for t in banks]
    windows = make_windows(coarse_xy, shapes, scales, cfg.context(pool_factor))
    crops = []
    for l, bank in enumerate(banks):

        def backward_fn(g, l=l):
            return (_scatter_bank(g, windows, l),)

        crops.append(record(_crop_array(bank.data, windows, l), "crop", (bank,), backward_fn, {"windows": windows, "bank": l}))
    return crops, windows


def _scatter_bank(g: np.ndarray, windows: CropWindows, l: int) -> np.ndarray:
    B, N = windows.n_items, windows.n_joints
    E = windows.extents[l]
    if g.ndim != 4 or g.shape[0] != B * N or g.shape[2:] != (E, E):
        raise ValueError(f"bank {l}: gradient {g.shape} does not match {B * N} windows of {E}x{E}")
    H, W = windows.bank_shapes[l]
    acc = np.zeros((B, g.shape[1], H, W), dtype=g.dtype)
    for b in range(B):
        for j in range(N):
            x, y = windows.top_left[b, j, l]
            acc[b, :, y : y + E, x : x + E] += g[b * N + j]
    return acc


def init_fine_params(
    in_channels: int,
    n_banks: int,
    n_joints: int,
    cfg: FineConfig,
    rng: np.random.Generator,
    dtype=np.float32,
    prefix: str = "fine",
    params: ModelParams | None = None,
    pre_layer: tuple[int, int] | None = None,
) -> ModelParams:
    """Trunk + heads.  ``pre_layer=(width, kernel)`` inserts an extra conv
    per bank in front of the trunk (used by the greedy baseline)."""
    p = params if params is not None else ModelParams()
    F, k = cfg.trunk_channels, cfg.trunk_kernel
    for l in range(n_banks):
        cin = in_channels
        if pre_layer is not None:
            w, kp = pre_layer
            p.add(f"{prefix}.bank{l}.pre.w", he_normal(rng, (w, in_channels, kp, kp), in_channels * kp * kp, dtype), "fine")
            p.add(f"{prefix}.bank{l}.pre.b", np.zeros(w, dtype), "fine")
            cin = w
        p.add(f"{prefix}.bank{l}.conv1.w", he_normal(rng, (F, cin, k, k), cin * k * k, dtype), "fine")
        p.add(f"{prefix}.bank{l}.conv1.b", np.zeros(F, dtype), "fine")
        p.add(f"{prefix}.bank{l}.conv2.w", he_normal(rng, (F, F, k, k), F * k * k, dtype), "fine")
        p.add(f"{prefix}.bank{l}.conv2.b", np.zeros(F, dtype), "fine")
    p.add(f"{prefix}.fuse.w", he_normal(rng, (cfg.fuse_channels, F, 1, 1), F * n_banks, dtype), "fine")
    p.add(f"{prefix}.fuse.b", np.zeros(cfg.fuse_channels, dtype), "fine")
    p.add(f"{prefix}.head.w", (0.1 * he_normal(rng, (n_joints, cfg.fuse_channels), cfg.fuse_channels)).astype(dtype), "fine")
    p.add(f"{prefix}.head.b", np.zeros(n_joints, dtype), "fine")
    return p


def fine_trunk(crops: list[Tensor], params: ModelParams, cfg: FineConfig, scales: list[int], prefix: str = "fine") -> Tensor:
    """Shared trunk over stacked instances [B*N, C, E_l, E_l] -> [B*N, F', E_0, E_0]."""
    pad = cfg.trunk_kernel // 2
    fused = None
    for l, (x, s) in enumerate(zip(crops, scales)):
        pre = f"{prefix}.bank{l}"
        if f"{pre}.pre.w" in params:
            kp = params[f"{pre}.pre.w"].shape[-1]
            x = relu(conv2d(x, params[f"{pre}.pre.w"], params[f"{pre}.pre.b"], pad=kp // 2))
        h = relu(conv2d(x, params[f"{pre}.conv1.w"], params[f"{pre}.conv1.b"], pad=pad))
        h = relu(conv2d(h, params[f"{pre}.conv2.w"], params[f"{pre}.conv2.b"], pad=pad))
        h = upsample_nearest(h, s // scales[0])
        fused = h if fused is None else add(fused, h)
    return relu(conv2d(fused, params[f"{prefix}.fuse.w"], params[f"{prefix}.fuse.b"]))


def fine_forward(
    crops: list[Tensor],
    params: ModelParams,
    cfg: FineConfig,
    windows: CropWindows,
    prefix: str = "fine",
) -> HeatMapSet:
    """Per-joint fine heat-maps G'_j over each joint's bank-0 window."""
    n_joints = windows.n_joints
    head_w = params[f"{prefix}.head.w"]
    if head_w.shape[0] != n_joints:
        raise ValueError(f"fine heads built for {head_w.shape[0]} joints, crops carry {n_joints}")
    trunk = fine_trunk(crops, params, cfg, windows.scales, prefix)
    maps = joint_heads(trunk, head_w, params[f"{prefix}.head.b"], n_joints)
    return HeatMapSet(maps, float(windows.scales[0]), windows.fine_offset())


def render_fine_target(joints: np.ndarray, valid: np.ndarray | None, windows: CropWindows, cfg: FineConfig, dtype=np.float32) -> HeatMapSet:
    """Ground-truth Gaussians (sigma in crop pixels) in each joint's window."""
    E = windows.extents[0]
    offset = windows.fine_offset()
    maps = render_gaussians(joints, valid, (E, E), float(windows.scales[0]), offset, cfg.target_sigma, dtype)
    return HeatMapSet(Tensor(maps), float(windows.scales[0]), offset)


def loss_e2(pred: HeatMapSet, target: HeatMapSet) -> Tensor:
    return mse_heatmap_loss(pred.maps, target.values)


def loss_e3(e1: Tensor, e2: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return add(e1, scale(e2, lam))


def refine_position(coarse_xy: np.ndarray, fine_maps: HeatMapSet, windows: CropWindows, image_shape: tuple[int, int]) -> np.ndarray:
    """coarse + (fine argmax relative to the window), clamped to the image."""
    vals = fine_maps.values
    B, N, E, _ = vals.shape
    flat = vals.reshape(B, N, E * E).argmax(axis=-1)
    cells = np.stack([flat % E, flat // E], axis=-1).astype(np.float64)
    peak = cells * fine_maps.scale + windows.fine_offset()
    delta = peak - np.asarray(coarse_xy, dtype=np.float64)
    final = coarse_xy + delta
    H, W = image_shape
    return np.stack([np.clip(final[..., 0], 0, W - 1), np.clip(final[..., 1], 0, H - 1)], axis=-1)
