"""Multi-resolution coarse heat-map regressor.

Each pyramid level (resolution bank) goes through LCN, two 5x5 conv stages at
bank resolution, max pooling down to heat-map resolution and a spatial
context conv stage.  Banks are upsampled to the finest bank's heat-map grid
(a no-op when every bank pools straight to the output grid) and summed,
SpatialDropout is applied, and two 1x1 stages produce one map per joint.

The two bank-resolution conv stages of every bank are returned alongside the
heat-maps so the cascade can crop them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat_channels, conv2d, maxpool2d, mse_heatmap_loss, relu, upsample_nearest
from .layers import DropoutMask, Phase, lcn, spatial_dropout
from .params import ModelParams, he_normal

BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass
class CoarseConfig:
    height: int = 64
    width: int = 64
    levels: int = 3
    pool_factor: int = 8
    n_joints: int = 7
    target_sigma: float = 1.5
    conv1_channels: int = 8
    conv2_channels: int = 8
    kernel: int = 5
    context_channels: int = 16
    context_kernel: int = 5
    head_hidden: int = 32
    p_drop: float = 0.5
    lcn_sigma: float = 2.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_joints < 1:
            raise ValueError("n_joints must be >= 1")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.height % self.pool_factor or self.width % self.pool_factor:
            raise ValueError(f"pool_factor {self.pool_factor} must divide input extents {self.height}x{self.width}")
        div = 2 ** (self.levels - 1)
        if self.height % div or self.width % div:
            raise ValueError(f"input extents must be divisible by {div} for {self.levels} pyramid levels")
        for s in self.bank_scales:
            bp = self.bank_pool(s)
            if (self.height // s) % bp or (self.width // s) % bp:
                raise ValueError(f"bank at scale {s} cannot pool by {bp}")

    @property
    def bank_scales(self) -> list[int]:
        return [2**l for l in range(self.levels)]

    def bank_pool(self, s: int) -> int:
        return max(1, self.pool_factor // s)

    def bank_upsample(self, s: int) -> int:
        return max(1, s // self.pool_factor)

    @property
    def heatmap_shape(self) -> tuple[int, int]:
        return self.height // self.pool_factor, self.width // self.pool_factor

    @property
    def feature_channels(self) -> int:
        return self.conv1_channels + self.conv2_channels

    def replace(self, **kw) -> "CoarseConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class HeatMapSet:
    """Per-joint maps [B, N, H, W] plus the cell -> input-pixel geometry.

    Cell (u, v) has its center at ``input = cell * scale + offset``;
    ``offset`` broadcasts against [B, N, 2] in (x, y) order.
    """

    maps: Tensor
    scale: float
    offset: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.maps.data

    def to_input(self, cell_xy: np.ndarray) -> np.ndarray:
        return np.asarray(cell_xy, dtype=np.float64) * self.scale + self.offset

    def to_heat(self, input_xy: np.ndarray) -> np.ndarray:
        return (np.asarray(input_xy, dtype=np.float64) - self.offset) / self.scale


def coarse_geometry(pool_factor: int) -> tuple[float, np.ndarray]:
    return float(pool_factor), np.full(2, (pool_factor - 1) / 2.0)


@dataclass
class Pyramid:
    levels: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.levels)


def _blur_decimate(x: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 2)
    H, W = x.shape[-2:]
    xp = np.pad(x, pad + [(2, 2), (0, 0)], mode="reflect")
    rows = sum(w * xp[..., k : k + H, :] for k, w in enumerate(BINOMIAL5))
    rp = np.pad(rows, pad + [(0, 0), (2, 2)], mode="reflect")
    out = sum(w * rp[..., k : k + W] for k, w in enumerate(BINOMIAL5))
    return out[..., ::2, ::2]


def build_pyramid(image: np.ndarray, levels: int) -> Pyramid:
    """Gaussian pyramid: each level is a 5-tap binomial blur of the previous
    level (mirror borders) decimated by 2.  Bank-l pixel i sits at input
    coordinate i * 2**l."""
    image = np.asarray(image)
    H, W = image.shape[-2:]
    div = 2 ** (levels - 1)
    if levels < 1 or H % div or W % div:
        raise ValueError(f"extents {H}x{W} not divisible by {div} for {levels} levels")
    out = [image]
    for _ in range(levels - 1):
        out.append(_blur_decimate(out[-1]))
    return Pyramid(out)


def render_gaussians(
    joints: np.ndarray,
    valid: np.ndarray | None,
    shape: tuple[int, int],
    scale: float,
    offset: np.ndarray,
    sigma: float,
    dtype=np.float32,
) -> np.ndarray:
    """Unit-amplitude Gaussians at ``joints`` [B, N, 2] on a grid of ``shape``."""
    joints = np.asarray(joints, dtype=np.float64)
    if joints.ndim == 2:
        joints = joints[None]
    B, N, _ = joints.shape
    centers = (joints - offset) / scale  # heat-map coords
    v = np.arange(shape[0])[None, None, :, None]
    u = np.arange(shape[1])[None, None, None, :]
    d2 = (u - centers[..., 0, None, None]) ** 2 + (v - centers[..., 1, None, None]) ** 2
    maps = np.exp(-d2 / (2.0 * sigma**2))
    if valid is not None:
        valid = np.asarray(valid, dtype=bool).reshape(B, N)
        maps = maps * valid[..., None, None]
    return maps.astype(dtype)


def render_target(joints: np.ndarray, config: CoarseConfig, valid: np.ndarray | None = None, dtype=np.float32) -> HeatMapSet:
    """Coarse targets: exp(-d^2 / 2 sigma^2) in heat-map cells, peak 1.0;
    invalid joints give all-zero maps."""
    scale, offset = coarse_geometry(config.pool_factor)
    maps = render_gaussians(joints, valid, config.heatmap_shape, scale, offset, config.target_sigma, dtype)
    return HeatMapSet(Tensor(maps), scale, offset)


def init_coarse_params(config: CoarseConfig, rng: np.random.Generator, dtype=np.float32, params: ModelParams | None = None) -> ModelParams:
    p = params if params is not None else ModelParams()
    k, kc = config.kernel, config.context_kernel
    c1, c2, cc = config.conv1_channels, config.conv2_channels, config.context_channels
    for l in range(config.levels):
        pre = f"coarse.bank{l}"
        p.add(f"{pre}.conv1.w", he_normal(rng, (c1, 3, k, k), 3 * k * k, dtype), "coarse")
        p.add(f"{pre}.conv1.b", np.zeros(c1, dtype), "coarse")
        p.add(f"{pre}.conv2.w", he_normal(rng, (c2, c1, k, k), c1 * k * k, dtype), "coarse")
        p.add(f"{pre}.conv2.b", np.zeros(c2, dtype), "coarse")
        p.add(f"{pre}.context.w", he_normal(rng, (cc, c2, kc, kc), c2 * kc * kc, dtype), "coarse")
        p.add(f"{pre}.context.b", np.zeros(cc, dtype), "coarse")
    # banks are summed, so shrink the first head layer's gain accordingly
    p.add("coarse.head1.w", he_normal(rng, (config.head_hidden, cc, 1, 1), cc * config.levels, dtype), "coarse")
    p.add("coarse.head1.b", np.zeros(config.head_hidden, dtype), "coarse")
    p.add("coarse.head2.w", (0.1 * he_normal(rng, (config.n_joints, config.head_hidden, 1, 1), config.head_hidden)).astype(dtype), "coarse")
    p.add("coarse.head2.b", np.zeros(config.n_joints, dtype), "coarse")
    return p


@dataclass
class CoarseOutput:
    heatmaps: HeatMapSet
    banks: list[Tensor]  # per resolution bank: concat(conv1, conv2) at bank resolution
    bank_scales: list[int]
    inputs: list[np.ndarray]  # LCN-normalized pyramid levels
    dropout: DropoutMask


def coarse_forward(
    pyramid: Pyramid,
    params: ModelParams,
    config: CoarseConfig,
    phase: Phase = "infer",
    rng: np.random.Generator | None = None,
    p_drop: float | None = None,
) -> CoarseOutput:
    if len(pyramid) != config.levels:
        raise ValueError(f"pyramid has {len(pyramid)} levels, config expects {config.levels}")
    B, C, H, W = pyramid.levels[0].shape
    if (H, W) != (config.height, config.width) or C != 3:
        raise ValueError(f"input {C}x{H}x{W} does not match config 3x{config.height}x{config.width}")
    dtype = params["coarse.head2.w"].dtype
    pad, padc = config.kernel // 2, config.context_kernel // 2
    banks, inputs, fused = [], [], None
    for l, s in enumerate(config.bank_scales):
        pre = f"coarse.bank{l}"
        x_np = lcn(pyramid.levels[l], config.lcn_sigma).astype(dtype)
        inputs.append(x_np)
        x = Tensor(x_np)
        c1 = relu(conv2d(x, params[f"{pre}.conv1.w"], params[f"{pre}.conv1.b"], pad=pad))
        c2 = relu(conv2d(c1, params[f"{pre}.conv2.w"], params[f"{pre}.conv2.b"], pad=pad))
        banks.append(concat_channels([c1, c2]))
        pooled = maxpool2d(c2, config.bank_pool(s))
        ctx = relu(conv2d(pooled, params[f"{pre}.context.w"], params[f"{pre}.context.b"], pad=padc))
        ctx = upsample_nearest(ctx, config.bank_upsample(s))
        fused = ctx if fused is None else add(fused, ctx)
    p = config.p_drop if p_drop is None else p_drop
    if phase == "train" and rng is None:
        raise ValueError("training-phase forward needs an rng for dropout")
    dropped, mask = spatial_dropout(fused, p, phase, rng)
    h = relu(conv2d(dropped, params["coarse.head1.w"], params["coarse.head1.b"]))
    out = conv2d(h, params["coarse.head2.w"], params["coarse.head2.b"])
    scale, offset = coarse_geometry(config.pool_factor)
    return CoarseOutput(HeatMapSet(out, scale, offset), banks, config.bank_scales, inputs, mask)


def argmax_extract(maps: HeatMapSet) -> np.ndarray:
    """Per-joint global argmax -> input-pixel (x, y) of the cell center.

    Ties resolve to the lowest row-major index.  Returns [B, N, 2].
    """
    vals = maps.values
    B, N, H, W = vals.shape
    flat = vals.reshape(B, N, H * W).argmax(axis=-1)
    cells = np.stack([flat % W, flat // W], axis=-1).astype(np.float64)
    return maps.to_input(cells)


def loss_e1(pred: HeatMapSet, target: HeatMapSet) -> Tensor:
    return mse_heatmap_loss(pred.maps, target.values)
