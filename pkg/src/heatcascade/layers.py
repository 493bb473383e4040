"""Input normalization and dropout layers.

``spatial_dropout`` draws one Bernoulli trial per (batch item, feature map)
and extends it over the whole map, so neighbouring activations are dropped
together.  ``standard_dropout`` draws per element.  Neither rescales at
train time; at inference the activations are multiplied by ``1 - p_drop``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .autodiff import Tensor, multiply_mask, scale

Phase = Literal["train", "infer"]


@dataclass
class DropoutMask:
    mode: Literal["standard", "spatial"]
    p_drop: float
    phase: Phase
    mask: np.ndarray | None  # 1 = keep, 0 = dropped; None at inference

    @property
    def n_trials(self) -> int:
        return 0 if self.mask is None else int(self.mask.size)


def _check_p(p_drop: float) -> None:
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")


def _dropout(x: Tensor, p_drop: float, phase: Phase, rng, mode, mask_shape) -> tuple[Tensor, DropoutMask]:
    _check_p(p_drop)
    if phase == "infer":
        return scale(x, 1.0 - p_drop), DropoutMask(mode, p_drop, phase, None)
    if phase != "train":
        raise ValueError(f"unknown phase {phase!r}")
    keep = (rng.random(mask_shape) >= p_drop).astype(x.dtype)
    return multiply_mask(x, keep), DropoutMask(mode, p_drop, phase, keep)


def spatial_dropout(x: Tensor, p_drop: float, phase: Phase, rng) -> tuple[Tensor, DropoutMask]:
    """Drop whole feature maps of ``x`` [B, C, H, W]; B*C trials."""
    B, C = x.shape[:2]
    return _dropout(x, p_drop, phase, rng, "spatial", (B, C) + (1,) * (x.data.ndim - 2))


def standard_dropout(x: Tensor, p_drop: float, phase: Phase, rng) -> tuple[Tensor, DropoutMask]:
    """Element-wise dropout; one trial per activation."""
    return _dropout(x, p_drop, phase, rng, "standard", x.shape)


def gaussian_window(sigma: float, support: int) -> np.ndarray:
    r = np.arange(support) - (support - 1) / 2
    w = np.exp(-(r**2) / (2 * sigma**2))
    return w / w.sum()


def _separable_filter(x: np.ndarray, w1d: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' correlation of the last two axes with w1d (x) w1d."""
    r = len(w1d) // 2
    out = np.zeros_like(x)
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(r, r), (0, 0)])
    H, W = x.shape[-2:]
    for k, wk in enumerate(w1d):
        out += wk * xp[..., k : k + H, :]
    xp = np.pad(out, [(0, 0)] * (x.ndim - 2) + [(0, 0), (r, r)])
    out = np.zeros_like(x)
    for k, wk in enumerate(w1d):
        out += wk * xp[..., k : k + W]
    return out


def lcn(x: np.ndarray, kernel_sigma: float = 2.0, support: int = 9, eps: float = 1e-4) -> np.ndarray:
    """Local contrast normalization of [B, C, H, W] images, per channel.

    Subtract the Gaussian-weighted local mean, then divide by
    ``max(mean_local_std, local_std)``; the mean is taken over the image so
    flat regions are not amplified.  Border windows are renormalized by the
    in-image weight mass, which keeps constants exact at the edges.
    """
    if kernel_sigma <= 0:
        raise ValueError("kernel_sigma must be positive")
    x = np.asarray(x)
    w = gaussian_window(kernel_sigma, support)
    mass = _separable_filter(np.ones(x.shape[-2:], dtype=x.dtype), w)
    centered = x - _separable_filter(x, w) / mass
    local_std = np.sqrt(np.maximum(_separable_filter(centered * centered, w) / mass, 0.0))
    mean_std = local_std.mean(axis=(-2, -1), keepdims=True)
    denom = np.maximum(np.maximum(mean_std, local_std), eps)
    return centered / denom
