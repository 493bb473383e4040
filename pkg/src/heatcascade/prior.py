"""Torso-conditioned spatial prior (star model).

Every joint is conditioned only on the annotated torso position.  The prior
is a 2D histogram of joint-minus-torso displacements in heat-map cells,
Gaussian-smoothed, floored and normalized.  Applying it multiplies each
joint's heat-map by the prior shifted to the torso cell, which suppresses
activations from other people whose joints are not anatomically viable for
this torso.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import container
from .autodiff import Tensor
from .coarse import HeatMapSet

EPS_FLOOR = 1e-6


@dataclass
class PairwisePrior:
    """``hist[j, dy + ry, dx + rx]`` is the probability that joint j sits
    (dx, dy) cells from the torso cell.  ``cell`` is the cell size in input
    pixels."""

    hist: np.ndarray  # [N, 2*ry+1, 2*rx+1]
    cell: float

    @property
    def radius(self) -> tuple[int, int]:
        return (self.hist.shape[1] - 1) // 2, (self.hist.shape[2] - 1) // 2

    @property
    def n_joints(self) -> int:
        return self.hist.shape[0]

    @classmethod
    def uniform(cls, n_joints: int, heatmap_shape: tuple[int, int], cell: float) -> "PairwisePrior":
        Hc, Wc = heatmap_shape
        h = np.ones((n_joints, 2 * Hc - 1, 2 * Wc - 1))
        return cls(h / h[0].sum(), float(cell))

    def save(self, path: str | Path) -> None:
        container.save(path, {"hist": self.hist}, b"PRIO", {"cell": self.cell})

    @classmethod
    def load(cls, path: str | Path) -> "PairwisePrior":
        tensors, meta = container.load(path, b"PRIO")
        if "hist" not in tensors or tensors["hist"].ndim != 3:
            raise ValueError(f"{path}: not a prior file (missing [N, H, W] 'hist')")
        return cls(tensors["hist"], float(meta["cell"]))


def _cell(xy: np.ndarray, cell: float) -> np.ndarray:
    return np.floor(np.asarray(xy, dtype=np.float64) / cell).astype(np.int64)


def fit_prior(
    joints: np.ndarray,
    valid: np.ndarray | None,
    torso_xy: np.ndarray,
    heatmap_shape: tuple[int, int],
    cell: float,
    sigma: float = 1.0,
    eps: float = EPS_FLOOR,
) -> PairwisePrior:
    """Fit per-joint displacement histograms from annotations.

    ``joints`` [S, N, 2], ``valid`` [S, N], ``torso_xy`` [S, 2], all in input
    pixels.  The histogram spans every displacement possible on a heat-map of
    ``heatmap_shape`` cells.
    """
    joints = np.asarray(joints, dtype=np.float64)
    if joints.ndim != 3 or joints.shape[0] == 0:
        raise ValueError("fit_prior needs at least one annotated sample")
    S, N, _ = joints.shape
    ok = np.ones((S, N), bool) if valid is None else np.asarray(valid, bool)
    Hc, Wc = heatmap_shape
    ry, rx = Hc - 1, Wc - 1
    d = _cell(joints, cell) - _cell(torso_xy, cell)[:, None, :]
    hist = np.zeros((N, 2 * ry + 1, 2 * rx + 1))
    for j in range(N):
        sel = ok[:, j]
        if not sel.any():
            raise ValueError(f"joint {j} has no annotated samples")
        dx = np.clip(d[sel, j, 0], -rx, rx) + rx
        dy = np.clip(d[sel, j, 1], -ry, ry) + ry
        np.add.at(hist[j], (dy, dx), 1.0)
        if sigma > 0:
            hist[j] = gaussian_filter(hist[j], sigma, mode="constant")
        hist[j] /= hist[j].sum()
        hist[j] += eps
        hist[j] /= hist[j].sum()
    return PairwisePrior(hist, float(cell))


def shifted_prior(prior: PairwisePrior, joint: int, torso_xy: np.ndarray, heatmap_shape: tuple[int, int]) -> np.ndarray:
    """The joint's prior laid out on the heat-map grid around the torso cell."""
    Hc, Wc = heatmap_shape
    ry, rx = prior.radius
    tx, ty = _cell(torso_xy, prior.cell)
    if not (0 <= tx < Wc and 0 <= ty < Hc):
        raise ValueError(f"torso {tuple(torso_xy)} outside the {Hc}x{Wc} heat-map")
    v = np.arange(Hc)[:, None] - ty + ry
    u = np.arange(Wc)[None, :] - tx + rx
    inside = (v >= 0) & (v <= 2 * ry) & (u >= 0) & (u <= 2 * rx)
    vals = prior.hist[joint][np.clip(v, 0, 2 * ry), np.clip(u, 0, 2 * rx)]
    return np.where(inside, vals, 0.0)


def apply_prior(maps: HeatMapSet, torso_xy: np.ndarray, prior: PairwisePrior, renormalize: bool = True) -> HeatMapSet:
    """Multiply each joint map by its torso-shifted prior.

    Negative activations are clipped to 0 first so the output is a
    non-negative likelihood; each nonzero output map is rescaled to max 1.
    """
    vals = np.asarray(maps.values, dtype=np.float64)
    B, N, Hc, Wc = vals.shape
    if N != prior.n_joints:
        raise ValueError(f"prior has {prior.n_joints} joints, maps have {N}")
    torso_xy = np.asarray(torso_xy, dtype=np.float64).reshape(B, 2)
    out = np.empty_like(vals)
    for b in range(B):
        for j in range(N):
            m = np.maximum(vals[b, j], 0.0) * shifted_prior(prior, j, torso_xy[b], (Hc, Wc))
            peak = m.max()
            out[b, j] = m / peak if renormalize and peak > 0 else m
    return HeatMapSet(Tensor(out.astype(maps.values.dtype)), maps.scale, maps.offset)
