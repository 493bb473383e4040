"""Localization metrics: PCK / PCKh curves, signed-error histograms and
annotation-noise sigma.

Conventions:
  * a joint is detected at threshold t iff ``||pred - truth|| <= t * normalizer``
    (inclusive);
  * PCK normalizes by the torso diameter (left shoulder to right hip), PCKh by
    the head segment length; both are supplied per sample by the caller;
  * sigma is the population (1/n) standard deviation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.025, 0.2001, 0.025), 3))
SIGMA_TABLE_JOINTS = ("Face", "Shoulder", "Elbow", "Wrist")
# human label-noise sigma (x, px at 360x240) on a movie-frame upper-body set;
# kept as a reference row for the sigma table, never used in computation
HUMAN_LABEL_SIGMA_REFERENCE = {"Face": 0.65, "Shoulder": 2.46, "Elbow": 2.14, "Wrist": 1.57}


def _valid_mask(truths: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    ok = np.all(np.isfinite(truths), axis=-1)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    return ok


@dataclass
class PCKCurve:
    thresholds: np.ndarray  # [T]
    per_joint: np.ndarray  # [T, N] detection rates
    counts: np.ndarray  # [N] samples included per joint
    excluded: np.ndarray  # [N] samples without usable ground truth

    @property
    def mean(self) -> np.ndarray:
        return self.per_joint.mean(axis=1)

    def at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.thresholds - t)))
        return self.per_joint[i]


def pck(
    preds: np.ndarray,
    truths: np.ndarray,
    normalizer: np.ndarray,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    valid: np.ndarray | None = None,
) -> PCKCurve:
    """Percentage of correct keypoints over ``preds``/``truths`` [S, N, 2].

    ``normalizer`` holds one positive length per sample.
    """
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape or preds.ndim != 3:
        raise ValueError(f"pck expects matching [S, N, 2] arrays, got {preds.shape} and {truths.shape}")
    norm = np.asarray(normalizer, dtype=np.float64).reshape(-1)
    if norm.shape[0] != preds.shape[0]:
        raise ValueError("one normalizer per sample required")
    if np.any(~(norm > 0)):
        raise ValueError("normalizer must be > 0 for every sample")
    ok = _valid_mask(truths, valid)
    dist = np.linalg.norm(np.where(ok[..., None], preds - truths, 0.0), axis=-1) / norm[:, None]
    ts = np.asarray(thresholds, dtype=np.float64)
    counts = ok.sum(axis=0)
    hits = (dist[None] <= ts[:, None, None]) & ok[None]
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = np.where(counts > 0, hits.sum(axis=1) / np.maximum(counts, 1), 0.0)
    curve = PCKCurve(ts, rates, counts, (~ok).sum(axis=0))
    if np.any(np.diff(curve.per_joint, axis=0) < 0):
        raise AssertionError("PCK curve is not monotone in threshold")
    return curve


def pckh(
    preds: np.ndarray,
    truths: np.ndarray,
    head_segment_length: np.ndarray,
    t: float = 0.5,
    valid: np.ndarray | None = None,
) -> np.ndarray:
    """Per-joint detection rate at ``t`` x head segment length."""
    return pck(preds, truths, head_segment_length, [t], valid).per_joint[0]


@dataclass
class ErrorHistogram:
    bin_centers: np.ndarray
    counts: np.ndarray
    sigma: float
    mean: float
    included: int
    outliers: int

    @property
    def total(self) -> int:
        return self.included + self.outliers


def error_histogram(
    preds: np.ndarray,
    truths: np.ndarray,
    axis: int = 0,
    bin_width: float = 1.0,
    outlier_cut: float = 20.0,
    valid: np.ndarray | None = None,
) -> ErrorHistogram:
    """Histogram of signed ``pred - truth`` along one axis (0 = x, 1 = y).

    Errors beyond +-outlier_cut are counted separately and left out of both
    the histogram and sigma.  Bin k is centered on ``k * bin_width``.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    if not np.isfinite(outlier_cut) or outlier_cut < 0:
        raise ValueError("outlier_cut must be finite and >= 0")
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    ok = _valid_mask(truths, valid)
    err = (preds[..., axis] - truths[..., axis])[ok]
    keep = np.abs(err) <= outlier_cut
    inc = err[keep]
    K = int(np.ceil(outlier_cut / bin_width))
    centers = np.arange(-K, K + 1) * bin_width
    idx = np.clip(np.floor(inc / bin_width + 0.5).astype(np.int64) + K, 0, 2 * K)
    counts = np.bincount(idx, minlength=2 * K + 1)
    sigma = float(inc.std()) if inc.size else 0.0
    mean = float(inc.mean()) if inc.size else 0.0
    return ErrorHistogram(centers, counts, sigma, mean, int(inc.size), int((~keep).sum()))


def annotation_sigma(per_image: Sequence[Sequence[float]], downsample_ratio: float = 1.0) -> float:
    """Average over images of the per-image population sigma of repeated
    annotations, divided by ``downsample_ratio``."""
    if not per_image:
        raise ValueError("no images given")
    sigmas = []
    for i, ann in enumerate(per_image):
        a = np.asarray(ann, dtype=np.float64)
        if a.size < 2:
            raise ValueError(f"image {i}: need at least 2 annotators, got {a.size}")
        sigmas.append(a.std())
    return float(np.mean(sigmas)) / downsample_ratio


def annotation_sigma_table(annotations: dict[str, Sequence[Sequence[float]]], downsample_ratio: float = 1.0) -> dict[str, float]:
    return {name: annotation_sigma(per_image, downsample_ratio) for name, per_image in annotations.items()}


def format_sigma_table(rows: dict[str, dict[str, float]], joints: Sequence[str] = SIGMA_TABLE_JOINTS) -> str:
    """CSV text with one row per source (e.g. "Label Noise", "model 4x") and
    one column per joint; missing entries are left blank."""
    lines = [",".join(["source", *joints])]
    for source, vals in rows.items():
        lines.append(",".join([source, *(f"{vals[j]:.2f}" if j in vals else "" for j in joints)]))
    return "\n".join(lines) + "\n"


@dataclass
class EvalReport:
    joint_names: list[str]
    curve: PCKCurve
    histograms: dict[str, ErrorHistogram]
    mean_error: dict[str, float]
    label: str = "model"
    extra: dict = field(default_factory=dict)

    @property
    def sigma(self) -> dict[str, float]:
        return {k: h.sigma for k, h in self.histograms.items()}

    def summary(self) -> dict:
        return {
            "label": self.label,
            "joints": self.joint_names,
            "samples": {n: int(c) for n, c in zip(self.joint_names, self.curve.counts)},
            "excluded": {n: int(c) for n, c in zip(self.joint_names, self.curve.excluded)},
            "sigma_x": {k: round(v, 6) for k, v in self.sigma.items()},
            "outliers_x": {k: h.outliers for k, h in self.histograms.items()},
            "mean_error_px": {k: round(v, 6) for k, v in self.mean_error.items()},
            "pck_mean": {f"{t:.3f}": round(float(v), 6) for t, v in zip(self.curve.thresholds, self.curve.mean)},
            **self.extra,
        }

    def write(self, out_dir: str | Path, prefix: str = "") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pck_path = out / f"{prefix}pck.csv"
        with pck_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", *self.joint_names, "mean"])
            for t, row, m in zip(self.curve.thresholds, self.curve.per_joint, self.curve.mean):
                w.writerow([f"{t:.3f}", *(f"{v:.6f}" for v in row), f"{m:.6f}"])
        hist_path = out / f"{prefix}hist_x.csv"
        with hist_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["joint", "bin_center", "count"])
            for name, h in self.histograms.items():
                for c, n in zip(h.bin_centers, h.counts):
                    w.writerow([name, f"{c:g}", int(n)])
        summary_path = out / f"{prefix}summary.json"
        summary_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return [pck_path, hist_path, summary_path]


def evaluate(
    preds: np.ndarray,
    truths: np.ndarray,
    valid: np.ndarray,
    normalizer: np.ndarray,
    joint_names: Sequence[str],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    label: str = "model",
    bin_width: float = 1.0,
    outlier_cut: float = 20.0,
) -> EvalReport:
    curve = pck(preds, truths, normalizer, thresholds, valid)
    hists, mean_err = {}, {}
    ok = _valid_mask(truths, valid)
    for j, name in enumerate(joint_names):
        hists[name] = error_histogram(preds[:, j], truths[:, j], 0, bin_width, outlier_cut, ok[:, j])
        d = np.linalg.norm(preds[:, j] - truths[:, j], axis=-1)[ok[:, j]]
        mean_err[name] = float(d.mean()) if d.size else float("nan")
    return EvalReport(list(joint_names), curve, hists, mean_err, label)
