"""Synthetic upper-body stick figures with joint annotations.

Seven upper-body joints: head, then shoulder/elbow/wrist for
the person's left and right arm.  The figure faces the camera, so the
person's left arm sits on the image right.  Shoulders, elbows and wrists are
marked with two-tone discs whose inner half (towards the body midline) and
outer half have type-specific colors; a horizontal flip therefore turns a
left-arm marker into a right-arm marker, consistent with label swapping.

An optional unannotated distractor figure is drawn beside the target person,
which is what the torso prior has to suppress.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

JOINT_NAMES = ("head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist")
FLIP_PAIRS = ((1, 4), (2, 5), (3, 6))
LEFT_SHOULDER, RIGHT_SHOULDER = 1, 4

_MARKER_COLORS = {  # joint type -> (inner, outer)
    "shoulder": ((1.0, 0.0, 0.0), (1.0, 1.0, 0.0)),
    "elbow": ((0.0, 1.0, 0.0), (0.0, 1.0, 1.0)),
    "wrist": ((0.0, 0.0, 1.0), (1.0, 0.0, 1.0)),
}
_HEAD_COLOR = (0.95, 0.75, 0.55)
_TORSO_COLOR = (0.15, 0.2, 0.45)
_UPPER_ARM_COLOR = (0.25, 0.45, 0.25)
_FOREARM_COLOR = (0.55, 0.35, 0.2)


@dataclass
class SynthSpec:
    height: int = 64
    width: int = 64
    distractor_prob: float = 0.0
    distractor_offset: tuple[float, float] = (28.0, 38.0)
    person_scale: tuple[float, float] = (0.85, 1.15)
    clutter: tuple[int, int] = (2, 6)
    noise: float = 0.01
    marker_radius: float = 2.2
    margin: float = 3.0


@dataclass
class AnnotatedSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1], multiples of 1/255
    joints: np.ndarray  # [N, 2] float64 (x, y) in pixels
    valid: np.ndarray  # [N] bool
    torso_xy: np.ndarray  # [2] float64
    scale: float  # torso diameter: left shoulder to right hip, pixels
    distractor: np.ndarray | None = field(default=None, compare=False)  # unannotated second figure, for tests


@dataclass
class _Figure:
    joints: np.ndarray
    neck: np.ndarray
    hips: np.ndarray  # [2, 2] left, right
    torso: np.ndarray
    s: float


def _sample_figure(rng: np.random.Generator, spec: SynthSpec, cx: float, cy: float, s: float) -> _Figure:
    neck = np.array([cx, cy - 10 * s])
    head = np.array([cx, cy - 19 * s])
    hips = np.array([[cx + 6 * s, cy + 10 * s], [cx - 6 * s, cy + 10 * s]])
    joints = np.zeros((7, 2))
    joints[0] = head
    for side, (sho, elb, wri) in ((+1, (1, 2, 3)), (-1, (4, 5, 6))):
        shoulder = np.array([cx + side * 8 * s, cy - 10 * s])
        upper = 10 * s * rng.uniform(0.85, 1.15)
        fore = 9 * s * rng.uniform(0.85, 1.15)
        theta = np.deg2rad(rng.uniform(-20, 110))
        phi = theta + np.deg2rad(rng.uniform(-100, 100))
        elbow = shoulder + upper * np.array([side * np.sin(theta), np.cos(theta)])
        wrist = elbow + fore * np.array([side * np.sin(phi), np.cos(phi)])
        joints[sho], joints[elb], joints[wri] = shoulder, elbow, wrist
    return _Figure(joints, neck, hips, np.array([cx, cy]), s)


def _segment_coverage(px, py, a, b, width):
    d = b - a
    L2 = max(float(d @ d), 1e-12)
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / L2, 0.0, 1.0)
    dist = np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))
    return np.clip(width / 2 - dist + 0.5, 0.0, 1.0)


def _disc_coverage(px, py, c, r):
    return np.clip(r - np.hypot(px - c[0], py - c[1]) + 0.5, 0.0, 1.0)


def _paint(img, cov, color):
    color = np.asarray(color, dtype=np.float64)[:, None, None]
    img *= 1.0 - cov
    img += cov * color


def _draw_figure(img: np.ndarray, fig: _Figure, spec: SynthSpec) -> None:
    H, W = img.shape[1:]
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    s = fig.s
    j = fig.joints
    for a, b in ((fig.neck, fig.hips.mean(axis=0)), (j[1], j[4]), (fig.hips[0], fig.hips[1])):
        _paint(img, _segment_coverage(px, py, a, b, 11 * s), _TORSO_COLOR)
    _paint(img, _segment_coverage(px, py, fig.neck, j[0], 3 * s), _HEAD_COLOR)
    for sho, elb, wri in ((1, 2, 3), (4, 5, 6)):
        _paint(img, _segment_coverage(px, py, j[sho], j[elb], 2.5 * s), _UPPER_ARM_COLOR)
        _paint(img, _segment_coverage(px, py, j[elb], j[wri], 2.5 * s), _FOREARM_COLOR)
    _paint(img, _disc_coverage(px, py, j[0], 4 * s), _HEAD_COLOR)
    r = spec.marker_radius
    for idx, kind in ((1, "shoulder"), (2, "elbow"), (3, "wrist"), (4, "shoulder"), (5, "elbow"), (6, "wrist")):
        side = 1.0 if idx <= 3 else -1.0
        inner, outer = (np.asarray(c)[:, None, None] for c in _MARKER_COLORS[kind])
        t = np.clip(0.5 + side * (px - j[idx, 0]), 0.0, 1.0)  # 1 on the outer half
        cov = _disc_coverage(px, py, j[idx], r)
        img *= 1.0 - cov
        img += cov * ((1.0 - t) * inner + t * outer)


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 1/255 levels the dataset file stores exactly."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _inside(points: np.ndarray, spec: SynthSpec, margin: float) -> bool:
    return bool(
        np.all(points[:, 0] >= margin)
        and np.all(points[:, 0] <= spec.width - 1 - margin)
        and np.all(points[:, 1] >= margin)
        and np.all(points[:, 1] <= spec.height - 1 - margin)
    )


def generate_sample(rng: np.random.Generator, spec: SynthSpec | None = None) -> AnnotatedSample:
    spec = spec or SynthSpec()
    H, W = spec.height, spec.width
    s = rng.uniform(*spec.person_scale)
    cx = rng.uniform(0.34 * W, 0.66 * W)
    cy = rng.uniform(0.5 * H, 0.62 * H)
    for _ in range(200):
        fig = _sample_figure(rng, spec, cx, cy, s)
        if _inside(fig.joints, spec, spec.margin):
            break
    else:
        raise RuntimeError("could not place a figure inside the image; check SynthSpec extents")

    img = np.empty((3, H, W))
    img[:] = rng.uniform(0.3, 0.6) + rng.uniform(-0.05, 0.05, size=3)[:, None, None]
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    for _ in range(rng.integers(spec.clutter[0], spec.clutter[1] + 1)):
        c = rng.uniform([0, 0], [W, H])
        _paint(img, 0.8 * _disc_coverage(px, py, c, rng.uniform(2, 7)), rng.uniform(0.1, 0.8, size=3))

    distractor = None
    if spec.distractor_prob > 0 and rng.random() < spec.distractor_prob:
        side = 1.0 if rng.random() < 0.5 else -1.0
        dcx = cx + side * rng.uniform(*spec.distractor_offset)
        dfig = _sample_figure(rng, spec, dcx, cy + rng.uniform(-3, 3), rng.uniform(*spec.person_scale))
        _draw_figure(img, dfig, spec)
        distractor = dfig.joints
    _draw_figure(img, fig, spec)

    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=img.shape)
    img = _quantize(img)
    diameter = float(np.hypot(*(fig.joints[LEFT_SHOULDER] - fig.hips[1])))
    return AnnotatedSample(img, fig.joints.copy(), np.ones(7, dtype=bool), fig.torso.copy(), diameter, distractor)


def generate_dataset(seed: int, count: int, spec: SynthSpec | None = None) -> list[AnnotatedSample]:
    """``count`` samples from per-sample child streams of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [generate_sample(np.random.default_rng(c), spec) for c in children]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentRanges:
    rotation_deg: float = 20.0
    scale: tuple[float, float] = (0.5, 1.5)
    flip_prob: float = 0.5


def affine_matrix(shape: tuple[int, int], angle_deg: float, scale: float, flip: bool) -> np.ndarray:
    """2x3 map from source (x, y) to augmented (x, y): rotate and scale about
    the image center, then optionally mirror x -> W-1-x."""
    H, W = shape
    c = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    t = np.deg2rad(angle_deg)
    A = scale * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    b = c - A @ c
    M = np.hstack([A, b[:, None]])
    if flip:
        M = np.array([[-1.0, 0.0, W - 1.0], [0.0, 1.0, 0.0]]) @ np.vstack([M, [0, 0, 1]])
    return M


def apply_affine(sample: AnnotatedSample, angle_deg: float, scale: float, flip: bool) -> AnnotatedSample:
    _, H, W = sample.image.shape
    M = affine_matrix((H, W), angle_deg, scale, flip)
    Minv = np.linalg.inv(np.vstack([M, [0, 0, 1]]))[:2]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    sx = Minv[0, 0] * xx + Minv[0, 1] * yy + Minv[0, 2]
    sy = Minv[1, 0] * xx + Minv[1, 1] * yy + Minv[1, 2]
    image = np.stack(
        [map_coordinates(ch.astype(np.float64), [sy, sx], order=1, mode="constant", cval=0.0) for ch in sample.image]
    )
    image = _quantize(image)

    def move(p):
        return p @ M[:, :2].T + M[:, 2]

    joints = move(sample.joints)
    torso = move(sample.torso_xy[None])[0]
    valid = sample.valid.copy()
    distractor = None if sample.distractor is None else move(sample.distractor)
    if flip:
        for a, b in FLIP_PAIRS:
            joints[[a, b]] = joints[[b, a]]
            valid[[a, b]] = valid[[b, a]]
            if distractor is not None:
                distractor[[a, b]] = distractor[[b, a]]
    inside = (joints[:, 0] >= 0) & (joints[:, 0] <= W - 1) & (joints[:, 1] >= 0) & (joints[:, 1] <= H - 1)
    valid &= inside
    torso = np.clip(torso, 0.0, [W - 1.0, H - 1.0])
    return AnnotatedSample(image, joints, valid, torso, sample.scale * scale, distractor)


def augment(sample: AnnotatedSample, rng: np.random.Generator, ranges: AugmentRanges | None = None) -> AnnotatedSample:
    ranges = ranges or AugmentRanges()
    angle = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)
    scale = rng.uniform(*ranges.scale)
    flip = bool(rng.random() < ranges.flip_prob)
    return apply_affine(sample, angle, scale, flip)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"HCDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHIHHBH")  # magic, version, count, height, width, channels, joints


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def dumps_dataset(samples: list[AnnotatedSample]) -> bytes:
    if not samples:
        raise ValueError("cannot write an empty dataset")
    C, H, W = samples[0].image.shape
    N = len(samples[0].joints)
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(samples), H, W, C, N)]
    for smp in samples:
        if smp.image.shape != (C, H, W) or len(smp.joints) != N:
            raise ValueError("all samples must share image extents and joint count")
        parts.append(np.asarray(smp.joints, dtype="<f8").tobytes())
        parts.append(np.asarray(smp.valid, dtype=np.uint8).tobytes())
        parts.append(np.asarray(smp.torso_xy, dtype="<f8").tobytes())
        parts.append(struct.pack("<d", smp.scale))
        parts.append(np.round(smp.image * 255.0).astype(np.uint8).tobytes())
    return b"".join(parts)


def loads_dataset(buf: bytes) -> list[AnnotatedSample]:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(buf))
    magic, version, count, H, W, C, N = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError("bad magic", 0)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    rec = 16 * N + N + 16 + 8 + C * H * W
    pos = _HEADER.size
    samples = []
    for i in range(count):
        if pos + rec > len(buf):
            raise DatasetFormatError(f"truncated record {i} of {count}", pos)
        joints = np.frombuffer(buf, "<f8", 2 * N, pos).reshape(N, 2).astype(np.float64)
        pos += 16 * N
        valid = np.frombuffer(buf, np.uint8, N, pos).astype(bool)
        pos += N
        torso = np.frombuffer(buf, "<f8", 2, pos).astype(np.float64)
        pos += 16
        (scale,) = struct.unpack_from("<d", buf, pos)
        pos += 8
        image = (np.frombuffer(buf, np.uint8, C * H * W, pos).reshape(C, H, W) / np.float32(255.0)).astype(np.float32)
        pos += C * H * W
        samples.append(AnnotatedSample(image, joints, valid, torso, scale))
    if pos != len(buf):
        raise DatasetFormatError("trailing bytes after last record", pos)
    return samples


def write_dataset(path: str | Path, samples: list[AnnotatedSample]) -> None:
    Path(path).write_bytes(dumps_dataset(samples))


def read_dataset(path: str | Path) -> list[AnnotatedSample]:
    return loads_dataset(Path(path).read_bytes())


def stack(samples: list[AnnotatedSample]) -> dict[str, np.ndarray]:
    """Batch arrays: images [B,3,H,W], joints [B,N,2], valid [B,N], torso [B,2], scale [B]."""
    return {
        "images": np.stack([s.image for s in samples]),
        "joints": np.stack([s.joints for s in samples]),
        "valid": np.stack([s.valid for s in samples]),
        "torso": np.stack([s.torso_xy for s in samples]),
        "scale": np.array([s.scale for s in samples]),
    }

