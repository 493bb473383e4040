"""Training: SGD with momentum, the three-phase cascade schedule and the
greedily trained baseline cascade.

Phases:
  1. coarse model alone on E1;
  2. coarse frozen, fine model on E2 over crops of the shared features;
  3. everything on E3 = E1 + lambda * E2.

The greedy baseline keeps the phase-1 coarse model frozen forever and trains
a separate fine model on crops of the normalized input pyramid, with one
extra conv stage per bank so both cascades have (nearly) the same number of
trainable parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Tensor, backward
from .cascade import (
    FineConfig,
    crop_features,
    fine_forward,
    init_fine_params,
    loss_e2,
    loss_e3,
    refine_position,
    render_fine_target,
)
from .coarse import CoarseConfig, argmax_extract, build_pyramid, coarse_forward, init_coarse_params, loss_e1, render_target
from .params import ModelParams
from .synth import AnnotatedSample, AugmentRanges, augment, stack

GREEDY_PREFIX = "greedy"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs_coarse: int = 30
    epochs_fine: int = 10
    epochs_joint: int = 10
    batch_size: int = 16
    lr_coarse: float = 0.05
    lr_fine: float = 0.05
    lr_joint: float = 0.02
    momentum: float = 0.9
    augment: bool = False
    augment_ranges: AugmentRanges = field(default_factory=AugmentRanges)
    seed: int = 0
    grad_clip: float | None = 10.0  # global L2 norm; None disables
    lr_schedule: str = "constant"  # or "cosine": decays to 0 over each phase

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class SGD:
    """Plain SGD with (heavy-ball) momentum on a named subset of params."""

    def __init__(self, params: ModelParams, names: Sequence[str], lr: float, momentum: float = 0.9, clip: float | None = None):
        self.params = params
        self.names = list(names)
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self) -> float:
        grads = [self.params[n].grad for n in self.names]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if not math.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / norm
        for n, g in zip(self.names, grads):
            v = self.velocity[n]
            v *= self.momentum
            v -= (self.lr * factor) * g
            self.params[n].data += v.astype(self.params[n].data.dtype, copy=False)
        return norm


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    E1: float | None = None
    E2: float | None = None
    E3: float | None = None
    metrics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {"phase": self.phase, "epoch": self.epoch, "E1": self.E1, "E2": self.E2, "E3": self.E3, **self.metrics}
        return json.dumps(d, sort_keys=True)


class TrainingLog:
    """Per-epoch records, optionally streamed to a JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[EpochRecord] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.write_text("")

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(rec.to_json() + "\n")

    def phase(self, p: int) -> list[EpochRecord]:
        return [r for r in self.records if r.phase == p]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def iterate_batches(
    samples: Sequence[AnnotatedSample],
    batch_size: int,
    rng: np.random.Generator,
    aug: AugmentRanges | None,
) -> Iterable[dict[str, np.ndarray]]:
    order = rng.permutation(len(samples))
    for i in range(0, len(order), batch_size):
        chosen = [samples[k] for k in order[i : i + batch_size]]
        if aug is not None:
            chosen = [augment(s, rng, aug) for s in chosen]
        yield stack(chosen)


def _check(value: float, phase: int, epoch: int, batch: int, name: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{name} became {value} in phase {phase}, epoch {epoch}, batch {batch}")


# ---------------------------------------------------------------------------
# per-step losses
# ---------------------------------------------------------------------------


def coarse_step_loss(batch: dict, params: ModelParams, ccfg: CoarseConfig, rng: np.random.Generator, phase: str = "train") -> Tensor:
    out = coarse_forward(build_pyramid(batch["images"], ccfg.levels), params, ccfg, phase, rng)
    return loss_e1(out.heatmaps, render_target(batch["joints"], ccfg, batch["valid"], out.heatmaps.values.dtype))


def cascade_step_losses(
    batch: dict,
    params: ModelParams,
    ccfg: CoarseConfig,
    fcfg: FineConfig,
    rng: np.random.Generator | None,
    phase: str = "train",
    freeze_coarse: bool = False,
) -> tuple[Tensor, Tensor]:
    """(E1, E2) for one batch.  With ``freeze_coarse`` the shared features
    are detached so no gradient reaches coarse-side params."""
    out = coarse_forward(build_pyramid(batch["images"], ccfg.levels), params, ccfg, phase, rng)
    dtype = out.heatmaps.values.dtype
    e1 = loss_e1(out.heatmaps, render_target(batch["joints"], ccfg, batch["valid"], dtype))
    coarse_xy = argmax_extract(out.heatmaps)
    banks = [Tensor(b.data) for b in out.banks] if freeze_coarse else out.banks
    crops, windows = crop_features(banks, coarse_xy, ccfg.pool_factor, fcfg, out.bank_scales)
    fine = fine_forward(crops, params, fcfg, windows)
    e2 = loss_e2(fine, render_fine_target(batch["joints"], batch["valid"], windows, fcfg, dtype))
    return e1, e2


def greedy_step_loss(batch: dict, params: ModelParams, ccfg: CoarseConfig, fcfg: FineConfig) -> Tensor:
    """E2 of the greedy fine model, which sees crops of the LCN input pyramid."""
    out = coarse_forward(build_pyramid(batch["images"], ccfg.levels), params, ccfg, "infer")
    dtype = out.heatmaps.values.dtype
    coarse_xy = argmax_extract(out.heatmaps)
    crops, windows = crop_features([Tensor(x) for x in out.inputs], coarse_xy, ccfg.pool_factor, fcfg, out.bank_scales)
    fine = fine_forward(crops, params, fcfg, windows, prefix=GREEDY_PREFIX)
    return loss_e2(fine, render_fine_target(batch["joints"], batch["valid"], windows, fcfg, dtype))


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


@dataclass
class Predictions:
    coarse: np.ndarray  # [S, N, 2]
    final: np.ndarray | None  # [S, N, 2]


def predict(
    samples: Sequence[AnnotatedSample],
    params: ModelParams,
    ccfg: CoarseConfig,
    fcfg: FineConfig | None = None,
    batch_size: int = 32,
    fine_prefix: str = "fine",
) -> Predictions:
    """Inference-mode coarse argmax and (if fine params exist) refined joints.

    ``fine_prefix="greedy"`` refines with the greedy baseline, which crops
    the normalized input pyramid instead of the shared features.
    """
    fcfg = fcfg or FineConfig()
    has_fine = f"{fine_prefix}.head.w" in params
    coarse_all, final_all = [], []
    for i in range(0, len(samples), batch_size):
        batch = stack(list(samples[i : i + batch_size]))
        out = coarse_forward(build_pyramid(batch["images"], ccfg.levels), params, ccfg, "infer")
        cxy = argmax_extract(out.heatmaps)
        coarse_all.append(cxy)
        if has_fine:
            src = out.inputs if fine_prefix == GREEDY_PREFIX else [b.data for b in out.banks]
            crops, windows = crop_features([Tensor(x) for x in src], cxy, ccfg.pool_factor, fcfg, out.bank_scales)
            fine = fine_forward(crops, params, fcfg, windows, prefix=fine_prefix)
            final_all.append(refine_position(cxy, fine, windows, (ccfg.height, ccfg.width)))
    return Predictions(np.concatenate(coarse_all), np.concatenate(final_all) if has_fine else None)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


def pool_scaled_lr(lr: float, pool_factor: int, reference: int = 8) -> float:
    """Shrink the learning rate for pool factors finer than ``reference``.

    E1 sums over every heat-map cell, so the gradient of a shared conv
    weight grows with the cell count (1 / pool^2).  At pool 4 the unscaled
    default rate kills the ReLUs within a few epochs.
    """
    return lr * min(1.0, (pool_factor / reference) ** 2)


def build_params(ccfg: CoarseConfig, fcfg: FineConfig, seed: int, dtype=np.float32, fine: bool = True) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = init_coarse_params(ccfg, rng, dtype)
    if fine:
        init_fine_params(ccfg.feature_channels, ccfg.levels, ccfg.n_joints, fcfg, rng, dtype, params=p)
    return p


def _run_epochs(
    phase: int,
    epochs: int,
    samples: Sequence[AnnotatedSample],
    tcfg: TrainConfig,
    opt: SGD,
    rng: np.random.Generator,
    step: Callable[[dict], dict[str, Tensor]],
    objective: str,
    log: TrainingLog,
    evaluator: Callable[[], dict] | None,
) -> None:
    aug = tcfg.augment_ranges if tcfg.augment else None
    base_lr = opt.lr
    for epoch in range(epochs):
        if tcfg.lr_schedule == "cosine":
            opt.lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
        sums: dict[str, float] = {}
        n = 0
        for bi, batch in enumerate(iterate_batches(samples, tcfg.batch_size, rng, aug)):
            opt.params.zero_grad()
            try:
                losses = step(batch)
                for k, t in losses.items():
                    _check(t.item(), phase, epoch, bi, k)
                backward(losses[objective])
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"phase {phase}, epoch {epoch}, batch {bi}: {exc}") from exc
            m = len(batch["images"])
            for k, t in losses.items():
                sums[k] = sums.get(k, 0.0) + t.item() * m
            n += m
        means = {k: v / n for k, v in sums.items()}
        rec = EpochRecord(phase, epoch, means.get("E1"), means.get("E2"), means.get("E3"))
        if evaluator is not None:
            rec.metrics = evaluator()
        log.append(rec)
    opt.lr = base_lr


def train_schedule(
    samples: Sequence[AnnotatedSample],
    ccfg: CoarseConfig,
    fcfg: FineConfig,
    tcfg: TrainConfig,
    params: ModelParams | None = None,
    log: TrainingLog | None = None,
    evaluator: Callable[[ModelParams], dict] | None = None,
    phases: Sequence[int] = (1, 2, 3),
) -> tuple[ModelParams, TrainingLog]:
    """Run the requested phases of the cascade schedule in order."""
    if not samples:
        raise ValueError("empty training set")
    params = params if params is not None else build_params(ccfg, fcfg, tcfg.seed)
    log = log if log is not None else TrainingLog()
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
    ev = (lambda: evaluator(params)) if evaluator is not None else None

    if 1 in phases and tcfg.epochs_coarse > 0:
        opt = SGD(params, params.names("coarse"), tcfg.lr_coarse, tcfg.momentum, tcfg.grad_clip)
        _run_epochs(1, tcfg.epochs_coarse, samples, tcfg, opt, rng,
                    lambda b: {"E1": coarse_step_loss(b, params, ccfg, rng)}, "E1", log, ev)
    if 2 in phases and tcfg.epochs_fine > 0:
        opt = SGD(params, params.names("fine"), tcfg.lr_fine, tcfg.momentum, tcfg.grad_clip)

        def step2(b):
            _, e2 = cascade_step_losses(b, params, ccfg, fcfg, None, "infer", freeze_coarse=True)
            return {"E2": e2}

        _run_epochs(2, tcfg.epochs_fine, samples, tcfg, opt, rng, step2, "E2", log, ev)
    if 3 in phases and tcfg.epochs_joint > 0:
        opt = SGD(params, params.names(), tcfg.lr_joint, tcfg.momentum, tcfg.grad_clip)

        def step3(b):
            e1, e2 = cascade_step_losses(b, params, ccfg, fcfg, rng, "train")
            return {"E1": e1, "E2": e2, "E3": loss_e3(e1, e2, fcfg.lam)}

        _run_epochs(3, tcfg.epochs_joint, samples, tcfg, opt, rng, step3, "E3", log, ev)
    return params, log


def fine_param_count(in_channels: int, n_banks: int, n_joints: int, fcfg: FineConfig, pre_layer: tuple[int, int] | None = None) -> int:
    F, k, Fu = fcfg.trunk_channels, fcfg.trunk_kernel, fcfg.fuse_channels
    per_bank = F * F * k * k + F
    if pre_layer is None:
        per_bank += F * in_channels * k * k + F
    else:
        w, kp = pre_layer
        per_bank += w * in_channels * kp * kp + w + F * w * k * k + F
    return n_banks * per_bank + Fu * F + Fu + n_joints * Fu + n_joints


def match_greedy_capacity(ccfg: CoarseConfig, fcfg: FineConfig, kernels: Sequence[int] = (1, 3, 5), max_width: int = 64) -> tuple[tuple[int, int], int, int]:
    """Pick the extra layer (width, kernel) for the greedy fine model whose
    parameter count is closest to the shared-feature fine model.

    Returns ((width, kernel), shared_count, greedy_count); both counts include
    the common coarse model.
    """
    coarse = init_coarse_params(ccfg, np.random.default_rng(0)).count()
    shared = coarse + fine_param_count(ccfg.feature_channels, ccfg.levels, ccfg.n_joints, fcfg)
    best = None
    for k in kernels:
        for w in range(1, max_width + 1):
            g = coarse + fine_param_count(3, ccfg.levels, ccfg.n_joints, fcfg, (w, k))
            key = (abs(g - shared), k, w)
            if best is None or key < best[0]:
                best = (key, (w, k), g)
    _, layer, greedy = best
    return layer, shared, greedy


@dataclass
class GreedyResult:
    params: ModelParams  # frozen coarse + greedy fine
    log: TrainingLog
    layer: tuple[int, int]
    shared_count: int
    greedy_count: int

    @property
    def relative_gap(self) -> float:
        return abs(self.shared_count - self.greedy_count) / self.shared_count


def greedy_cascade_baseline(
    samples: Sequence[AnnotatedSample],
    ccfg: CoarseConfig,
    fcfg: FineConfig,
    tcfg: TrainConfig,
    coarse_params: ModelParams | None = None,
    log: TrainingLog | None = None,
    evaluator: Callable[[ModelParams], dict] | None = None,
) -> GreedyResult:
    """Independently trained cascade.  The coarse model is trained on E1
    (or taken from ``coarse_params``) and then never updated; the fine model
    trains on E2 for ``epochs_fine + epochs_joint`` epochs."""
    log = log if log is not None else TrainingLog()
    if coarse_params is None:
        coarse_params, _ = train_schedule(samples, ccfg, fcfg, tcfg, build_params(ccfg, fcfg, tcfg.seed, fine=False), log, evaluator, phases=(1,))
    params = coarse_params.subset("coarse.").copy()
    layer, shared, greedy = match_greedy_capacity(ccfg, fcfg)
    dtype = params["coarse.head2.w"].dtype
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 2]))
    init_fine_params(3, ccfg.levels, ccfg.n_joints, fcfg, rng, dtype, prefix=GREEDY_PREFIX, params=params, pre_layer=layer)
    opt = SGD(params, params.names("fine"), tcfg.lr_fine, tcfg.momentum, tcfg.grad_clip)
    ev = (lambda: evaluator(params)) if evaluator is not None else None
    _run_epochs(2, tcfg.epochs_fine + tcfg.epochs_joint, samples, tcfg, opt, rng,
                lambda b: {"E2": greedy_step_loss(b, params, ccfg, fcfg)}, "E2", log, ev)
    return GreedyResult(params, log, layer, shared, greedy)
