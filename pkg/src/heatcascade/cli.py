"""Command-line entry point: synth, train, eval, gradcheck, compare, plot.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .cascade import FineConfig
from .coarse import CoarseConfig
from .evaluation import EvalReport, evaluate
from .params import ModelParams
from .synth import JOINT_NAMES, AnnotatedSample, AugmentRanges, SynthSpec, generate_dataset, read_dataset, write_dataset
from .training import (
    GREEDY_PREFIX,
    TrainConfig,
    TrainingDiverged,
    TrainingLog,
    build_params,
    greedy_cascade_baseline,
    pool_scaled_lr,
    predict,
    train_schedule,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DATASET_NAME = "dataset.bin"
CHECKPOINT_NAME = "checkpoint.bin"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    coarse: CoarseConfig
    fine: FineConfig
    train: TrainConfig
    seed: int | None

    def to_dict(self) -> dict:
        return {
            "coarse": dataclasses.asdict(self.coarse),
            "fine": dataclasses.asdict(self.fine),
            "train": self.train.to_dict(),
            "seed": self.seed,
        }

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise UsageError(f"unknown {section} config keys: {', '.join(sorted(unknown))}")
    return cls(**values)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file values, then flags on top (flags win)."""
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise RuntimeError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        extra = set(raw) - {"coarse", "fine", "train", "seed"}
        if extra:
            raise UsageError(f"unknown config sections: {', '.join(sorted(extra))}")
    coarse = dict(raw.get("coarse", {}))
    fine = dict(raw.get("fine", {}))
    train = dict(raw.get("train", {}))
    seed = raw.get("seed")
    if getattr(args, "pool", None) is not None:
        coarse["pool_factor"] = args.pool
    if getattr(args, "lam", None) is not None:
        fine["lam"] = args.lam
    for flag, key in (("epochs_coarse", "epochs_coarse"), ("epochs_fine", "epochs_fine"), ("epochs_joint", "epochs_joint"), ("lr", "lr_coarse")):
        if getattr(args, flag, None) is not None:
            train[key] = getattr(args, flag)
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed is not None:
        train["seed"] = seed
    if "augment_ranges" in train and isinstance(train["augment_ranges"], dict):
        train["augment_ranges"] = AugmentRanges(**{k: tuple(v) if isinstance(v, list) else v for k, v in train["augment_ranges"].items()})
    try:
        return RunConfig(_build(CoarseConfig, coarse, "coarse"), _build(FineConfig, fine, "fine"), _build(TrainConfig, train, "train"), seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _require_seed(cfg: RunConfig, command: str) -> int:
    if cfg.seed is None:
        raise UsageError(f"{command} needs a seed (--seed or 'seed' in the config file)")
    return int(cfg.seed)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig | None, artifacts: Sequence[Path], extra: dict | None = None) -> Path:
    """Record what produced the files in ``out``.  Contains no timestamps so
    identical runs give identical manifests."""
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed if cfg else None,
        "config": cfg.to_dict() if cfg else None,
        "config_hash": cfg.hash() if cfg else None,
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_dataset(path: str) -> list[AnnotatedSample]:
    try:
        return read_dataset(path)
    except OSError as exc:
        raise RuntimeError(f"cannot read dataset {path}: {exc}") from exc


def _load_checkpoint(path: str) -> tuple[ModelParams, dict]:
    try:
        return ModelParams.load(path)
    except OSError as exc:
        raise RuntimeError(f"cannot read checkpoint {path}: {exc}") from exc


def report_for(samples: Sequence[AnnotatedSample], preds: np.ndarray, label: str) -> EvalReport:
    """PCK (torso-diameter normalizer), x-error histograms and mean errors."""
    truths = np.stack([s.joints for s in samples])
    valid = np.stack([s.valid for s in samples])
    norm = np.array([s.scale for s in samples])
    return evaluate(preds, truths, valid, norm, JOINT_NAMES, label=label)


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    seed = _require_seed(cfg, "synth")
    out = _out_dir(args)
    spec = SynthSpec(height=cfg.coarse.height, width=cfg.coarse.width, distractor_prob=args.distractor_prob)
    path = out / DATASET_NAME
    write_dataset(path, generate_dataset(seed, args.count, spec))
    write_manifest(out, "synth", cfg, [path], {"count": args.count, "synth": dataclasses.asdict(spec)})
    print(f"wrote {args.count} samples to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    seed = _require_seed(cfg, "train")
    samples = _read_dataset(args.dataset)
    out = _out_dir(args)
    log_path = out / "train_log.jsonl"
    params, _ = train_schedule(samples, cfg.coarse, cfg.fine, cfg.train, build_params(cfg.coarse, cfg.fine, seed), TrainingLog(log_path))
    ckpt = out / CHECKPOINT_NAME
    params.save(ckpt, {"run": cfg.to_dict()})
    write_manifest(out, "train", cfg, [ckpt, log_path])
    print(f"wrote {ckpt} ({params.count()} parameters)")
    return EXIT_OK


def _config_from_checkpoint(meta: dict) -> tuple[CoarseConfig, FineConfig]:
    run = meta.get("run", {})
    return CoarseConfig(**run.get("coarse", {})), FineConfig(**run.get("fine", {}))


def cmd_eval(args) -> int:
    params, meta = _load_checkpoint(args.checkpoint)
    samples = _read_dataset(args.dataset)
    ccfg, fcfg = _config_from_checkpoint(meta)
    out = _out_dir(args)
    prefix = GREEDY_PREFIX if args.greedy else "fine"
    pr = predict(samples, params, ccfg, fcfg, fine_prefix=prefix)
    written = report_for(samples, pr.coarse, "coarse").write(out, "coarse_")
    if pr.final is not None:
        rep = report_for(samples, pr.final, "cascade")
        written += rep.write(out, "final_")
        print(f"cascade PCK@{rep.curve.thresholds[0]:.3f} = {rep.curve.mean[0]:.3f}")
    cfg = RunConfig(ccfg, fcfg, TrainConfig(), meta.get("run", {}).get("seed"))
    write_manifest(out, "eval", cfg, written, {"checkpoint_sha256": _sha256(Path(args.checkpoint))})
    print(f"wrote {len(written)} report files to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradient_suite

    results = run_gradient_suite(seed=args.seed if args.seed is not None else 0, max_per_param=args.max_per_param)
    worst = 0.0
    for name, rep in results:
        worst = max(worst, rep.max_rel_error)
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {name}: max_rel_err={rep.max_rel_error:.3e} checked={rep.checked} excluded={rep.excluded}")
    ok = all(rep.passed for _, rep in results)
    print(f"{'PASS' if ok else 'FAIL'} max relative error {worst:.3e} (tolerance 1e-5)")
    return EXIT_OK if ok else EXIT_RUNTIME


def _write_joined(path: Path, reports: dict[str, EvalReport]) -> Path:
    first = next(iter(reports.values()))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", *reports])
        for i, t in enumerate(first.curve.thresholds):
            w.writerow([f"{t:.3f}", *(f"{r.curve.mean[i]:.6f}" for r in reports.values())])
    return path


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    seed = _require_seed(cfg, "compare")
    train = _read_dataset(args.dataset)
    test = _read_dataset(args.test_dataset) if args.test_dataset else train
    out = _out_dir(args)
    ccfg, fcfg, tcfg = cfg.coarse, cfg.fine, cfg.train

    coarse, _ = train_schedule(train, ccfg, fcfg, tcfg, build_params(ccfg, fcfg, seed), TrainingLog(out / "cascade_log.jsonl"), phases=(1,))
    coarse_only = coarse.copy()
    cascade, _ = train_schedule(train, ccfg, fcfg, tcfg, coarse, TrainingLog(out / "cascade_log_fine.jsonl"), phases=(2, 3))
    greedy = greedy_cascade_baseline(train, ccfg, fcfg, tcfg, coarse_only, TrainingLog(out / "greedy_log.jsonl"))

    reports = {
        "coarse": report_for(test, predict(test, coarse_only, ccfg).coarse, "coarse"),
        "cascade": report_for(test, predict(test, cascade, ccfg, fcfg).final, "cascade"),
        "greedy": report_for(test, predict(test, greedy.params, ccfg, fcfg, fine_prefix=GREEDY_PREFIX).final, "greedy"),
    }
    written = [out / "cascade_log.jsonl", out / "cascade_log_fine.jsonl", out / "greedy_log.jsonl"]
    for name, rep in reports.items():
        written += rep.write(out, f"{name}_")
    written.append(_write_joined(out / "compare_pck.csv", reports))

    if args.pool_sweep:
        sweep = {}
        for pool in (4, 8, 16):
            pc = dataclasses.replace(ccfg, pool_factor=pool)
            tc = dataclasses.replace(tcfg, lr_coarse=pool_scaled_lr(tcfg.lr_coarse, pool))
            p, _ = train_schedule(train, pc, fcfg, tc, build_params(pc, fcfg, seed, fine=False), phases=(1,))
            sweep[f"pool{pool}"] = report_for(test, predict(test, p, pc).coarse, f"pool{pool}")
        written.append(_write_joined(out / "pool_sweep_pck.csv", sweep))

    extra = {"param_counts": {"shared": greedy.shared_count, "greedy": greedy.greedy_count, "greedy_extra_layer": list(greedy.layer)}}
    write_manifest(out, "compare", cfg, written, extra)
    for name, rep in reports.items():
        print(f"{name}: PCK@{rep.curve.thresholds[0]:.3f}={rep.curve.mean[0]:.3f} mean error={np.mean(list(rep.mean_error.values())):.2f}px")
    return EXIT_OK


def _plot_csv(path: Path, out: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    try:
        rows = list(csv.reader(path.open()))
    except OSError as exc:
        raise RuntimeError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise RuntimeError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    fig, ax = plt.subplots(figsize=(5, 4))
    if header[0] == "threshold":
        t = [float(r[0]) for r in body]
        for c, name in enumerate(header[1:], start=1):
            ax.plot(t, [float(r[c]) for r in body], marker="o", ms=3, label=name)
        ax.set_xlabel("normalized distance threshold")
        ax.set_ylabel("PCK")
        ax.set_ylim(0, 1)
    elif header == ["joint", "bin_center", "count"]:
        by_joint: dict[str, list[tuple[float, int]]] = {}
        for j, c, n in body:
            by_joint.setdefault(j, []).append((float(c), int(n)))
        for j, pts in by_joint.items():
            ax.plot([p[0] for p in pts], [p[1] for p in pts], drawstyle="steps-mid", label=j)
        ax.set_xlabel("x error (px)")
        ax.set_ylabel("count")
    else:
        plt.close(fig)
        raise RuntimeError(f"{path}: not a PCK or histogram CSV")
    ax.legend(fontsize=7)
    ax.set_title(path.stem)
    fig.tight_layout()
    target = out / f"{path.stem}.svg"
    # fixed metadata keeps the SVG bytes reproducible
    fig.savefig(target, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return target


def cmd_plot(args) -> int:
    out = _out_dir(args)
    written = [_plot_csv(Path(p), out) for p in args.inputs]
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with 'coarse', 'fine', 'train' sections and 'seed'")
    p.add_argument("--seed", type=int)
    p.add_argument("--pool", type=int, choices=(4, 8, 16))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs-coarse", type=int)
    p.add_argument("--epochs-fine", type=int)
    p.add_argument("--epochs-joint", type=int)
    p.add_argument("--lr", type=float, help="phase-1 learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="heatcascade", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--distractor-prob", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the three-phase schedule")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--greedy", action="store_true", help="refine with the greedy baseline's fine model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-per-param", type=int, default=12)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="coarse-only vs cascade vs greedy baseline")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--test-dataset")
    p.add_argument("--pool-sweep", action="store_true", help="also train coarse-only models at pool 4, 8, 16")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", help="render PCK / histogram CSV files to SVG")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def _thread_limit():
    value = os.environ.get("HEATCASCADE_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"HEATCASCADE_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
