"""Experiment orchestration: every (arm, seed) run, per-run CSVs and a summary JSON."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..core_math import derive_seed
from ..engine import AdaptSession, BatchMetrics, read_metrics_csv, run_stream, write_metrics_csv
from ..losses import DEFAULT_LAMBDA, SourceStats, estimate_source_stats, total_loss
from ..model import ModelSpec, forward_with_prompts, load_checkpoint, predict, quantize
from ..optim import (DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_EPS0, DEFAULT_EPS_MIN, DEFAULT_ETA, DEFAULT_TAU,
                     EpsilonState, OptimizerConfig)
from ..streams import StreamSchedule, TaskSpec, build_stream, generate_source

log = logging.getLogger(__name__)

ARMS = ("dynamic", "fixed", "no-adapt", "zero-lr")
MODES = ("continual", "reset-on-switch", "mixed")
SUMMARY_FORMAT = "fozo-summary"


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class OptimSettings:
    eta: float = DEFAULT_ETA
    n_spsa: int = 1
    n_prompts: int = 3
    eps0: float = DEFAULT_EPS0
    eps_min: float = DEFAULT_EPS_MIN
    alpha: float = DEFAULT_ALPHA
    tau: float = DEFAULT_TAU
    beta: float = DEFAULT_BETA
    lam: float = DEFAULT_LAMBDA


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a comparison.

    ``schedule`` is an inline schedule document or a path to a schedule JSON
    file; ``None`` means the default five-domain continual stream (or its
    pooled version in ``mixed`` mode).
    """

    checkpoint: str | None = None
    source_stats: str | None = None
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    schedule: dict | str | None = None
    mode: str = "continual"
    arms: tuple = ("dynamic", "no-adapt")
    seeds: tuple = (0, 1, 2, 3, 4)
    optimizer: OptimSettings = field(default_factory=OptimSettings)
    quantized: bool = False
    source_samples: int = 2048
    stats_seed: int = 12345
    record_timing: bool = False
    out: str = "runs"

    def __post_init__(self):
        if not self.arms:
            raise ValueError("at least one arm is required")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ValueError(f"unknown arms {bad}; expected a subset of {ARMS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.arms, self.seeds = tuple(self.arms), tuple(int(s) for s in self.seeds)

    def stream_schedule(self) -> StreamSchedule:
        if self.schedule is None:
            return StreamSchedule.mixed_of() if self.mode == "mixed" else StreamSchedule.continual()
        if isinstance(self.schedule, str):
            return StreamSchedule.load(self.schedule)
        return StreamSchedule.from_dict(self.schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arms"], d["seeds"] = list(self.arms), list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = copy.deepcopy(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in (("task", TaskSpec), ("model", ModelSpec), ("optimizer", OptimSettings)):
            if isinstance(doc.get(key), dict):
                doc[key] = typ(**doc[key])
        return cls(**doc)


def running_accuracy(acc) -> np.ndarray:
    """Average accuracy over all batches seen so far, the quantity a convergence curve plots."""
    acc = np.asarray(acc, dtype=np.float64)
    return np.cumsum(acc) / np.arange(1, len(acc) + 1)


def auc(acc) -> float:
    """Normalized trapezoid area under the running-average accuracy curve over batches.

    A flat per-batch accuracy ``a`` gives exactly ``a``; reaching the same
    accuracy sooner gives a larger value.
    """
    curve = running_accuracy(acc)
    if len(curve) == 1:
        return float(curve[0])
    return float(np.trapezoid(curve) / (len(curve) - 1))


def load_model(config: ExperimentConfig):
    if not config.checkpoint or not Path(config.checkpoint).exists():
        raise MissingCheckpointError(
            f"checkpoint {config.checkpoint!r} not found; create one with `fozo pretrain --out <path>` "
            "and pass it via `--set checkpoint=<path>`")
    model = load_checkpoint(config.checkpoint)
    if config.quantized and not hasattr(model, "qweights"):
        model = quantize(model)
    return model


def source_stats_for(model, config: ExperimentConfig) -> SourceStats:
    if config.source_stats and Path(config.source_stats).exists():
        return SourceStats.load(config.source_stats)
    x, _ = generate_source(config.task, config.source_samples, config.stats_seed)
    return estimate_source_stats(model, (x[i:i + 256] for i in range(0, len(x), 256)))


def run_no_adapt(model, source: SourceStats, stream, lam: float = DEFAULT_LAMBDA) -> list[BatchMetrics]:
    """Frozen model without prompts: one forward pass per batch, nothing learned."""
    metrics = []
    for t, b in enumerate(stream, start=1):
        start = time.perf_counter()
        out = forward_with_prompts(model, None, b.inputs)
        br = total_loss(out.logits, out.cls_per_layer, source, lam)
        acc = float(np.mean(predict(out.logits) == b.labels))
        metrics.append(BatchMetrics(t=t, loss=br, eps=0.0, reset=False, acc=acc, fp_count=1,
                                    wall_ms=1000.0 * (time.perf_counter() - start), domain=b.domain))
    return metrics


def run_arm(model, source: SourceStats, stream, arm: str, seed: int, opt: OptimSettings,
            mode: str = "continual") -> list[BatchMetrics]:
    """One run of ``arm`` over ``stream``; prompts and probes are seeded by ``seed``."""
    if arm == "no-adapt":
        return run_no_adapt(model, source, stream, opt.lam)
    cfg = OptimizerConfig(eta=0.0 if arm == "zero-lr" else opt.eta, n_spsa=opt.n_spsa,
                          n_prompts=opt.n_prompts, embed_dim=model.spec.embed_dim)
    eps = EpsilonState(eps0=opt.eps0, eps_min=opt.eps_min, alpha=opt.alpha, tau=opt.tau, beta=opt.beta)
    session = AdaptSession(model, source, cfg, eps, lam=opt.lam, seed=seed,
                           eps_schedule="fixed" if arm == "fixed" else "dynamic")
    return run_stream(session, stream, "reset-on-switch" if mode == "reset-on-switch" else "continual")


def summarize_rows(rows: list[dict]) -> dict:
    """Per-run summary computed from CSV rows alone."""
    acc = [r["acc"] for r in rows]
    return {"mean_acc": float(np.mean(acc)), "auc": auc(acc), "fp_total": int(sum(r["fp_count"] for r in rows)),
            "batches": len(rows)}


def run_experiment(config: ExperimentConfig) -> dict:
    """Run every (arm, seed), write ``<arm>_seed<k>.csv`` files and ``summary.json`` under ``config.out``."""
    model = load_model(config)
    source = source_stats_for(model, config)
    schedule = config.stream_schedule()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"format": SUMMARY_FORMAT, "version": 1, "config": config.to_dict(), "arms": {}}
    for arm in config.arms:
        runs = []
        for seed in config.seeds:
            stream = list(build_stream(config.task, schedule, derive_seed(seed, 0x57)))
            start = time.perf_counter()
            metrics = run_arm(model, source, stream, arm, seed, config.optimizer, config.mode)
            wall = time.perf_counter() - start
            path = out / f"{arm}_seed{seed}.csv"
            write_metrics_csv(metrics, path, timing=config.record_timing)
            run = summarize_rows(read_metrics_csv(path))
            run.update(seed=seed, csv=path.name, wall_s=wall)
            runs.append(run)
            log.info("%s seed %d: acc %.4f auc %.4f (%.1fs)", arm, seed, run["mean_acc"], run["auc"], wall)
        summary["arms"][arm] = {
            "runs": runs,
            "mean_acc": float(np.mean([r["mean_acc"] for r in runs])),
            "median_acc": float(np.median([r["mean_acc"] for r in runs])),
            "mean_auc": float(np.mean([r["auc"] for r in runs])),
            "fp_total": int(sum(r["fp_total"] for r in runs)),
            "wall_s": float(sum(r["wall_s"] for r in runs)),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary
