"""Online forward-only adaptation loop.

One :class:`AdaptSession` owns the prompts and the perturbation schedule for
a single stream. Each batch costs exactly ``2 * n_spsa`` forward passes:
the antithetic probe pairs double as the prediction passes.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .losses import DEFAULT_LAMBDA, LossBreakdown, SourceStats, total_loss
from .model import PromptSet, forward_with_prompts, predict
from .optim import (EpsilonState, OptimizerConfig, ProbeFailure, apply_updates, epsilon_step, probe_seed,
                    spsa_probe)

log = logging.getLogger(__name__)

METRICS_SCHEMA = "fozo-metrics v1"
METRICS_COLUMNS = ("t", "domain", "loss_total", "loss_ent", "loss_stats", "eps", "reset", "acc", "fp_count",
                   "wall_ms")


@dataclass
class BatchMetrics:
    t: int
    loss: LossBreakdown | None
    eps: float
    reset: bool
    acc: float | None
    fp_count: int
    wall_ms: float
    domain: str = ""
    update_skipped: bool = False

    def row(self, timing: bool = True) -> dict:
        nan = float("nan")
        return {
            "t": self.t,
            "domain": self.domain,
            "loss_total": self.loss.total if self.loss else nan,
            "loss_ent": self.loss.entropy if self.loss else nan,
            "loss_stats": self.loss.stats if self.loss else nan,
            "eps": self.eps,
            "reset": int(self.reset),
            "acc": nan if self.acc is None else self.acc,
            "fp_count": self.fp_count,
            "wall_ms": round(self.wall_ms, 3) if timing else 0,
        }


@dataclass
class Candidate:
    """Predictions of one perturbed forward pass with the loss it scored."""

    preds: np.ndarray
    loss: float
    breakdown: LossBreakdown | None = None


def select_predictions(candidates: Sequence[Candidate]) -> Candidate:
    """Lowest-loss candidate; ties and non-finite losses resolve to the earliest one.

    Candidates are ordered probe by probe, ``+`` before ``-``.
    """
    if not candidates:
        raise ValueError("select_predictions needs at least one candidate")
    best = candidates[0]
    for c in candidates[1:]:
        if math.isfinite(c.loss) and (not math.isfinite(best.loss) or c.loss < best.loss):
            best = c
    return best


class AdaptSession:
    """State of one adaptation run over a stream.

    ``eps_schedule`` is ``"dynamic"`` (decay with loss-spike resets) or
    ``"fixed"`` (``eps0`` throughout).
    """

    def __init__(self, model, source: SourceStats, config: OptimizerConfig | None = None,
                 eps_state: EpsilonState | None = None, lam: float = DEFAULT_LAMBDA, seed: int = 0,
                 eps_schedule: str = "dynamic"):
        if eps_schedule not in ("dynamic", "fixed"):
            raise ValueError(f"eps_schedule must be 'dynamic' or 'fixed', got {eps_schedule!r}")
        self.model = model
        self.source = source
        self.config = config or OptimizerConfig(embed_dim=model.spec.embed_dim)
        if self.config.embed_dim != model.spec.embed_dim:
            raise ValueError("optimizer prompt dim does not match the model embed dim")
        self.initial_eps = eps_state or EpsilonState()
        self.lam = lam
        self.seed = int(seed)
        self.eps_schedule = eps_schedule
        self.initial_prompts = PromptSet.init(self.config.n_prompts, self.config.embed_dim, self.seed)
        self.weight_hash = model.weight_hash()
        self.forward_count = 0
        self.t = 0
        self.reset_state()

    def reset_state(self) -> None:
        """Reinitialize prompts and perturbation schedule (step counter keeps running)."""
        self.prompts = self.initial_prompts.copy()
        self.eps_state = self.initial_eps.restart()
        self.last_loss: float | None = None

    def _forward(self, P: np.ndarray, batch: np.ndarray):
        self.forward_count += 1
        return forward_with_prompts(self.model, P, batch)

    def loss_eval(self, batch: np.ndarray):
        """Black-box ``P -> (loss, (preds, breakdown))`` closure over one batch."""
        def evaluate(P):
            out = self._forward(P, batch)
            try:
                br = total_loss(out.logits, out.cls_per_layer, self.source, self.lam)
            except ValueError:
                # non-finite activations: report as a failed evaluation
                return float("nan"), (predict(np.nan_to_num(out.logits)), None)
            return br.total, (predict(out.logits), br)
        return evaluate


def adapt_batch(session: AdaptSession, batch: np.ndarray, labels=None, domain: str = ""):
    """Adapt on one batch and return ``(predictions, BatchMetrics)``."""
    start = time.perf_counter()
    fp_before = session.forward_count
    session.t += 1
    t = session.t

    # schedule epsilon from the previous batch's probe losses
    reset = False
    if session.eps_schedule == "dynamic" and session.last_loss is not None:
        session.eps_state = epsilon_step(session.eps_state, session.last_loss)
        reset = session.eps_state.reset
    eps = session.eps_state.eps_t

    cfg = session.config
    evaluate = session.loss_eval(batch)
    P = session.prompts.values
    records, candidates, probe_losses = [], [], []
    for j in range(cfg.n_spsa):
        seed = probe_seed(session.seed, t, j)
        try:
            res = spsa_probe(evaluate, P, eps, seed)
        except ProbeFailure as err:
            log.warning("batch %d probe %d failed: %s", t, j, err)
            candidates += [Candidate(err.preds_plus[0], err.l_plus), Candidate(err.preds_minus[0], err.l_minus)]
            continue
        records.append(res.record)
        (pp, bp), (pm, bm) = res.preds_plus, res.preds_minus
        candidates += [Candidate(pp, res.l_plus, bp), Candidate(pm, res.l_minus, bm)]
        probe_losses.append(0.5 * (res.l_plus + res.l_minus))

    skipped = not records
    if not skipped:
        session.prompts = PromptSet(apply_updates(P, records, cfg.eta_at(t)))
        session.last_loss = float(np.mean(probe_losses))
    best = select_predictions(candidates)
    preds = best.preds
    acc = None if labels is None else float(np.mean(preds == np.asarray(labels)))
    metrics = BatchMetrics(t=t, loss=best.breakdown, eps=eps, reset=reset, acc=acc,
                           fp_count=session.forward_count - fp_before,
                           wall_ms=1000.0 * (time.perf_counter() - start), domain=domain,
                           update_skipped=skipped)
    return preds, metrics


def run_stream(session: AdaptSession, stream: Iterable, mode: str = "continual") -> list[BatchMetrics]:
    """Adapt over every batch of ``stream``.

    ``continual`` never looks at domain identity. ``reset-on-switch``
    reinitializes prompts and the epsilon schedule at each declared segment
    boundary (after the first).
    """
    if mode not in ("continual", "reset-on-switch"):
        raise ValueError(f"unknown mode {mode!r}")
    metrics = []
    first = True
    for item in stream:
        if mode == "reset-on-switch" and getattr(item, "boundary", False) and not first:
            session.reset_state()
        first = False
        _, m = adapt_batch(session, item.inputs, getattr(item, "labels", None),
                           domain=getattr(item, "domain", ""))
        metrics.append(m)
    return metrics


def write_metrics_csv(metrics: Sequence[BatchMetrics], fh_or_path, timing: bool = True) -> None:
    """Per-batch metrics as CSV; ``timing=False`` writes ``wall_ms`` as 0 for byte-stable output."""
    own = isinstance(fh_or_path, (str, bytes)) or hasattr(fh_or_path, "__fspath__")
    fh = open(fh_or_path, "w", newline="") if own else fh_or_path
    try:
        fh.write(f"# schema: {METRICS_SCHEMA}\n")
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for m in metrics:
            row = m.row(timing)
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if own:
            fh.close()


def read_metrics_csv(fh_or_path) -> list[dict]:
    text = open(fh_or_path).read() if not hasattr(fh_or_path, "read") else fh_or_path.read()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(io.StringIO("\n".join(lines))):
        rows.append({
            "t": int(r["t"]), "domain": r["domain"], "loss_total": float(r["loss_total"]),
            "loss_ent": float(r["loss_ent"]), "loss_stats": float(r["loss_stats"]), "eps": float(r["eps"]),
            "reset": bool(int(r["reset"])), "acc": float(r["acc"]), "fp_count": int(r["fp_count"]),
            "wall_ms": float(r["wall_ms"]),
        })
    return rows
