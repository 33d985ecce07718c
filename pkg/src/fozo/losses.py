"""Unsupervised adaptation objective.

``total = lam * stats + entropy`` where ``entropy`` is the batch-summed
prediction entropy and ``stats`` aligns the per-dimension mean/std of the
CLS activations of the shallow half and the deep half of the layers with
statistics recorded on clean source data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .core_math import DTYPE, InvalidArgumentError, check_finite, log_softmax, mean_std
from .model import PromptSet, forward_with_prompts

GROUPS = ("shallow", "deep")
STATS_FORMAT = "fozo-source-stats"
STATS_VERSION = 1
DEFAULT_LAMBDA = 0.4


@dataclass(frozen=True)
class SourceStats:
    mu_shallow: np.ndarray
    sigma_shallow: np.ndarray
    mu_deep: np.ndarray
    sigma_deep: np.ndarray

    def __post_init__(self):
        d = np.shape(self.mu_shallow)
        for name in ("mu_shallow", "sigma_shallow", "mu_deep", "sigma_deep"):
            v = np.asarray(getattr(self, name), dtype=DTYPE)
            if v.ndim != 1 or v.shape != d:
                raise InvalidArgumentError(f"{name} must be a vector of shape {d}")
            check_finite(v, name)
            if name.startswith("sigma") and np.any(v < 0):
                raise InvalidArgumentError(f"{name} must be entrywise >= 0")
            object.__setattr__(self, name, v)

    @property
    def dim(self) -> int:
        return self.mu_shallow.shape[0]

    def group(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"mu_{name}"), getattr(self, f"sigma_{name}")

    def to_json(self) -> str:
        doc = {
            "format": STATS_FORMAT,
            "version": STATS_VERSION,
            "std_convention": "population",
            "d": self.dim,
            "groups": {g: {"mu": self.group(g)[0].tolist(), "sigma": self.group(g)[1].tolist()} for g in GROUPS},
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SourceStats":
        doc = json.loads(text)
        if doc.get("format") != STATS_FORMAT or doc.get("version") != STATS_VERSION:
            raise InvalidArgumentError("not a supported source-stats document")
        g = doc["groups"]
        stats = cls(g["shallow"]["mu"], g["shallow"]["sigma"], g["deep"]["mu"], g["deep"]["sigma"])
        if stats.dim != doc["d"]:
            raise InvalidArgumentError("declared d does not match stored vectors")
        return stats

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SourceStats":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class LossBreakdown:
    stats: float
    entropy: float
    total: float
    lam: float


def entropy_loss(logits: np.ndarray) -> float:
    """Prediction entropy summed over the batch (0 log 0 counts as 0)."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 2:
        raise InvalidArgumentError(f"logits must be (B>=1, K>=2), got {logits.shape}")
    check_finite(logits, "logits")
    logp = log_softmax(logits, axis=1)
    p = np.exp(logp)
    # where p underflows to 0 the product is 0 regardless of logp
    return float(-np.sum(np.where(p > 0, p * logp, 0.0)))


def _group_layers(n_layers: int) -> dict[str, slice]:
    if n_layers <= 0 or n_layers % 2:
        raise InvalidArgumentError(f"layer count must be even, got {n_layers}")
    half = n_layers // 2
    return {"shallow": slice(0, half), "deep": slice(half, n_layers)}


def group_activations(cls_per_layer) -> dict[str, np.ndarray]:
    """Stack each group's taps into one ``(B * layers_in_group, d)`` pool."""
    taps = [np.asarray(t, dtype=DTYPE) for t in cls_per_layer]
    groups = _group_layers(len(taps))
    return {g: np.concatenate(taps[s], axis=0) for g, s in groups.items()}


def stats_alignment_loss(cls_per_layer, source: SourceStats) -> float:
    total = 0.0
    for g, pooled in group_activations(cls_per_layer).items():
        if pooled.shape[1] != source.dim:
            raise InvalidArgumentError(f"activation dim {pooled.shape[1]} != source stats dim {source.dim}")
        mu, sd = mean_std(pooled, axis=0)
        mu_s, sd_s = source.group(g)
        total += float(np.linalg.norm(mu - mu_s) + np.linalg.norm(sd - sd_s))
    return total


def total_loss(logits, cls_per_layer, source: SourceStats, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    if lam < 0:
        raise InvalidArgumentError(f"lambda must be >= 0, got {lam}")
    ent = entropy_loss(logits)
    st = stats_alignment_loss(cls_per_layer, source)
    return LossBreakdown(stats=st, entropy=ent, total=lam * st + ent, lam=float(lam))


def estimate_source_stats(model, source_batches: Iterable[np.ndarray]) -> SourceStats:
    """Pool CLS taps of prompt-free forwards over all clean ``source_batches``."""
    pools: dict[str, list[np.ndarray]] = {g: [] for g in GROUPS}
    empty = PromptSet.empty(model.spec.embed_dim)
    for batch in source_batches:
        out = forward_with_prompts(model, empty, batch)
        for g, pooled in group_activations(out.cls_per_layer).items():
            pools[g].append(pooled)
    if not pools["shallow"]:
        raise InvalidArgumentError("estimate_source_stats needs at least one batch")
    vecs = {}
    for g in GROUPS:
        mu, sd = mean_std(np.concatenate(pools[g], axis=0), axis=0)
        vecs[f"mu_{g}"], vecs[f"sigma_{g}"] = mu, sd
    return SourceStats(**vecs)
