"""Synthetic source task and corrupted test streams.

Samples are class prototypes plus Gaussian noise, laid out as ``m`` patches
of ``input_dim`` features. Five corruption kinds emulate distribution
shift; each has a magnitude table indexed by severity 0..5 where severity 0
is the identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .core_math import InvalidArgumentError, derive_seed


def _rng(*parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))


@dataclass(frozen=True)
class TaskSpec:
    n_classes: int = 8
    input_dim: int = 8
    n_patches: int = 16
    prototype_seed: int = 0
    noise_scale: float = 2.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidArgumentError("n_classes must be >= 2")
        if self.noise_scale < 0:
            raise InvalidArgumentError("noise_scale must be >= 0")

    def prototypes(self) -> np.ndarray:
        protos = _rng(self.prototype_seed, 0xC1A55).standard_normal(
            (self.n_classes, self.n_patches, self.input_dim))
        return protos


# severity 0..5 magnitudes per corruption kind
MAGNITUDES: dict[str, tuple[float, ...]] = {
    # std of additive noise
    "gaussian-noise": (0.0, 0.3, 0.6, 0.9, 1.2, 1.5),
    # multiplicative gain is 1 + magnitude
    "uniform-scale": (0.0, 0.3, 0.6, 0.9, 1.2, 1.5),
    # fraction of patch positions permuted within each sample
    "patch-shuffle": (0.0, 0.2, 0.35, 0.5, 0.65, 0.8),
    # contrast loss c and intensity offset 2c: x -> (1 - c) x + 2c
    "contrast-shift": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    # fraction of patches zeroed
    "occlusion-mask": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
}
KINDS = tuple(MAGNITUDES)


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    severity: int = 5

    def __post_init__(self):
        if self.kind not in MAGNITUDES:
            raise InvalidArgumentError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= int(self.severity) <= 5:
            raise InvalidArgumentError(f"severity must be in 0..5, got {self.severity}")

    @property
    def magnitude(self) -> float:
        return MAGNITUDES[self.kind][int(self.severity)]

    @property
    def tag(self) -> str:
        return f"{self.kind}-{self.severity}"


@dataclass(frozen=True)
class Segment:
    domain: DomainSpec
    n_batches: int
    batch_size: int = 64

    def __post_init__(self):
        if self.n_batches < 1 or self.batch_size < 1:
            raise InvalidArgumentError("segments need n_batches >= 1 and batch_size >= 1")


@dataclass(frozen=True)
class StreamSchedule:
    """Ordered domain segments, or a pooled mixed stream when ``mixed`` is set."""

    segments: tuple[Segment, ...] = ()
    mixed: bool = False
    mixed_domains: tuple[DomainSpec, ...] = ()
    budget: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.mixed:
            if not self.mixed_domains or self.budget < 1 or self.batch_size < 1:
                raise InvalidArgumentError("mixed schedules need domains, budget >= 1, batch_size >= 1")
        elif not self.segments:
            raise InvalidArgumentError("schedule needs at least one segment")

    @property
    def n_batches(self) -> int:
        if self.mixed:
            return -(-self.budget // self.batch_size)
        return sum(s.n_batches for s in self.segments)

    @classmethod
    def continual(cls, kinds=KINDS, severity: int = 5, n_batches: int = 20, batch_size: int = 64):
        return cls(segments=tuple(Segment(DomainSpec(k, severity), n_batches, batch_size) for k in kinds))

    @classmethod
    def mixed_of(cls, kinds=KINDS, severity: int = 5, budget: int = 6400, batch_size: int = 64):
        return cls(mixed=True, mixed_domains=tuple(DomainSpec(k, severity) for k in kinds),
                   budget=budget, batch_size=batch_size)

    def to_dict(self) -> dict:
        if self.mixed:
            return {"mixed": True, "budget": self.budget, "batch_size": self.batch_size,
                    "domains": [{"kind": d.kind, "severity": d.severity} for d in self.mixed_domains]}
        return {"segments": [{"kind": s.domain.kind, "severity": s.domain.severity,
                              "n_batches": s.n_batches, "batch_size": s.batch_size} for s in self.segments]}

    @classmethod
    def from_dict(cls, doc: dict) -> "StreamSchedule":
        if doc.get("mixed"):
            return cls(mixed=True, mixed_domains=tuple(DomainSpec(d["kind"], d.get("severity", 5))
                                                       for d in doc["domains"]),
                       budget=int(doc["budget"]), batch_size=int(doc.get("batch_size", 64)))
        return cls(segments=tuple(Segment(DomainSpec(s["kind"], s.get("severity", 5)), int(s["n_batches"]),
                                          int(s.get("batch_size", 64))) for s in doc["segments"]))

    @classmethod
    def load(cls, path) -> "StreamSchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def generate_source(task: TaskSpec, n_samples: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Label-balanced clean samples: prototype of the label plus N(0, noise_scale^2)."""
    if n_samples < 1:
        raise InvalidArgumentError("n_samples must be >= 1")
    rng = _rng(seed, 0x50C)
    labels = rng.permutation(np.arange(n_samples) % task.n_classes)
    noise = rng.standard_normal((n_samples, task.n_patches, task.input_dim))
    x = task.prototypes()[labels] + task.noise_scale * noise
    return x, labels


def corrupt(inputs: np.ndarray, domain: DomainSpec, seed: int) -> np.ndarray:
    x = np.array(inputs, dtype=np.float64, copy=True)
    mag = domain.magnitude
    if mag == 0:
        return x
    rng = _rng(seed, KINDS.index(domain.kind))
    B, m = x.shape[:2]
    if domain.kind == "gaussian-noise":
        x = x + mag * rng.standard_normal(x.shape)
    elif domain.kind == "uniform-scale":
        x = (1.0 + mag) * x
    elif domain.kind == "contrast-shift":
        x = (1.0 - mag) * x + 2.0 * mag
    elif domain.kind == "patch-shuffle":
        k = int(round(mag * m))
        for b in range(B):
            pos = rng.choice(m, size=k, replace=False)
            x[b, pos] = x[b, rng.permutation(pos)]
    elif domain.kind == "occlusion-mask":
        k = int(round(mag * m))
        for b in range(B):
            x[b, rng.choice(m, size=k, replace=False)] = 0.0
    return x


@dataclass(frozen=True)
class StreamBatch:
    inputs: np.ndarray
    labels: np.ndarray
    domain: str
    segment: int = 0
    # true only for the first batch of a declared segment
    boundary: bool = False


@dataclass
class Stream:
    """Re-iterable corrupted stream; each iteration yields identical batches."""

    task: TaskSpec
    schedule: StreamSchedule
    seed: int

    def __iter__(self) -> Iterator[StreamBatch]:
        return iter(build_stream(self.task, self.schedule, self.seed))

    def __len__(self) -> int:
        return self.schedule.n_batches


def _segment_samples(task, domain, n, seed, index):
    x, y = generate_source(task, n, derive_seed(seed, 0x7E57, index))
    return corrupt(x, domain, derive_seed(seed, 0xC0, index)), y


def build_stream(task: TaskSpec, schedule: StreamSchedule, seed: int) -> Iterator[StreamBatch]:
    """Yield batches in schedule order (continual) or as one shuffled pool (mixed)."""
    if schedule.mixed:
        k = len(schedule.mixed_domains)
        counts = [schedule.budget // k + (1 if i < schedule.budget % k else 0) for i in range(k)]
        xs, ys, tags = [], [], []
        for i, (dom, c) in enumerate(zip(schedule.mixed_domains, counts)):
            if c == 0:
                continue
            x, y = _segment_samples(task, dom, c, seed, i)
            xs.append(x)
            ys.append(y)
            tags.extend([dom.tag] * c)
        x, y, tags = np.concatenate(xs), np.concatenate(ys), np.array(tags)
        order = _rng(seed, 0x313).permutation(len(y))
        x, y, tags = x[order], y[order], tags[order]
        bs = schedule.batch_size
        for t, start in enumerate(range(0, len(y), bs)):
            sl = slice(start, start + bs)
            yield StreamBatch(x[sl], y[sl], "mixed", 0, t == 0)
        return
    for i, seg in enumerate(schedule.segments):
        x, y = _segment_samples(task, seg.domain, seg.n_batches * seg.batch_size, seed, i)
        for b in range(seg.n_batches):
            sl = slice(b * seg.batch_size, (b + 1) * seg.batch_size)
            yield StreamBatch(x[sl], y[sl], seg.domain.tag, i, b == 0)
