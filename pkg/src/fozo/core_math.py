"""Dense numerics and reproducible Gaussian sampling.

Tensors are plain ``numpy.ndarray`` objects in float64. Randomness goes
through :class:`SeedStream`, a (seed, counter) pair driving numpy's
counter-based Philox4x64 bit generator, so any perturbation can be
regenerated from its seed alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float64

#: Identity of the generator behind every seeded draw. Part of the on-disk
#: format contract: a record's seed is only meaningful under this generator.
GENERATOR_ID = "numpy.Philox4x64/Generator.standard_normal"

_MASK64 = (1 << 64) - 1


class InvalidArgumentError(ValueError):
    """Raised when an operation receives malformed or non-finite input."""


@dataclass
class SeedStream:
    """Single-owner stream of standard-normal draws.

    Identical ``(seed, counter)`` pairs always produce identical output.
    Each draw advances ``counter`` to the Philox block counter reached by the
    draw, so consecutive draws from one stream never overlap.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter)

    def _generator(self) -> tuple[np.random.Generator, np.random.Philox]:
        bitgen = np.random.Philox(key=self.seed, counter=self.counter)
        return np.random.Generator(bitgen), bitgen

    def split(self, index: int) -> "SeedStream":
        """Derive an independent stream for sub-task ``index`` (e.g. a probe)."""
        return SeedStream(derive_seed(self.seed, self.counter, index))

    def gaussian(self, shape) -> np.ndarray:
        return gaussian(self, shape)


def derive_seed(*parts: int) -> int:
    """Hash integer parts into one 64-bit seed (order sensitive)."""
    ss = np.random.SeedSequence([int(p) & _MASK64 for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise InvalidArgumentError(f"shape must be nonempty with positive extents, got {shape}")
    return shape


def gaussian(stream: SeedStream, shape) -> np.ndarray:
    """Draw iid N(0, 1) entries of ``shape`` and advance ``stream``."""
    shape = _check_shape(shape)
    gen, bitgen = stream._generator()
    out = gen.standard_normal(shape, dtype=DTYPE)
    words = bitgen.state["state"]["counter"]
    counter = 0
    for i, w in enumerate(words):
        counter |= int(w) << (64 * i)
    # Philox pre-increments, so the next draw starts on a fresh block
    stream.counter = counter
    return out


def gaussian_from_seed(seed: int, shape) -> np.ndarray:
    """Fresh-stream draw: the perturbation tensor a probe seed stands for."""
    return gaussian(SeedStream(seed), shape)


def check_finite(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise InvalidArgumentError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise InvalidArgumentError(str(err)) from None
    return a + b


def scale(a: np.ndarray, c: float) -> np.ndarray:
    return a * c


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row softmax, shifted by the row max for stability."""
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def layer_norm(x: np.ndarray, gain=None, bias=None, eps: float = 1e-9) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then apply ``gain``, ``bias``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    y = xc / np.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def mean_std(x: np.ndarray, axis=0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation (divide by n) along ``axis``."""
    mu = x.mean(axis=axis)
    sd = x.std(axis=axis, ddof=0)
    return mu, sd
