"""Central finite-difference gradient oracle for prompt losses.

Used by tests and diagnostics only; the adaptation path never imports it.
"""

from __future__ import annotations

import math

import numpy as np

from ..core_math import InvalidArgumentError


class OracleError(RuntimeError):
    """The loss was non-finite at a probed coordinate."""

    def __init__(self, coordinate: tuple[int, ...], value: float):
        super().__init__(f"non-finite loss {value} while probing coordinate {coordinate}")
        self.coordinate = coordinate
        self.value = value


def _scalar(out) -> float:
    return float(out[0] if isinstance(out, tuple) else out)


def gradient_oracle(loss_eval, prompts, h: float = 1e-5) -> np.ndarray:
    """Per-coordinate central differences ``(L(P + h e_k) - L(P - h e_k)) / 2h``.

    ``loss_eval`` may return a scalar or a ``(loss, extra)`` pair, matching
    the optimizer's loss callables.
    """
    if not h > 0:
        raise InvalidArgumentError(f"h must be > 0, got {h}")
    P = np.array(prompts, dtype=np.float64, copy=True)
    grad = np.empty_like(P)
    for k in np.ndindex(P.shape):
        orig = P[k]
        vals = []
        for sign in (1.0, -1.0):
            P[k] = orig + sign * h
            v = _scalar(loss_eval(P.copy()))
            if not math.isfinite(v):
                raise OracleError(k, v)
            vals.append(v)
        P[k] = orig
        grad[k] = (vals[0] - vals[1]) / (2.0 * h)
    return grad
