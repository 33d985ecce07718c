"""Zeroth-order prompt optimizer: SPSA probes, seed-replay updates, dynamic epsilon.

Between the probe phase and the update phase the optimizer keeps only one
``(seed, projected_grad, epsilon)`` record per probe. Perturbation tensors are
regenerated from their seeds when the update is applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .core_math import InvalidArgumentError, derive_seed, gaussian_from_seed

# published defaults
DEFAULT_ETA = 0.08
DEFAULT_ALPHA = 0.9
DEFAULT_TAU = 1.05
DEFAULT_BETA = 0.9
# no published values; picked by a desk-scale sweep on the toy model
DEFAULT_EPS0 = 1.0
DEFAULT_EPS_MIN = 1e-3

LossEval = Callable[[np.ndarray], "float | tuple[float, np.ndarray | None]"]


class ProbeFailure(RuntimeError):
    """A perturbed forward pass produced a non-finite loss."""

    def __init__(self, seed: int, l_plus: float, l_minus: float, preds_plus=None, preds_minus=None):
        super().__init__(f"non-finite probe loss (seed={seed}, l_plus={l_plus}, l_minus={l_minus})")
        self.seed = seed
        self.l_plus = l_plus
        self.l_minus = l_minus
        self.preds_plus = preds_plus
        self.preds_minus = preds_minus


@dataclass(frozen=True)
class PerturbRecord:
    seed: int
    projected_grad: float
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgumentError(f"epsilon must be > 0, got {self.epsilon}")
        if not math.isfinite(self.projected_grad):
            raise InvalidArgumentError("projected_grad must be finite")


@dataclass(frozen=True)
class ProbeResult:
    record: PerturbRecord
    preds_plus: np.ndarray | None
    preds_minus: np.ndarray | None
    l_plus: float
    l_minus: float


@dataclass(frozen=True)
class OptimizerConfig:
    eta: float = DEFAULT_ETA
    n_spsa: int = 1
    n_prompts: int = 3
    embed_dim: int = 16
    # multiplicative per-batch learning-rate decay; 1.0 keeps eta constant
    eta_decay: float = 1.0

    def __post_init__(self):
        if self.eta < 0:
            raise InvalidArgumentError(f"eta must be >= 0, got {self.eta}")
        if self.n_spsa < 1:
            raise InvalidArgumentError(f"n_spsa must be >= 1, got {self.n_spsa}")
        if not 0 < self.eta_decay <= 1:
            raise InvalidArgumentError("eta_decay must be in (0, 1]")

    @property
    def prompt_shape(self) -> tuple[int, int]:
        return (self.n_prompts, self.embed_dim)

    def eta_at(self, t: int) -> float:
        """Learning rate for 1-based batch index ``t``."""
        return self.eta * self.eta_decay ** (t - 1)


@dataclass(frozen=True)
class EpsilonState:
    """Dynamic perturbation scale: geometric decay, reset to ``eps0`` on loss spikes.

    ``lbar`` is the exponential moving average of observed losses, ``None``
    until the first loss arrives. ``reset`` flags whether the most recent
    step took the reset branch.
    """

    eps0: float = DEFAULT_EPS0
    eps_min: float = DEFAULT_EPS_MIN
    alpha: float = DEFAULT_ALPHA
    tau: float = DEFAULT_TAU
    beta: float = DEFAULT_BETA
    eps_t: float | None = None
    lbar: float | None = None
    reset: bool = False

    def __post_init__(self):
        if not 0 < self.eps_min <= self.eps0:
            raise InvalidArgumentError("need 0 < eps_min <= eps0")
        if not 0 < self.alpha < 1:
            raise InvalidArgumentError("alpha must be in (0, 1)")
        if not self.tau > 1:
            raise InvalidArgumentError("tau must be > 1")
        if not 0 <= self.beta < 1:
            raise InvalidArgumentError("beta must be in [0, 1)")
        if self.eps_t is None:
            object.__setattr__(self, "eps_t", self.eps0)
        if not self.eps_min <= self.eps_t <= self.eps0:
            raise InvalidArgumentError("eps_t must lie in [eps_min, eps0]")

    def restart(self) -> "EpsilonState":
        return replace(self, eps_t=self.eps0, lbar=None, reset=False)


def epsilon_step(state: EpsilonState, current_loss: float) -> EpsilonState:
    """Advance the perturbation scale with the newest loss observation.

    The spike test compares against the EMA *before* ``current_loss`` is
    folded in; the EMA is updated afterwards.
    """
    current_loss = float(current_loss)
    if not math.isfinite(current_loss):
        raise InvalidArgumentError("current_loss must be finite")
    if state.lbar is None:
        return replace(state, eps_t=state.eps0, lbar=current_loss, reset=False)
    if current_loss > state.tau * state.lbar:
        eps, reset = state.eps0, True
    else:
        eps, reset = max(state.eps_min, state.eps_t * state.alpha), False
    lbar = state.beta * state.lbar + (1.0 - state.beta) * current_loss
    return replace(state, eps_t=eps, lbar=lbar, reset=reset)


def _call(loss_eval: LossEval, P: np.ndarray) -> tuple[float, np.ndarray | None]:
    out = loss_eval(P)
    if isinstance(out, tuple):
        loss, preds = out
    else:
        loss, preds = out, None
    return float(loss), preds


def perturbation(seed: int, shape) -> np.ndarray:
    return gaussian_from_seed(seed, shape)


def probe_seed(base_seed: int, step: int, probe: int) -> int:
    """Seed of probe ``probe`` at batch ``step``; disjoint across (step, probe)."""
    return derive_seed(base_seed, step, probe)


def spsa_probe(loss_eval: LossEval, prompts: np.ndarray, epsilon: float, seed: int) -> ProbeResult:
    """Two-sided SPSA probe along ``Z = gaussian(seed)``.

    Evaluates the loss at ``P + eps Z`` and ``P - eps Z`` (two forward
    passes) and records ``(l_plus - l_minus) / (2 eps)``.
    """
    if not epsilon > 0:
        raise InvalidArgumentError(f"epsilon must be > 0, got {epsilon}")
    P = np.asarray(prompts, dtype=np.float64)
    Z = perturbation(seed, P.shape)
    l_plus, preds_plus = _call(loss_eval, P + epsilon * Z)
    l_minus, preds_minus = _call(loss_eval, P - epsilon * Z)
    if not (math.isfinite(l_plus) and math.isfinite(l_minus)):
        raise ProbeFailure(seed, l_plus, l_minus, preds_plus, preds_minus)
    grad = (l_plus - l_minus) / (2.0 * epsilon)
    return ProbeResult(PerturbRecord(seed, grad, float(epsilon)), preds_plus, preds_minus, l_plus, l_minus)


def apply_updates(prompts: np.ndarray, records: Sequence[PerturbRecord], eta: float) -> np.ndarray:
    """Replay each record's perturbation from its seed and take the averaged step."""
    P = np.array(prompts, dtype=np.float64, copy=True)
    n = len(records)
    if n == 0:
        return P
    for rec in records:
        Z = perturbation(rec.seed, P.shape)
        if Z.shape != P.shape:
            raise AssertionError("regenerated perturbation does not match the prompt shape")
        P = P - (eta / n) * rec.projected_grad * Z
    return P


def nspsa_gradient_mc_check(loss_eval: LossEval, prompts: np.ndarray, epsilon: float, n: int, trials: int,
                            seed: int = 0) -> tuple[np.ndarray, float]:
    """Monte Carlo mean and coordinate-averaged variance of the n-SPSA estimator."""
    P = np.asarray(prompts, dtype=np.float64)
    est = np.empty((trials,) + P.shape)
    for t in range(trials):
        g = np.zeros_like(P)
        for j in range(n):
            s = probe_seed(seed, t, j)
            rec = spsa_probe(loss_eval, P, epsilon, s).record
            g += rec.projected_grad * perturbation(s, P.shape)
        est[t] = g / n
    return est.mean(axis=0), float(est.var(axis=0, ddof=1).mean())
