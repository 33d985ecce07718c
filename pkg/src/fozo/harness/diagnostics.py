"""Empirical checks of the estimator's bias, variance and error-floor behavior.

Bias is measured with common random numbers and a control variate: for every
draw ``Z`` the quantity ``g_hat(Z) - (grad . Z) Z`` is averaged, which has the
same expectation as ``E[g_hat] - grad`` (because ``E[Z Z^T] = I``) but none of
the epsilon-independent Monte Carlo noise of the plain estimate. Reusing the
same draws for every epsilon keeps the sweep smooth enough for a slope fit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..core_math import derive_seed
from ..engine import AdaptSession, adapt_batch
from ..losses import DEFAULT_LAMBDA, SourceStats, estimate_source_stats, total_loss
from ..model import PromptSet, forward_with_prompts
from ..optim import DEFAULT_EPS0, DEFAULT_ETA, EpsilonState, OptimizerConfig, nspsa_gradient_mc_check, perturbation, spsa_probe
from ..streams import DomainSpec, TaskSpec, corrupt, generate_source
from .backprop import adaptation_loss_and_prompt_grad
from .oracle import gradient_oracle

BIAS_SLOPE_BAND = (1.8, 2.2)
VARIANCE_RATIO_BAND = (3.3, 4.8)


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need at least two matched points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive values")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def bias_sweep(loss_eval, grad: np.ndarray, prompts: np.ndarray, eps_values, draws: int,
               seed: int = 0) -> np.ndarray:
    """Norm of the estimated bias ``E[g_hat] - grad`` for each epsilon."""
    P = np.asarray(prompts, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    acc = np.zeros((len(eps_values),) + P.shape)
    for i in range(draws):
        s = derive_seed(seed, i)
        Z = perturbation(s, P.shape)
        lin = np.sum(grad * Z) * Z
        for k, eps in enumerate(eps_values):
            g = spsa_probe(loss_eval, P, eps, s).record.projected_grad
            acc[k] += g * Z - lin
    acc /= draws
    return np.linalg.norm(acc.reshape(len(eps_values), -1), axis=1)


def variance_ratio(loss_eval, prompts, epsilon: float, trials: int, n_small: int = 1, n_large: int = 4,
                   seed: int = 0) -> tuple[float, float, float]:
    """``(var_small, var_large, var_small / var_large)`` of the n-SPSA estimator."""
    _, v1 = nspsa_gradient_mc_check(loss_eval, prompts, epsilon, n_small, trials, seed=derive_seed(seed, 1))
    _, v4 = nspsa_gradient_mc_check(loss_eval, prompts, epsilon, n_large, trials, seed=derive_seed(seed, 2))
    return v1, v4, v1 / v4


@dataclass
class CubicProblem:
    """Separable cubic ``a.P + b.P^2/2 + c.P^3/6``; its SPSA bias is exactly ``eps^2 c / 2``."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    @classmethod
    def random(cls, shape=(3, 16), seed: int = 0) -> "CubicProblem":
        rng = np.random.Generator(np.random.Philox(key=seed))
        return cls(rng.standard_normal(shape), rng.uniform(0.5, 2.0, shape), rng.standard_normal(shape))

    def loss(self, P) -> float:
        return float(np.sum(self.a * P + 0.5 * self.b * P * P + self.c * P * P * P / 6.0))

    def grad(self, P) -> np.ndarray:
        return self.a + self.b * P + 0.5 * self.c * P * P

    def bias(self, eps: float) -> np.ndarray:
        return 0.5 * eps * eps * self.c


@dataclass
class DiagnosticsConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    domain: DomainSpec = field(default_factory=lambda: DomainSpec("contrast-shift", 5))
    lam: float = DEFAULT_LAMBDA
    batch_size: int = 16
    n_prompts: int = 3
    eps_values: tuple = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)
    bias_draws: int = 200
    variance_eps: float = 1e-3
    variance_trials: int = 2000
    eps_min_values: tuple = (1e-4, 1e-2)
    floor_seeds: tuple = (0, 1, 2, 3, 4)
    # long runs on one repeated batch: the floor is an asymptotic property and
    # a fixed batch removes the sampling noise that would otherwise dominate it
    floor_steps: int = 3000
    floor_eta: float = DEFAULT_ETA
    floor_eps0: float = DEFAULT_EPS0
    source_samples: int = 1024
    seed: int = 0


@dataclass
class OracleReport:
    eps_values: list
    bias_norms: list
    bias_slope: float
    n_values: list
    variances: list
    variance_ratio: float
    eps_min_values: list
    final_grad_norms: list
    passed: dict

    def __post_init__(self):
        if len(self.eps_values) != len(self.bias_norms) or len(self.n_values) != len(self.variances):
            raise ValueError("report arrays must be length-matched")
        if any(len(row) != len(self.eps_min_values) for row in self.final_grad_norms):
            raise ValueError("one final gradient norm per eps_min and seed")
        if not np.isfinite(self.bias_slope):
            raise ValueError("bias slope must be finite")

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return asdict(self)


def toy_objective(model, source: SourceStats, batch: np.ndarray, lam: float = DEFAULT_LAMBDA):
    """Scalar adaptation loss of ``model`` on a fixed batch, as a function of the prompts."""
    def loss_eval(P):
        out = forward_with_prompts(model, PromptSet(P), batch)
        return total_loss(out.logits, out.cls_per_layer, source, lam).total
    return loss_eval


def error_floor(model, source: SourceStats, batch: np.ndarray, eps_min: float, seed: int, *, steps: int,
                eta: float, eps0: float, n_prompts: int = 3, lam: float = DEFAULT_LAMBDA, h: float = 1e-5) -> float:
    """Oracle gradient norm after ``steps`` adaptation steps on a stationary (repeated) batch."""
    session = AdaptSession(model, source,
                           OptimizerConfig(eta=eta, n_prompts=n_prompts, embed_dim=model.spec.embed_dim),
                           EpsilonState(eps0=eps0, eps_min=eps_min), lam=lam, seed=seed)
    for _ in range(steps):
        adapt_batch(session, batch)
    grad = gradient_oracle(toy_objective(model, source, batch, lam), session.prompts.values, h)
    return float(np.linalg.norm(grad))


def diagnostic_problem(model, cfg: DiagnosticsConfig) -> tuple[SourceStats, np.ndarray]:
    """Source statistics and the fixed shifted batch every diagnostic runs on."""
    xs, _ = generate_source(cfg.task, cfg.source_samples, derive_seed(cfg.seed, 1))
    source = estimate_source_stats(model, [xs[i:i + 256] for i in range(0, len(xs), 256)])
    x, _ = generate_source(cfg.task, cfg.batch_size, derive_seed(cfg.seed, 2))
    return source, corrupt(x, cfg.domain, derive_seed(cfg.seed, 3))


def error_floor_table(model, source: SourceStats, batch: np.ndarray, cfg: DiagnosticsConfig) -> list[list[float]]:
    """Final oracle gradient norms, one row per floor seed and one column per ``eps_min``."""
    return [[error_floor(model, source, batch, em, s, steps=cfg.floor_steps, eta=cfg.floor_eta,
                         eps0=cfg.floor_eps0, n_prompts=cfg.n_prompts, lam=cfg.lam)
             for em in cfg.eps_min_values] for s in cfg.floor_seeds]


def run_bias_variance_diagnostics(model, config: DiagnosticsConfig | None = None) -> OracleReport:
    """Bias slope, variance ratio and error-floor ordering on the toy adaptation loss."""
    cfg = config or DiagnosticsConfig()
    source, batch = diagnostic_problem(model, cfg)
    P = PromptSet.init(cfg.n_prompts, model.spec.embed_dim, derive_seed(cfg.seed, 4)).values
    loss_eval = toy_objective(model, source, batch, cfg.lam)
    _, grad = adaptation_loss_and_prompt_grad(model.params, model.spec, P, batch, source, cfg.lam)

    eps = list(cfg.eps_values)
    norms = bias_sweep(loss_eval, grad, P, eps, cfg.bias_draws, seed=derive_seed(cfg.seed, 5))
    slope = loglog_slope(eps, norms)

    v1, v4, ratio = variance_ratio(loss_eval, P, cfg.variance_eps, cfg.variance_trials, seed=derive_seed(cfg.seed, 6))

    floors = error_floor_table(model, source, batch, cfg)
    med = np.median(np.asarray(floors), axis=0)
    passed = {
        "bias_slope": BIAS_SLOPE_BAND[0] <= slope <= BIAS_SLOPE_BAND[1],
        "variance_ratio": VARIANCE_RATIO_BAND[0] <= ratio <= VARIANCE_RATIO_BAND[1],
        # eps_min_values are listed smallest first
        "error_floor": bool(med[0] <= med[-1]),
    }
    return OracleReport(eps, [float(v) for v in norms], slope, [1, 4], [v1, v4], ratio,
                        list(cfg.eps_min_values), floors, passed)
