"""scikit-learn style front end for forward-only test-time adaptation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core_math import softmax
from .engine import AdaptSession, adapt_batch
from .losses import DEFAULT_LAMBDA, SourceStats, estimate_source_stats
from .model import forward_with_prompts, predict
from .optim import (DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_EPS0, DEFAULT_EPS_MIN, DEFAULT_ETA, DEFAULT_TAU,
                    EpsilonState, OptimizerConfig)


class FOZOAdapter(ClassifierMixin, BaseEstimator):
    """Adapt the input prompts of a frozen classifier on an unlabeled stream.

    ``fit`` takes clean source samples and records their feature statistics
    (skipped when ``source_stats`` is given). Each call to
    :meth:`adapt_predict` (or :meth:`partial_fit`) then consumes one test
    batch: it perturbs the prompts, predicts from the better of the
    perturbed passes and updates the prompts, all with forward passes only.
    :meth:`predict` scores with the current prompts and never adapts.

    Parameters
    ----------
    model : FrozenModel or QuantizedModel
        The frozen network. Never modified.
    n_prompts : int
        Number of prompt tokens prepended to the input sequence.
    eta : float
        Learning rate of the prompt update.
    n_spsa : int
        SPSA probes per batch; each costs two forward passes.
    eps0, eps_min, alpha, tau, beta : float
        Perturbation schedule: start/reset value, floor, decay factor,
        spike threshold and loss-EMA factor.
    lam : float
        Weight of the feature-statistics term against the entropy term.
    eps_schedule : {"dynamic", "fixed"}
        ``"fixed"`` keeps the perturbation scale at ``eps0``.
    source_stats : SourceStats, optional
        Precomputed source statistics.
    batch_size : int
        Chunk size used when estimating source statistics in ``fit``.
    random_state : int
        Seeds prompt initialization and all perturbations.
    """

    def __init__(self, model=None, n_prompts=3, eta=DEFAULT_ETA, n_spsa=1, eps0=DEFAULT_EPS0,
                 eps_min=DEFAULT_EPS_MIN, alpha=DEFAULT_ALPHA, tau=DEFAULT_TAU, beta=DEFAULT_BETA,
                 lam=DEFAULT_LAMBDA, eps_schedule="dynamic", source_stats=None, batch_size=64, random_state=0):
        self.model = model
        self.n_prompts = n_prompts
        self.eta = eta
        self.n_spsa = n_spsa
        self.eps0 = eps0
        self.eps_min = eps_min
        self.alpha = alpha
        self.tau = tau
        self.beta = beta
        self.lam = lam
        self.eps_schedule = eps_schedule
        self.source_stats = source_stats
        self.batch_size = batch_size
        self.random_state = random_state

    def _validate(self, X) -> np.ndarray:
        if self.model is None:
            raise ValueError("FOZOAdapter needs a model")
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
        spec = self.model.spec
        if X.ndim == 2 and X.shape[1] == spec.n_patches * spec.input_dim:
            X = X.reshape(-1, spec.n_patches, spec.input_dim)
        if X.shape[1:] != (spec.n_patches, spec.input_dim):
            raise ValueError(f"expected samples of shape ({spec.n_patches}, {spec.input_dim}), got {X.shape[1:]}")
        return X

    def fit(self, X, y=None):
        X = self._validate(X)
        if self.source_stats is not None:
            stats = self.source_stats
            if not isinstance(stats, SourceStats):
                raise TypeError("source_stats must be a SourceStats instance")
        else:
            bs = self.batch_size
            stats = estimate_source_stats(self.model, (X[i:i + bs] for i in range(0, len(X), bs)))
        self.source_stats_ = stats
        self.session_ = AdaptSession(
            self.model, stats,
            OptimizerConfig(eta=self.eta, n_spsa=self.n_spsa, n_prompts=self.n_prompts,
                            embed_dim=self.model.spec.embed_dim),
            EpsilonState(eps0=self.eps0, eps_min=self.eps_min, alpha=self.alpha, tau=self.tau, beta=self.beta),
            lam=self.lam, seed=self.random_state, eps_schedule=self.eps_schedule)
        self.classes_ = np.arange(self.model.spec.n_classes)
        self.history_ = []
        return self

    def adapt_predict(self, X, y=None):
        """Adapt on batch ``X`` and return its predictions. ``y`` only feeds the metrics."""
        check_is_fitted(self, "session_")
        X = self._validate(X)
        preds, metrics = adapt_batch(self.session_, X, y)
        self.history_.append(metrics)
        return preds

    def partial_fit(self, X, y=None):
        self.adapt_predict(X, y)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "session_")
        out = forward_with_prompts(self.model, self.session_.prompts, self._validate(X))
        return softmax(out.logits, axis=1)

    def predict(self, X):
        check_is_fitted(self, "session_")
        out = forward_with_prompts(self.model, self.session_.prompts, self._validate(X))
        return predict(out.logits)

    @property
    def prompts_(self) -> np.ndarray:
        check_is_fitted(self, "session_")
        return self.session_.prompts.values.copy()
