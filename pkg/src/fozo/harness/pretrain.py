"""Source-model pretraining with reference backprop and Adam."""

from __future__ import annotations

import logging

import numpy as np

from ..core_math import derive_seed
from ..model import FrozenModel, ModelSpec, PromptSet, forward_with_prompts, predict
from ..streams import TaskSpec, generate_source
from .backprop import cross_entropy

log = logging.getLogger(__name__)

# training stops at TARGET_ACCURACY; GATE_ACCURACY is the minimum acceptable result
TARGET_ACCURACY = 0.99
GATE_ACCURACY = 0.95
FAILURE_ACCURACY = 0.60
RESIDUAL_SCALE = 3.0
_RESIDUAL_WRITERS = ("patch_w", "patch_b", "pos", "cls")
_BRANCH_OUTPUTS = ("out_w", "out_b", "fc2_w", "fc2_b")


class PretrainingError(RuntimeError):
    pass


def rescale_residual(params: dict, c: float) -> dict:
    """Scale everything written into the residual stream by ``c``."""
    if not c > 0:
        raise ValueError("residual scale must be > 0")
    return {k: v * c if k in _RESIDUAL_WRITERS or k.endswith(_BRANCH_OUTPUTS) else v.copy()
            for k, v in params.items()}


def accuracy(model, x, y, batch_size: int = 256) -> float:
    hits = 0
    for i in range(0, len(y), batch_size):
        out = forward_with_prompts(model, None, x[i:i + batch_size])
        hits += int(np.sum(predict(out.logits) == y[i:i + batch_size]))
    return hits / len(y)


def pretrain_source(model_spec: ModelSpec, task: TaskSpec, seed: int, *, n_train: int = 8192, n_val: int = 1024,
                    batch_size: int = 128, lr: float = 3e-3, max_steps: int = 3000, eval_every: int = 100,
                    target: float = TARGET_ACCURACY, prompt_rate: float = 1.0, prompt_scale: float = 1.0,
                    n_prompts: int = 3, residual_scale: float = RESIDUAL_SCALE) -> FrozenModel:
    """Train on clean source data until held-out accuracy reaches ``target`` or ``max_steps``.

    With probability ``prompt_rate`` a batch is trained with ``n_prompts``
    freshly drawn prompt tokens (the adaptation-time initialization
    distribution, widened by ``prompt_scale``) prepended, so the source model
    tolerates their presence.

    After training, the embeddings and every residual-branch output are
    multiplied by ``residual_scale``. Each sublayer reads the residual stream
    through a layer norm, so the prompt-free function is unchanged, but the
    per-layer CLS activations (and hence the statistics-alignment term) grow
    by that factor relative to the entropy term.

    Raises :class:`PretrainingError` when the final accuracy is below 60%.
    """
    if (task.n_patches, task.input_dim, task.n_classes) != (model_spec.n_patches, model_spec.input_dim,
                                                              model_spec.n_classes):
        raise PretrainingError("task and model disagree on patches / input_dim / classes")
    x, y = generate_source(task, n_train, derive_seed(seed, 1))
    xv, yv = generate_source(task, n_val, derive_seed(seed, 2))
    init = FrozenModel.random(model_spec, derive_seed(seed, 3))
    params = {k: v.copy() for k, v in init.params.items()}
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2 = 0.9, 0.999
    rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, 4)))
    order = rng.permutation(n_train)
    cursor, acc, step = 0, 0.0, 0
    for step in range(1, max_steps + 1):
        if cursor + batch_size > n_train:
            order, cursor = rng.permutation(n_train), 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        P = None
        if rng.random() < prompt_rate:
            P = prompt_scale * PromptSet.init(n_prompts, model_spec.embed_dim, int(rng.integers(2 ** 63))).values
        loss, grads, _ = cross_entropy(params, model_spec, x[idx], y[idx], P)
        # cosine decay keeps late steps from bouncing around the optimum
        lr_t = lr * 0.5 * (1 + np.cos(np.pi * step / max_steps))
        for k in params:
            m1[k] = b1 * m1[k] + (1 - b1) * grads[k]
            m2[k] = b2 * m2[k] + (1 - b2) * grads[k] ** 2
            params[k] -= lr_t * (m1[k] / (1 - b1 ** step)) / (np.sqrt(m2[k] / (1 - b2 ** step)) + 1e-8)
        if step % eval_every == 0 or step == max_steps:
            acc = accuracy(FrozenModel(model_spec, params), xv, yv)
            log.info("step %d loss %.4f val_acc %.4f", step, loss, acc)
            if acc >= target:
                break
    if acc < FAILURE_ACCURACY:
        raise PretrainingError(f"source accuracy {acc:.3f} below {FAILURE_ACCURACY} after {step} steps")
    if acc < GATE_ACCURACY:
        log.warning("source accuracy %.3f is below the %.2f gate", acc, GATE_ACCURACY)
    params = rescale_residual(params, residual_scale)
    meta = {"source_accuracy": acc, "steps": step, "task": task.__dict__.copy(), "prompt_rate": prompt_rate,
            "prompt_scale": prompt_scale,
            "residual_scale": residual_scale}
    return FrozenModel(model_spec, params, pretrain_seed=seed, meta=meta)
