"""Reverse-mode gradients for the toy encoder.

Offline tooling only: source pretraining and the gradient oracle behind the
estimator diagnostics. Nothing on the adaptation path imports this module.
The forward pass here mirrors :func:`fozo.model.forward_with_prompts` for
float models and is tested against it.
"""

from __future__ import annotations

import numpy as np

from ..core_math import log_softmax, softmax
from ..losses import group_activations
from ..model import ModelSpec, gelu

_C = np.sqrt(2.0 / np.pi)


def _gelu_grad(x):
    a = _C * x * (1.0 + 0.044715 * x * x)
    t = np.tanh(a)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _C * (1.0 + 3 * 0.044715 * x * x)


def _ln_fwd(x, g, b, eps=1e-9):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_bwd(dy, cache):
    xhat, rstd, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = np.sum(dy * xhat, axis=red)
    db = np.sum(dy, axis=red)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xhat * np.mean(dxh * xhat, axis=-1, keepdims=True))
    return dx, dg, db


def _lin_bwd(dy, x, W):
    red = tuple(range(dy.ndim - 1))
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, dW, np.sum(dy, axis=red)


def forward(params: dict, spec: ModelSpec, P: np.ndarray, batch: np.ndarray):
    """Returns ``(logits, taps, cache)``."""
    B, d, p = batch.shape[0], spec.embed_dim, P.shape[0]
    H, dh = spec.n_heads, spec.head_dim
    pos = params["pos"]
    patches = batch @ params["patch_w"] + params["patch_b"] + pos[1:]
    cls = np.broadcast_to(params["cls"] + pos[0], (B, 1, d))
    x = np.concatenate([np.broadcast_to(P, (B, p, d)), cls, patches], axis=1)
    S = x.shape[1]
    layers, taps = [], []
    for i in range(spec.n_layers):
        L = f"l{i}."
        c = {"x": x}
        h1, c["ln1"] = _ln_fwd(x, params[L + "ln1_g"], params[L + "ln1_b"])
        qkv = (h1 @ params[L + "qkv_w"] + params[L + "qkv_b"]).reshape(B, S, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        a = softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh), axis=-1)
        om = (a @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        x1 = x + om @ params[L + "out_w"] + params[L + "out_b"]
        h2, c["ln2"] = _ln_fwd(x1, params[L + "ln2_g"], params[L + "ln2_b"])
        u = h2 @ params[L + "fc1_w"] + params[L + "fc1_b"]
        gu = gelu(u)
        x = x1 + gu @ params[L + "fc2_w"] + params[L + "fc2_b"]
        c.update(h1=h1, q=q, k=k, v=v, a=a, om=om, h2=h2, u=u, gu=gu)
        layers.append(c)
        taps.append(x[:, p, :].copy())
    z, lnf = _ln_fwd(x[:, p, :], params["lnf_g"], params["lnf_b"])
    logits = z @ params["head_w"] + params["head_b"]
    cache = {"batch": batch, "p": p, "layers": layers, "z": z, "lnf": lnf, "S": S}
    return logits, taps, cache


def backward(params: dict, spec: ModelSpec, cache: dict, dlogits: np.ndarray, dtaps=None):
    """Gradients of a scalar loss given its partials w.r.t. logits and the CLS taps.

    Returns ``(param_grads, dP)``.
    """
    B, d, p, S = dlogits.shape[0], spec.embed_dim, cache["p"], cache["S"]
    H, dh = spec.n_heads, spec.head_dim
    g = {}
    dz, g["head_w"], g["head_b"] = _lin_bwd(dlogits, cache["z"], params["head_w"])
    dcls, g["lnf_g"], g["lnf_b"] = _ln_bwd(dz, cache["lnf"])
    dx = np.zeros((B, S, d))
    dx[:, p, :] = dcls
    for i in reversed(range(spec.n_layers)):
        L, c = f"l{i}.", cache["layers"][i]
        if dtaps is not None and dtaps[i] is not None:
            dx[:, p, :] += dtaps[i]
        dgu, g[L + "fc2_w"], g[L + "fc2_b"] = _lin_bwd(dx, c["gu"], params[L + "fc2_w"])
        du = dgu * _gelu_grad(c["u"])
        dh2, g[L + "fc1_w"], g[L + "fc1_b"] = _lin_bwd(du, c["h2"], params[L + "fc1_w"])
        dln, g[L + "ln2_g"], g[L + "ln2_b"] = _ln_bwd(dh2, c["ln2"])
        dx1 = dx + dln
        dom, g[L + "out_w"], g[L + "out_b"] = _lin_bwd(dx1, c["om"], params[L + "out_w"])
        do = dom.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        a, q, k, v = c["a"], c["q"], c["k"], c["v"]
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) / np.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, S, 3 * d)
        dh1, g[L + "qkv_w"], g[L + "qkv_b"] = _lin_bwd(dqkv, c["h1"], params[L + "qkv_w"])
        dln, g[L + "ln1_g"], g[L + "ln1_b"] = _ln_bwd(dh1, c["ln1"])
        dx = dx1 + dln
    dP = dx[:, :p, :].sum(axis=0)
    dcls_tok = dx[:, p, :].sum(axis=0)
    dpatch = dx[:, p + 1:, :]
    batch = cache["batch"]
    g["patch_w"] = batch.reshape(-1, batch.shape[-1]).T @ dpatch.reshape(-1, d)
    g["patch_b"] = dpatch.sum(axis=(0, 1))
    g["pos"] = np.concatenate([dcls_tok[None], dpatch.sum(axis=0)], axis=0)
    g["cls"] = dcls_tok
    return g, dP


def cross_entropy(params, spec, batch, labels, prompts=None):
    """Mean cross-entropy and its parameter gradients."""
    P = np.zeros((0, spec.embed_dim)) if prompts is None else prompts
    logits, _, cache = forward(params, spec, P, batch)
    logp = log_softmax(logits, axis=1)
    B = len(labels)
    loss = -float(np.mean(logp[np.arange(B), labels]))
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    grads, _ = backward(params, spec, cache, dlogits / B)
    return loss, grads, logits


def adaptation_loss_and_prompt_grad(params, spec, P, batch, source, lam):
    """Adaptation objective at prompts ``P`` and its exact gradient w.r.t. ``P``."""
    logits, taps, cache = forward(params, spec, P, batch)
    logp = log_softmax(logits, axis=1)
    prob = np.exp(logp)
    ent_rows = -np.sum(prob * logp, axis=1, keepdims=True)
    ent = float(ent_rows.sum())
    dlogits = -prob * (logp + ent_rows)

    n_layers, B = len(taps), taps[0].shape[0]
    half = n_layers // 2
    dtaps = [None] * n_layers
    stats = 0.0
    for name, pooled in group_activations(taps).items():
        mu_s, sd_s = source.group(name)
        mu = pooled.mean(axis=0)
        xc = pooled - mu
        sd = np.sqrt(np.mean(xc * xc, axis=0))
        dmu, dsd = mu - mu_s, sd - sd_s
        nmu, nsd = np.linalg.norm(dmu), np.linalg.norm(dsd)
        stats += nmu + nsd
        M = pooled.shape[0]
        dpool = np.zeros_like(pooled)
        if nmu > 0:
            dpool += (dmu / nmu) / M
        if nsd > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                dpool += np.where(sd > 0, (dsd / nsd) * xc / (M * sd), 0.0)
        idx = range(0, half) if name == "shallow" else range(half, n_layers)
        for r, li in enumerate(idx):
            dtaps[li] = lam * dpool[r * B:(r + 1) * B]
    _, dP = backward(params, spec, cache, dlogits, dtaps)
    return lam * stats + ent, dP
