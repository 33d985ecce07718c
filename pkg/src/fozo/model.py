"""Frozen pre-LN transformer encoder with input-prompt injection.

Token layout at the first layer is ``[prompts, CLS, patches]``. Prompt states
travel through every layer and are dropped only at the head, which reads the
CLS position. Every layer's CLS output is returned as a tap for the
feature-statistics loss.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core_math import DTYPE, InvalidArgumentError, check_finite, layer_norm, softmax

CHECKPOINT_FORMAT = "fozo-checkpoint"
CHECKPOINT_VERSION = 1

# weight matrices that are stored as INT8 in a quantized model
MATRIX_SUFFIXES = ("_w",)


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int = 4
    embed_dim: int = 16
    n_patches: int = 16
    n_classes: int = 8
    n_heads: int = 2
    input_dim: int = 8
    mlp_dim: int = 32

    def __post_init__(self):
        if self.n_layers <= 0 or self.n_layers % 2:
            raise InvalidArgumentError(f"n_layers must be a positive even integer, got {self.n_layers}")
        if self.embed_dim % self.n_heads:
            raise InvalidArgumentError("embed_dim must be divisible by n_heads")
        if self.n_classes < 2:
            raise InvalidArgumentError("n_classes must be >= 2")
        for name in ("embed_dim", "n_patches", "input_dim", "mlp_dim", "n_heads"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    d, h = spec.embed_dim, spec.mlp_dim
    shapes = {
        "patch_w": (spec.input_dim, d),
        "patch_b": (d,),
        "pos": (spec.n_patches + 1, d),
        "cls": (d,),
    }
    for i in range(spec.n_layers):
        shapes.update({
            f"l{i}.ln1_g": (d,), f"l{i}.ln1_b": (d,),
            f"l{i}.qkv_w": (d, 3 * d), f"l{i}.qkv_b": (3 * d,),
            f"l{i}.out_w": (d, d), f"l{i}.out_b": (d,),
            f"l{i}.ln2_g": (d,), f"l{i}.ln2_b": (d,),
            f"l{i}.fc1_w": (d, h), f"l{i}.fc1_b": (h,),
            f"l{i}.fc2_w": (h, d), f"l{i}.fc2_b": (d,),
        })
    shapes.update({
        "lnf_g": (d,), "lnf_b": (d,),
        "head_w": (d, spec.n_classes), "head_b": (spec.n_classes,),
    })
    return shapes


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _hash_arrays(spec: ModelSpec, arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256(json.dumps(asdict(spec), sort_keys=True).encode())
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class FrozenModel:
    """Float64 weights, read-only after construction."""

    kind = "float"

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray], pretrain_seed: int | None = None,
                 meta: dict | None = None):
        shapes = param_shapes(spec)
        if set(params) != set(shapes):
            missing = set(shapes) - set(params)
            extra = set(params) - set(shapes)
            raise InvalidArgumentError(f"parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, shape in shapes.items():
            if tuple(np.shape(params[name])) != shape:
                raise InvalidArgumentError(f"{name}: expected shape {shape}, got {np.shape(params[name])}")
            check_finite(np.asarray(params[name]), name)
        self.spec = spec
        self.params = {k: _freeze(np.asarray(v, dtype=DTYPE)) for k, v in params.items()}
        self.pretrain_seed = pretrain_seed
        self.meta = dict(meta or {})

    @classmethod
    def random(cls, spec: ModelSpec, seed: int) -> "FrozenModel":
        """Untrained initialization (Xavier-uniform matrices, unit LN gains)."""
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        params = {}
        for name, shape in param_shapes(spec).items():
            leaf = name.split(".")[-1]
            if leaf.endswith("_g"):
                params[name] = np.ones(shape)
            elif leaf in ("pos", "cls"):
                params[name] = 0.02 * rng.standard_normal(shape)
            elif leaf.endswith("_w"):
                r = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-r, r, size=shape)
            else:
                params[name] = np.zeros(shape)
        return cls(spec, params, pretrain_seed=seed)

    def weight_hash(self) -> str:
        return _hash_arrays(self.spec, self.params)

    def vector(self, name: str) -> np.ndarray:
        return self.params[name]

    def linear(self, x: np.ndarray, prefix: str) -> np.ndarray:
        return x @ self.params[prefix + "_w"] + self.params[prefix + "_b"]


class QuantizedModel:
    """Same topology as :class:`FrozenModel` with INT8 weight matrices.

    Each matrix ``W`` is stored as ``q = round(W / scale)`` clipped to
    ``[-127, 127]`` with ``scale = max|W| / 127`` and zero-point 0. Matmuls
    run on the integer codes and rescale once per output; vectors (biases,
    norms, embeddings) stay float64.
    """

    kind = "int8"

    def __init__(self, spec: ModelSpec, qweights: dict[str, np.ndarray], scales: dict[str, float],
                 vectors: dict[str, np.ndarray], pretrain_seed: int | None = None, meta: dict | None = None):
        self.spec = spec
        self.qweights = {k: _freeze(np.asarray(v, dtype=np.int8)) for k, v in qweights.items()}
        self.scales = {k: float(v) for k, v in scales.items()}
        self.zero_points = {k: 0 for k in qweights}
        self.vectors = {k: _freeze(np.asarray(v, dtype=DTYPE)) for k, v in vectors.items()}
        self.pretrain_seed = pretrain_seed
        self.meta = dict(meta or {})
        expected = set(param_shapes(spec))
        if set(self.qweights) | set(self.vectors) != expected:
            raise InvalidArgumentError("quantized parameter set does not match the model topology")

    def weight_hash(self) -> str:
        arrays = dict(self.vectors)
        arrays.update(self.qweights)
        arrays.update({k + ".scale": np.array([v]) for k, v in self.scales.items()})
        return _hash_arrays(self.spec, arrays)

    def vector(self, name: str) -> np.ndarray:
        return self.vectors[name]

    def dequantize(self, name: str) -> np.ndarray:
        return self.qweights[name].astype(DTYPE) * self.scales[name]

    def linear(self, x: np.ndarray, prefix: str) -> np.ndarray:
        w = prefix + "_w"
        acc = x @ self.qweights[w].astype(DTYPE)
        return acc * self.scales[w] + self.vectors[prefix + "_b"]


def quantize_tensor(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor INT8 quantization; returns ``(codes, scale)``."""
    w = np.asarray(w, dtype=DTYPE)
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    scale = amax / 127.0 if amax > 0 else 1.0
    q = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
    return q, scale


def quantize(model: FrozenModel, bits: int = 8) -> QuantizedModel:
    if bits != 8:
        raise NotImplementedError(f"only 8-bit quantization is supported, got bits={bits}")
    qweights, scales, vectors = {}, {}, {}
    for name, w in model.params.items():
        if name.endswith(MATRIX_SUFFIXES):
            qweights[name], scales[name] = quantize_tensor(w)
        else:
            vectors[name] = w
    return QuantizedModel(model.spec, qweights, scales, vectors, pretrain_seed=model.pretrain_seed,
                          meta=dict(model.meta, quantized_from=model.weight_hash()))


@dataclass
class PromptSet:
    """Learnable prompt tokens, shape ``(p, d)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=DTYPE)
        if v.ndim != 2:
            raise InvalidArgumentError(f"prompts must be 2-D (p, d), got shape {v.shape}")
        check_finite(v, "prompts")
        self.values = v

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def init(cls, n_prompts: int, embed_dim: int, seed: int) -> "PromptSet":
        """Uniform in ``[-r, r]`` with ``r = sqrt(6 / (2 d))``."""
        if n_prompts == 0:
            return cls.empty(embed_dim)
        r = np.sqrt(6.0 / (embed_dim + embed_dim))
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        return cls(rng.uniform(-r, r, size=(n_prompts, embed_dim)))

    @classmethod
    def empty(cls, embed_dim: int) -> "PromptSet":
        return cls(np.zeros((0, embed_dim)))

    def copy(self) -> "PromptSet":
        return PromptSet(self.values.copy())


@dataclass
class ForwardOutput:
    logits: np.ndarray
    cls_per_layer: list[np.ndarray] = field(default_factory=list)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # x * x * x: numpy's float power is an order of magnitude slower
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def _attention(model, x: np.ndarray, layer: int) -> np.ndarray:
    spec = model.spec
    B, S, d = x.shape
    H, dh = spec.n_heads, spec.head_dim
    qkv = model.linear(x, f"l{layer}.qkv").reshape(B, S, 3, H, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh), axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
    return model.linear(out, f"l{layer}.out")


def _as_prompt_array(prompts, d: int) -> np.ndarray:
    if prompts is None:
        return np.zeros((0, d))
    values = prompts.values if isinstance(prompts, PromptSet) else np.asarray(prompts, dtype=DTYPE)
    if values.ndim != 2 or values.shape[1] != d:
        raise InvalidArgumentError(f"prompt dim mismatch: expected (p, {d}), got {values.shape}")
    return check_finite(values, "prompts")


def embed(model, batch: np.ndarray) -> np.ndarray:
    """Token embeddings ``[CLS, patches]`` before any prompt is inserted."""
    spec = model.spec
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim != 3 or batch.shape[1:] != (spec.n_patches, spec.input_dim):
        raise InvalidArgumentError(
            f"batch must have shape (B, {spec.n_patches}, {spec.input_dim}), got {batch.shape}")
    check_finite(batch, "batch")
    pos = model.vector("pos")
    patches = model.linear(batch, "patch") + pos[1:]
    cls = np.broadcast_to(model.vector("cls") + pos[0], (batch.shape[0], 1, spec.embed_dim))
    return np.concatenate([cls, patches], axis=1)


def forward_with_prompts(model, prompts, batch: np.ndarray) -> ForwardOutput:
    """Run the frozen encoder on ``batch`` with ``prompts`` prepended at layer 1."""
    spec = model.spec
    P = _as_prompt_array(prompts, spec.embed_dim)
    tokens = embed(model, batch)
    B, p = tokens.shape[0], P.shape[0]
    x = np.concatenate([np.broadcast_to(P, (B, p, spec.embed_dim)), tokens], axis=1)
    taps = []
    for i in range(spec.n_layers):
        h = layer_norm(x, model.vector(f"l{i}.ln1_g"), model.vector(f"l{i}.ln1_b"))
        x = x + _attention(model, h, i)
        h = layer_norm(x, model.vector(f"l{i}.ln2_g"), model.vector(f"l{i}.ln2_b"))
        x = x + model.linear(gelu(model.linear(h, f"l{i}.fc1")), f"l{i}.fc2")
        taps.append(x[:, p, :].copy())
    z = layer_norm(x[:, p, :], model.vector("lnf_g"), model.vector("lnf_b"))
    return ForwardOutput(logits=model.linear(z, "head"), cls_per_layer=taps)


def predict(logits: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise InvalidArgumentError(f"logits must be (B, K) with K >= 2, got {logits.shape}")
    return np.argmax(logits, axis=1)


# -- checkpoint I/O ---------------------------------------------------------

def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {"dtype": a.dtype.str, "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()


def save_checkpoint(model, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "spec": asdict(model.spec),
        "pretrain_seed": model.pretrain_seed,
        "meta": model.meta,
        "weight_hash": model.weight_hash(),
    }
    if model.kind == "float":
        doc["weights"] = {k: _encode(v) for k, v in sorted(model.params.items())}
    else:
        doc["weights"] = {k: _encode(v) for k, v in sorted(model.vectors.items())}
        doc["qweights"] = {k: _encode(v) for k, v in sorted(model.qweights.items())}
        doc["scales"] = dict(sorted(model.scales.items()))
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    spec = ModelSpec(**doc["spec"])
    weights = {k: _decode(v) for k, v in doc["weights"].items()}
    if doc["kind"] == "float":
        model = FrozenModel(spec, weights, pretrain_seed=doc.get("pretrain_seed"), meta=doc.get("meta"))
    elif doc["kind"] == "int8":
        q = {k: _decode(v) for k, v in doc["qweights"].items()}
        model = QuantizedModel(spec, q, doc["scales"], weights, pretrain_seed=doc.get("pretrain_seed"),
                               meta=doc.get("meta"))
    else:
        raise InvalidArgumentError(f"unknown checkpoint kind {doc['kind']!r}")
    if model.weight_hash() != doc["weight_hash"]:
        raise InvalidArgumentError(f"{path}: weight hash mismatch, file is corrupt")
    return model
