"""Minimal sequential network executor.

Supports stacks of linear layers, normalization layers (per-row mean/variance
normalization followed by elementwise scale and shift), and pointwise
activations.  Provides a forward pass, a feature-collecting forward pass that
records the input seen by every parameter slot, batch losses, manual
backpropagation, and a plain SGD step.  Everything is float64 and
deterministic; there is no autodiff graph.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Callable

import numpy as np

from .tensorio import Checkpoint, ParamKind

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


@dataclasses.dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int
    bias: bool = True


@dataclasses.dataclass(frozen=True)
class Norm:
    dim: int
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclasses.dataclass(frozen=True)
class Activation:
    kind: str  # relu | gelu | tanh | identity

    def __post_init__(self):
        if self.kind not in ("relu", "gelu", "tanh", "identity"):
            raise ValueError(f"unknown activation {self.kind!r}")


LayerSpec = Linear | Norm | Activation


@dataclasses.dataclass
class ModelSpec:
    """Ordered layer stack with the slot naming scheme layer{i}.{field}."""

    layers: list
    input_dim: int
    output_dim: int

    def __post_init__(self):
        cur = self.input_dim
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                if layer.in_dim != cur:
                    raise ValueError(
                        f"layer {idx}: expects input dim {layer.in_dim}, chain has {cur}"
                    )
                cur = layer.out_dim
            elif isinstance(layer, Norm):
                if layer.dim != cur:
                    raise ValueError(
                        f"layer {idx}: norm dim {layer.dim} != chain dim {cur}"
                    )
            elif not isinstance(layer, Activation):
                raise TypeError(f"layer {idx}: unknown layer spec {layer!r}")
        if cur != self.output_dim:
            raise ValueError(f"chain ends with dim {cur}, declared {self.output_dim}")

    def param_slots(self) -> list[tuple[str, ParamKind, tuple[int, ...]]]:
        slots = []
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                slots.append(
                    (f"layer{idx}.weight", ParamKind.LINEAR_WEIGHT,
                     (layer.in_dim, layer.out_dim))
                )
                if layer.bias:
                    slots.append((f"layer{idx}.bias", ParamKind.SHIFT, (layer.out_dim,)))
            elif isinstance(layer, Norm):
                slots.append((f"layer{idx}.scale", ParamKind.SCALE, (layer.dim,)))
                slots.append((f"layer{idx}.shift", ParamKind.SHIFT, (layer.dim,)))
        return slots

    def to_json_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Linear):
                layers.append({"type": "linear", "in_dim": layer.in_dim,
                               "out_dim": layer.out_dim, "bias": layer.bias})
            elif isinstance(layer, Norm):
                layers.append({"type": "norm", "dim": layer.dim, "eps": layer.eps})
            else:
                layers.append({"type": "activation", "kind": layer.kind})
        return {"input_dim": self.input_dim, "output_dim": self.output_dim,
                "layers": layers}

    @classmethod
    def from_json_dict(cls, data: dict) -> "ModelSpec":
        layers: list = []
        for rec in data["layers"]:
            t = rec["type"]
            if t == "linear":
                layers.append(Linear(rec["in_dim"], rec["out_dim"], rec["bias"]))
            elif t == "norm":
                layers.append(Norm(rec["dim"], rec["eps"]))
            elif t == "activation":
                layers.append(Activation(rec["kind"]))
            else:
                raise ValueError(f"unknown layer type {t!r}")
        return cls(layers, data["input_dim"], data["output_dim"])

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_json_dict(json.loads(text))


@dataclasses.dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError(f"batch x must be [n, d] with n >= 1, got {self.x.shape}")
        if self.y is not None:
            self.y = np.asarray(self.y)
            if self.y.shape[0] != self.x.shape[0]:
                raise ValueError("batch x and y row counts differ")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def take(self, count: int) -> "Batch":
        """First ``count`` rows."""
        return Batch(self.x[:count].copy(),
                     None if self.y is None else self.y[:count].copy())


FeatureTrace = dict


def check_spec_params(spec: ModelSpec, params: Checkpoint) -> None:
    """Raise unless ``params`` matches the spec's slots in order.

    A slot may be tagged FROZEN instead of its natural kind; frozen slots
    behave like constants for trimming and get zero gradients.
    """
    slots = spec.param_slots()
    names = [name for name, _, _ in slots]
    if params.names() != names:
        raise ValueError(
            f"checkpoint slots {params.names()} do not match spec slots {names}"
        )
    for name, kind, shape in slots:
        entry = params[name]
        if entry.array.shape != shape:
            raise ValueError(
                f"slot {name}: shape {entry.array.shape} != spec shape {shape}"
            )
        if entry.kind is not kind and entry.kind is not ParamKind.FROZEN:
            raise ValueError(
                f"slot {name}: kind {entry.kind.value} incompatible with {kind.value}"
            )


def _activation_fn(kind: str) -> Callable[[np.ndarray], np.ndarray]:
    if kind == "relu":
        return lambda x: np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh
    if kind == "gelu":
        return lambda x: 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_CUBIC * x**3)))
    return lambda x: x


def _activation_grad(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (x > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(x) ** 2
    if kind == "gelu":
        u = _GELU_C * (x + _GELU_CUBIC * x**3)
        t = np.tanh(u)
        du = _GELU_C * (1.0 + 3.0 * _GELU_CUBIC * x**2)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
    return np.ones_like(x)


def _check_finite(x: np.ndarray, idx: int) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values after layer {idx}")


def apply_layer(layer: LayerSpec, x: np.ndarray,
                params: Checkpoint | None = None, idx: int = 0) -> np.ndarray:
    """Apply a single layer (used by the conflict diagnostics)."""
    if isinstance(layer, Linear):
        z = x @ params[f"layer{idx}.weight"].array
        if layer.bias:
            z = z + params[f"layer{idx}.bias"].array
        return z
    if isinstance(layer, Norm):
        mu = x.mean(axis=1, keepdims=True)
        var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
        xhat = (x - mu) / np.sqrt(var + layer.eps)
        return xhat * params[f"layer{idx}.scale"].array + params[f"layer{idx}.shift"].array
    return _activation_fn(layer.kind)(x)


def _run(spec: ModelSpec, params: Checkpoint, x: np.ndarray, collect: bool):
    trace: FeatureTrace = {}
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, Linear):
            if collect:
                trace[f"layer{idx}.weight"] = x.copy()
            z = x @ params[f"layer{idx}.weight"].array
            if layer.bias:
                if collect:
                    trace[f"layer{idx}.bias"] = z.copy()
                z = z + params[f"layer{idx}.bias"].array
            x = z
        elif isinstance(layer, Norm):
            mu = x.mean(axis=1, keepdims=True)
            var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
            xhat = (x - mu) / np.sqrt(var + layer.eps)
            if collect:
                trace[f"layer{idx}.scale"] = xhat.copy()
            scaled = xhat * params[f"layer{idx}.scale"].array
            if collect:
                trace[f"layer{idx}.shift"] = scaled.copy()
            x = scaled + params[f"layer{idx}.shift"].array
        else:
            x = _activation_fn(layer.kind)(x)
        _check_finite(x, idx)
    return x, trace


def forward(spec: ModelSpec, params: Checkpoint, batch: Batch) -> np.ndarray:
    """Deterministic forward pass; output is [n, output_dim]."""
    check_spec_params(spec, params)
    if batch.x.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch dim {batch.x.shape[1]} != model input dim {spec.input_dim}"
        )
    out, _ = _run(spec, params, batch.x, collect=False)
    return out


def forward_collect(spec: ModelSpec, params: Checkpoint, batch: Batch):
    """Forward pass plus the input tensor seen by every parameter slot.

    For a linear weight the trace holds the layer input; for a bias the
    pre-bias features; for a norm scale the normalized features; for a norm
    shift the scaled features.  In every case the trace is the tensor the
    slot's parameter is about to act on.
    """
    check_spec_params(spec, params)
    if batch.x.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch dim {batch.x.shape[1]} != model input dim {spec.input_dim}"
        )
    out, trace = _run(spec, params, batch.x, collect=True)
    return out, trace


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    return shifted - lse


def per_sample_loss(kind: str, logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row loss contributions; the batch loss is their mean."""
    logits = np.asarray(logits, dtype=np.float64)
    if kind == "cross_entropy":
        y = np.asarray(targets)
        if y.ndim != 1 or y.shape[0] != logits.shape[0]:
            raise ValueError("cross_entropy expects integer labels [n]")
        y = y.astype(np.int64)
        if np.any(y < 0) or np.any(y >= logits.shape[1]):
            raise ValueError("label out of class range")
        return -_log_softmax(logits)[np.arange(logits.shape[0]), y]
    if kind == "mse":
        t = np.asarray(targets, dtype=np.float64)
        if t.shape != logits.shape:
            raise ValueError(f"mse shape mismatch: {logits.shape} vs {t.shape}")
        return np.mean((logits - t) ** 2, axis=1)
    raise ValueError(f"unknown loss kind {kind!r}")


def loss(kind: str, logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean batch loss; cross_entropy applies log-softmax internally."""
    return float(np.mean(per_sample_loss(kind, logits, targets)))


def _loss_grad(kind: str, logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    n = logits.shape[0]
    if kind == "cross_entropy":
        y = np.asarray(targets).astype(np.int64)
        p = np.exp(_log_softmax(logits))
        p[np.arange(n), y] -= 1.0
        return p / n
    if kind == "mse":
        t = np.asarray(targets, dtype=np.float64)
        return 2.0 * (logits - t) / logits.size
    raise ValueError(f"unknown loss kind {kind!r}")


def backward(spec: ModelSpec, params: Checkpoint, batch: Batch,
             loss_kind: str) -> Checkpoint:
    """Gradients of the batch loss, aligned to ``params``.

    Frozen slots come back with exactly zero gradient.
    """
    check_spec_params(spec, params)
    if batch.y is None:
        raise ValueError("backward requires a labeled batch")

    # Forward with caches.
    x = batch.x
    caches = []
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, Linear):
            caches.append(("linear", idx, layer, x))
            z = x @ params[f"layer{idx}.weight"].array
            if layer.bias:
                z = z + params[f"layer{idx}.bias"].array
            x = z
        elif isinstance(layer, Norm):
            mu = x.mean(axis=1, keepdims=True)
            var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(var + layer.eps)
            xhat = (x - mu) * inv
            caches.append(("norm", idx, layer, (xhat, inv)))
            x = xhat * params[f"layer{idx}.scale"].array + params[f"layer{idx}.shift"].array
        else:
            caches.append(("act", idx, layer, x))
            x = _activation_fn(layer.kind)(x)
        _check_finite(x, idx)

    grads_by_name: dict[str, np.ndarray] = {}
    g = _loss_grad(loss_kind, x, batch.y)
    for kind_tag, idx, layer, cache in reversed(caches):
        if kind_tag == "linear":
            inp = cache
            if layer.bias:
                grads_by_name[f"layer{idx}.bias"] = g.sum(axis=0)
            grads_by_name[f"layer{idx}.weight"] = inp.T @ g
            g = g @ params[f"layer{idx}.weight"].array.T
        elif kind_tag == "norm":
            xhat, inv = cache
            scale = params[f"layer{idx}.scale"].array
            grads_by_name[f"layer{idx}.shift"] = g.sum(axis=0)
            grads_by_name[f"layer{idx}.scale"] = (g * xhat).sum(axis=0)
            gh = g * scale
            g = inv * (
                gh
                - gh.mean(axis=1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=1, keepdims=True)
            )
        else:
            g = g * _activation_grad(layer.kind, cache)

    grads = Checkpoint()
    for name, entry in params:
        if entry.kind is ParamKind.FROZEN:
            grads.add(name, entry.kind, np.zeros_like(entry.array))
        else:
            grads.add(name, entry.kind, grads_by_name[name])
    return grads


def sgd_step(params: Checkpoint, grads: Checkpoint, lr: float) -> Checkpoint:
    """params - lr * grads, elementwise; inputs are left untouched."""
    from .tensorio import check_aligned

    if not check_aligned(params, grads):
        raise ValueError("params and grads are not aligned")
    out = Checkpoint(meta=params.meta)
    for name, entry in params:
        out.add(name, entry.kind, entry.array - lr * grads[name].array,
                store_dtype=entry.store_dtype)
    return out


def zero_params(spec: ModelSpec) -> Checkpoint:
    """All-zero weights with norm scales at one (an 'identity-ish' start)."""
    ckpt = Checkpoint()
    for name, kind, shape in spec.param_slots():
        if kind is ParamKind.SCALE:
            ckpt.add(name, kind, np.ones(shape))
        else:
            ckpt.add(name, kind, np.zeros(shape))
    return ckpt
