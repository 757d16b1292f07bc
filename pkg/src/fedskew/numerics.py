"""Flat-parameter classification models with hand-written gradients.

Parameters live in a single float64 vector; ``ModelSpec.layout`` describes how
that vector splits into weight matrices and bias vectors. Two architectures are
supported: multinomial logistic regression (``hidden_dim == 0``) and a
one-hidden-layer tanh MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

# Stream tags keep independently derived RNG streams from colliding.
STREAM_INIT = 0
STREAM_SAMPLING = 1
STREAM_CLIENT = 2


def derive_rng(*keys: int) -> np.random.Generator:
    """Generator seeded by hashing an ordered tuple of non-negative integers."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.hidden_dim < 0:
            raise ValueError(f"hidden_dim must be >= 0, got {self.hidden_dim}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    @cached_property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        d, n, h = self.input_dim, self.num_classes, self.hidden_dim
        if h == 0:
            return [("W", (d, n)), ("b", (n,))]
        return [("W1", (d, h)), ("b1", (h,)), ("W2", (h, n)), ("b2", (n,))]

    @cached_property
    def _segments(self) -> list[tuple[str, int, int, tuple[int, ...]]]:
        out = []
        offset = 0
        for name, shape in self.layout:
            size = math.prod(shape)
            out.append((name, offset, offset + size, shape))
            offset += size
        return out

    @cached_property
    def num_params(self) -> int:
        return self._segments[-1][2]

    def unflatten(self, values: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``values`` keyed by segment name (no copies)."""
        if values.shape != (self.num_params,):
            raise ValueError(
                f"parameter vector has shape {values.shape}, expected ({self.num_params},)"
            )
        return {name: values[a:b].reshape(shape) for name, a, b, shape in self._segments}

    def weight_mask(self) -> np.ndarray:
        """1.0 on weight-matrix entries, 0.0 on biases."""
        mask = np.zeros(self.num_params)
        views = self.unflatten(mask)
        for name, _ in self.layout:
            if name.startswith("W"):
                views[name][...] = 1.0
        return mask


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.features.shape[0]} rows"
            )


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = derive_rng(seed, STREAM_INIT)
    values = np.zeros(spec.num_params)
    views = spec.unflatten(values)
    for name, shape in spec.layout:
        if name.startswith("W"):
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            views[name][...] = rng.uniform(-limit, limit, size=shape)
    return values


def _check_dims(spec: ModelSpec, features: np.ndarray, labels: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ValueError(
            f"features have shape {features.shape}, expected (*, {spec.input_dim})"
        )
    if labels.shape != (features.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match features")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")


def logits(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    p = spec.unflatten(params)
    x = np.asarray(features, dtype=np.float64)
    if spec.hidden_dim == 0:
        return x @ p["W"] + p["b"]
    return np.tanh(x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(
    spec: ModelSpec, params: np.ndarray, batch: Batch
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy plus ``(weight_decay / 2) * ||weights||^2``.

    Biases are not decayed. Returns the loss and its exact gradient as a flat
    vector with the same layout as ``params``.
    """
    x = np.asarray(batch.features, dtype=np.float64)
    y = np.asarray(batch.labels)
    _check_dims(spec, x, y)
    m = x.shape[0]
    p = spec.unflatten(params)
    grad = np.empty_like(params, dtype=np.float64)
    g = spec.unflatten(grad)
    rows = np.arange(m)

    if spec.hidden_dim == 0:
        z = x @ p["W"] + p["b"]
        hidden = None
    else:
        hidden = np.tanh(x @ p["W1"] + p["b1"])
        z = hidden @ p["W2"] + p["b2"]

    logp = _log_softmax(z)
    loss = -logp[rows, y].mean()
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz /= m

    lam = spec.weight_decay
    if hidden is None:
        g["W"][...] = x.T @ dz + lam * p["W"]
        g["b"][...] = dz.sum(axis=0)
        loss += 0.5 * lam * float(np.sum(p["W"] ** 2))
    else:
        g["W2"][...] = hidden.T @ dz + lam * p["W2"]
        g["b2"][...] = dz.sum(axis=0)
        dpre = (dz @ p["W2"].T) * (1.0 - hidden**2)
        g["W1"][...] = x.T @ dpre + lam * p["W1"]
        g["b1"][...] = dpre.sum(axis=0)
        loss += 0.5 * lam * float(np.sum(p["W1"] ** 2) + np.sum(p["W2"] ** 2))
    return float(loss), grad


def evaluate(
    spec: ModelSpec,
    params: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    chunk: int = 4096,
) -> tuple[float, float]:
    """Return ``(accuracy, mean cross-entropy)`` over a labelled set.

    Predictions are the argmax logit; ties go to the lowest class index. The
    reported loss excludes the weight-decay term.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _check_dims(spec, np.asarray(features)[:1], labels[:1])
    correct = 0
    total_loss = 0.0
    for start in range(0, len(labels), chunk):
        z = logits(spec, params, features[start:start + chunk])
        y = labels[start:start + chunk]
        correct += int(np.sum(np.argmax(z, axis=1) == y))
        total_loss += -float(_log_softmax(z)[np.arange(len(y)), y].sum())
    return correct / len(labels), total_loss / len(labels)
