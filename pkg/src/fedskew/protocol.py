"""One federated round: client sampling, local SGD, aggregation, server update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import STREAM_SAMPLING, Batch, ModelSpec, derive_rng, loss_and_grad

SERVER_KINDS = ("plain", "momentum", "nesterov")


class Divergence(FloatingPointError):
    """A non-finite loss or parameter appeared during training."""

    def __init__(self, message: str, round: int | None = None, client_id: int | None = None):
        super().__init__(message)
        self.round = round
        self.client_id = client_id


@dataclass(frozen=True)
class ClientConfig:
    batch_size: int = 64
    local_epochs: int = 1
    learning_rate: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass(frozen=True)
class ServerOptimizerConfig:
    kind: str = "plain"
    beta: float = 0.0
    server_lr: float = 1.0

    def __post_init__(self):
        if self.kind not in SERVER_KINDS:
            raise ValueError(f"kind must be one of {SERVER_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.kind == "plain" and self.beta != 0.0:
            raise ValueError("plain server optimizer requires beta = 0")
        if not self.server_lr > 0:
            raise ValueError("server_lr must be > 0")


@dataclass(frozen=True)
class ServerState:
    params: np.ndarray
    momentum: np.ndarray = field(default=None)
    round: int = 0

    def __post_init__(self):
        if self.momentum is None:
            object.__setattr__(self, "momentum", np.zeros_like(self.params))
        elif self.momentum.shape != self.params.shape:
            raise ValueError("momentum buffer layout does not match params")


class ClientUpdate(NamedTuple):
    delta: np.ndarray
    num_examples: int
    train_loss: float


def clients_per_round(n_clients: int, reporting_fraction: float) -> int:
    if not 0.0 < reporting_fraction <= 1.0:
        raise ValueError(f"reporting fraction must lie in (0, 1], got {reporting_fraction}")
    k = int(math.floor(reporting_fraction * n_clients + 0.5))
    if k < 1:
        raise ValueError(
            f"reporting fraction {reporting_fraction} of {n_clients} clients selects nobody"
        )
    return k


def sample_clients(
    n_clients: int, reporting_fraction: float, round: int, seed: int
) -> list[int]:
    """Sorted ids of the clients reporting in ``round``, drawn without replacement."""
    k = clients_per_round(n_clients, reporting_fraction)
    rng = derive_rng(seed, STREAM_SAMPLING, round)
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def client_update(
    spec: ModelSpec,
    global_params: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    cfg: ClientConfig,
    rng: np.random.Generator,
) -> ClientUpdate:
    """Run ``cfg.local_epochs`` epochs of minibatch SGD from ``global_params``.

    Each epoch reshuffles the local data; the last partial batch is trained
    with its gradient averaged over its true size. The returned delta is
    ``global_params - local_params``.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("client has no data")
    w = global_params.copy()
    lr = cfg.learning_rate
    bs = cfg.batch_size
    loss_sum = 0.0
    steps = 0
    # Overflow is reported through Divergence, not warnings.
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.local_epochs):
            perm = rng.permutation(n)
            for start in range(0, n, bs):
                idx = perm[start:start + bs]
                loss, grad = loss_and_grad(spec, w, Batch(features[idx], labels[idx]))
                if not math.isfinite(loss):
                    raise Divergence(f"non-finite client loss after {steps} local steps")
                w -= lr * grad
                loss_sum += loss
                steps += 1
    delta = global_params - w
    if not np.all(np.isfinite(delta)):
        raise Divergence("non-finite client weights")
    return ClientUpdate(delta, n, loss_sum / steps)


def aggregate(
    deltas: Sequence[np.ndarray],
    counts: Sequence[int],
    client_ids: Sequence[int] | None = None,
) -> np.ndarray:
    """Example-weighted mean of client deltas, summed in ascending client-id order."""
    if len(deltas) == 0 or len(deltas) != len(counts):
        raise ValueError("need equally many (non-zero) deltas and counts")
    if client_ids is None:
        client_ids = range(len(deltas))
    elif len(client_ids) != len(deltas):
        raise ValueError("client_ids length does not match deltas")
    shape = deltas[0].shape
    for d in deltas:
        if d.shape != shape:
            raise ValueError(f"delta layout mismatch: {d.shape} vs {shape}")
    order = sorted(range(len(deltas)), key=lambda i: client_ids[i])
    total = float(sum(counts[i] for i in order))
    if total <= 0:
        raise ValueError("example counts must sum to a positive number")
    out = np.zeros(shape)
    for i in order:
        out += (counts[i] / total) * deltas[i]
    return out


def server_step(
    state: ServerState, delta: np.ndarray, cfg: ServerOptimizerConfig
) -> ServerState:
    """Apply an aggregated delta.

    plain:     w <- w - lr * d
    momentum:  v <- beta * v + d;  w <- w - lr * v
    nesterov:  v <- beta * v + d;  w <- w - lr * (beta * v + d)
    """
    if delta.shape != state.params.shape:
        raise ValueError("delta layout does not match params")
    if cfg.kind == "plain":
        v = state.momentum
        step = delta
    else:
        v = cfg.beta * state.momentum + delta
        step = v if cfg.kind == "momentum" else cfg.beta * v + delta
    with np.errstate(over="ignore", invalid="ignore"):
        w = state.params - cfg.server_lr * step
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
        raise Divergence("non-finite server parameters", round=state.round + 1)
    return replace(state, params=w, momentum=v, round=state.round + 1)
