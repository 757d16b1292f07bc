"""Client population synthesis with controllable label skew.

Each client draws a class distribution ``q ~ Dir(alpha * p)`` around a prior
``p`` and is then filled with examples from per-class pools. Small ``alpha``
drives clients toward a single class; ``alpha = inf`` gives every client the
prior exactly. The sort-and-partition shard scheme is provided as a
pathological baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# 8 concentrations spanning one-class clients to identical clients.
DEFAULT_ALPHAS = (1e-3, 1e-2, 1e-1, 0.5, 1.0, 10.0, 100.0, 1e6)

MANIFEST_VERSION = 1


class PartitionError(ValueError):
    pass


def uniform_prior(num_classes: int) -> np.ndarray:
    return np.full(num_classes, 1.0 / num_classes)


def check_simplex(p, name: str = "distribution", atol: float = 1e-12) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError(f"{name} must be a non-empty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be finite and non-negative")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"{name} must sum to 1, sums to {p.sum()!r}")
    return p


@dataclass
class ClientDataset:
    client_id: int
    example_indices: np.ndarray
    class_counts: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, ClientDataset):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and np.array_equal(self.example_indices, other.example_indices)
            and np.array_equal(self.class_counts, other.class_counts)
        )

    def __len__(self):
        return len(self.example_indices)


@dataclass
class Population:
    clients: list[ClientDataset]
    alpha: float | None
    prior: np.ndarray
    seed: int
    scheme: str = "dirichlet"
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.prior)

    def __eq__(self, other):
        if not isinstance(other, Population):
            return NotImplemented
        return (
            self.clients == other.clients
            and _same_alpha(self.alpha, other.alpha)
            and np.array_equal(self.prior, other.prior)
            and self.seed == other.seed
            and self.scheme == other.scheme
            and self.meta == other.meta
        )


def _same_alpha(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return a == b


# --------------------------------------------------------------------------
# Dirichlet sampling
# --------------------------------------------------------------------------


def sample_log_dirichlet(
    alpha: float, prior, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """Log of ``Dir(alpha * prior)`` draws; ``-inf`` where the prior is zero.

    Gamma variates with tiny shape underflow to zero in linear space, so each
    is drawn as ``log G(a + 1) + log(U) / a`` and normalized in log space.
    With ``size`` the result has one row per draw.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    prior = check_simplex(prior, "prior")
    n = 1 if size is None else size
    logq = np.full((n, prior.size), -np.inf)
    support = prior > 0
    if math.isinf(alpha):
        logq[:, support] = np.log(prior[support])
    else:
        shape = alpha * prior[support]
        u = rng.uniform(size=(n, shape.size))
        log_g = np.log(rng.gamma(shape + 1.0, size=(n, shape.size))) + np.log(u) / shape
        m = log_g.max(axis=1, keepdims=True)
        logq[:, support] = log_g - (m + np.log(np.exp(log_g - m).sum(axis=1, keepdims=True)))
    return logq[0] if size is None else logq


def sample_dirichlet(
    alpha: float, prior, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """Draw label distributions ``q ~ Dir(alpha * prior)``."""
    q = np.exp(sample_log_dirichlet(alpha, prior, rng, size))
    return q / q.sum(axis=-1, keepdims=True)


def _normalize_log(logw: np.ndarray, allowed: np.ndarray) -> np.ndarray | None:
    """Renormalize ``exp(logw)`` over ``allowed``; None if it has no mass there."""
    w = np.where(allowed, logw, -np.inf)
    if not np.any(np.isfinite(w)):
        return None
    w = np.exp(w - np.max(w))
    return w / w.sum()


# --------------------------------------------------------------------------
# Count realization
# --------------------------------------------------------------------------


def largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` that are proportional to ``weights``.

    Ties on the fractional remainder go to the lower index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    exact = total * weights / weights.sum()
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _realize_counts(
    size: int,
    logq: np.ndarray,
    stock: np.ndarray,
    mode: str,
    rng: np.random.Generator,
) -> np.ndarray:
    counts = np.zeros_like(stock)
    need = size
    while need > 0:
        room = stock - counts
        w = _normalize_log(logq, room > 0)
        if w is None:
            # q has no mass on any class with stock left; fall back to stock shares.
            w = room / room.sum()
        if mode == "multinomial":
            draw = rng.multinomial(need, w)
        else:
            draw = largest_remainder(need, w)
        draw = np.minimum(draw, room)
        counts += draw
        need -= int(draw.sum())
    return counts


# --------------------------------------------------------------------------
# Population builders
# --------------------------------------------------------------------------


def _class_pools(labels: np.ndarray, num_classes: int, rng: np.random.Generator):
    pools = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        pools.append(rng.permutation(idx))
    return pools


def _labels_array(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise PartitionError("labels must be a non-empty 1-D vector")
    if labels.min() < 0:
        raise PartitionError("labels must be non-negative")
    return labels.astype(np.int64)


def synthesize_population(
    labels,
    n_clients: int,
    client_size: int,
    alpha: float,
    prior=None,
    seed: int = 0,
    count_mode: str = "round",
    num_classes: int | None = None,
) -> Population:
    """Build ``n_clients`` clients of exactly ``client_size`` examples each.

    Clients are filled in a seeded random order. Each draws ``q`` and turns it
    into integer class counts, either by largest-remainder rounding of
    ``client_size * q`` (``count_mode="round"``) or by a multinomial draw
    (``count_mode="multinomial"``). Any class whose pool cannot cover its
    count is clamped to what remains and the shortfall is re-allocated with
    ``q`` renormalized over the classes that still have stock.

    When ``n_clients * client_size == len(labels)`` every example is used
    exactly once.
    """
    labels = _labels_array(labels)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if prior is None else len(prior)
    prior = uniform_prior(num_classes) if prior is None else check_simplex(prior, "prior")
    if len(prior) != num_classes or labels.max() >= num_classes:
        raise PartitionError("prior length does not match the label range")
    if count_mode not in ("round", "multinomial"):
        raise ValueError(f"unknown count_mode {count_mode!r}")
    if n_clients < 1 or client_size < 1:
        raise PartitionError("n_clients and client_size must be positive")
    demand = n_clients * client_size
    if demand > len(labels):
        raise PartitionError(
            f"{n_clients} clients x {client_size} examples = {demand} exceeds "
            f"{len(labels)} available examples"
        )
    stock = np.bincount(labels, minlength=num_classes).astype(np.int64)
    if demand == len(labels):
        # Balanced mode: each pool must cover its share of the prior.
        implied = largest_remainder(demand, prior)
        short = np.flatnonzero(stock < implied)
        if short.size:
            raise PartitionError(
                "class pools too small for the prior: "
                + ", ".join(f"class {c} has {stock[c]} < {implied[c]}" for c in short)
            )
        if np.any((prior == 0) & (stock > 0)):
            raise PartitionError(
                "balanced mode needs every labelled class in the prior's support"
            )

    rng = np.random.default_rng(seed)
    pools = _class_pools(labels, num_classes, rng)
    taken = np.zeros(num_classes, dtype=np.int64)
    order = rng.permutation(n_clients)
    by_id: dict[int, ClientDataset] = {}
    for cid in order:
        logq = sample_log_dirichlet(alpha, prior, rng)
        remaining = stock - taken
        usable = remaining * (prior > 0)
        if usable.sum() < client_size:
            raise PartitionError(
                f"pool exhausted at client {cid}: {int(usable.sum())} examples "
                f"left in the prior's support, {client_size} needed"
            )
        counts = _realize_counts(client_size, logq, usable, count_mode, rng)
        parts = []
        for c in np.flatnonzero(counts):
            parts.append(pools[c][taken[c]:taken[c] + counts[c]])
            taken[c] += counts[c]
        indices = np.sort(np.concatenate(parts))
        by_id[int(cid)] = ClientDataset(int(cid), indices, counts)

    return Population(
        clients=[by_id[i] for i in range(n_clients)],
        alpha=float(alpha),
        prior=prior,
        seed=seed,
        scheme="dirichlet",
        meta={"count_mode": count_mode},
    )


def sort_and_partition(
    labels,
    n_clients: int,
    shards_per_client: int,
    seed: int = 0,
    avoid_repeat_labels: bool = True,
    num_classes: int | None = None,
) -> Population:
    """Sort examples by label, cut into equal shards, deal shards to clients.

    Shards are dealt by a seeded uniform permutation. With
    ``avoid_repeat_labels`` a repair pass then swaps shards between clients so
    that no client holds two shards sharing a label, whenever such a swap
    exists; otherwise the raw permutation is kept.
    """
    labels = _labels_array(labels)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    n_shards = n_clients * shards_per_client
    if n_clients < 1 or shards_per_client < 1 or len(labels) % n_shards:
        raise PartitionError(
            f"{len(labels)} examples do not divide into {n_clients} x "
            f"{shards_per_client} equal shards"
        )
    shard_len = len(labels) // n_shards
    ordered = np.argsort(labels, kind="stable")
    shards = ordered.reshape(n_shards, shard_len)
    shard_labels = [frozenset(np.unique(labels[s]).tolist()) for s in shards]

    rng = np.random.default_rng(seed)
    assign = rng.permutation(n_shards).reshape(n_clients, shards_per_client)
    if avoid_repeat_labels and shards_per_client > 1:
        _repair_shards(assign, shard_labels, rng)

    clients = []
    for cid in range(n_clients):
        indices = np.sort(shards[assign[cid]].ravel())
        counts = np.bincount(labels[indices], minlength=num_classes).astype(np.int64)
        clients.append(ClientDataset(cid, indices, counts))
    prior = np.bincount(labels, minlength=num_classes) / len(labels)
    return Population(
        clients=clients,
        alpha=None,
        prior=prior,
        seed=seed,
        scheme="sort",
        meta={"shards_per_client": shards_per_client},
    )


def _has_repeat(shard_ids, shard_labels) -> bool:
    seen: set = set()
    for s in shard_ids:
        if seen & shard_labels[s]:
            return True
        seen |= shard_labels[s]
    return False


def _repair_shards(assign: np.ndarray, shard_labels, rng, max_passes: int = 10) -> None:
    n_clients, k = assign.shape
    for _ in range(max_passes):
        bad = [c for c in range(n_clients) if _has_repeat(assign[c], shard_labels)]
        if not bad:
            return
        for c in bad:
            if not _has_repeat(assign[c], shard_labels):
                continue
            fixed = False
            for i in range(k):
                for other in rng.permutation(n_clients):
                    if other == c:
                        continue
                    for j in range(k):
                        assign[c, i], assign[other, j] = assign[other, j], assign[c, i]
                        if not (
                            _has_repeat(assign[c], shard_labels)
                            or _has_repeat(assign[other], shard_labels)
                        ):
                            fixed = True
                            break
                        assign[c, i], assign[other, j] = assign[other, j], assign[c, i]
                    if fixed:
                        break
                if fixed:
                    break


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------


def kl_divergence(q: np.ndarray, p: np.ndarray) -> float:
    """KL(q || p) in nats, with 0 log 0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    support = q > 0
    if np.any(p[support] == 0):
        return math.inf
    return float(np.sum(q[support] * np.log(q[support] / p[support])))


def earth_movers_distance(q: np.ndarray, p: np.ndarray) -> float:
    """EMD between two label histograms under unit cost between distinct classes.

    With that ground metric the optimal transport cost is half the L1
    distance.
    """
    return 0.5 * float(np.abs(np.asarray(q, float) - np.asarray(p, float)).sum())


def population_stats(pop: Population) -> dict:
    counts = np.stack([c.class_counts for c in pop.clients])
    sizes = counts.sum(axis=1, keepdims=True)
    hists = counts / np.maximum(sizes, 1)
    emd = np.array([earth_movers_distance(h, pop.prior) for h in hists])
    kl = np.array([kl_divergence(h, pop.prior) for h in hists])
    return {
        "n_clients": len(pop.clients),
        "client_sizes": sizes.ravel().tolist(),
        "histograms": hists,
        "emd": emd,
        "kl": kl,
        "mean_emd": float(emd.mean()),
        "mean_kl": float(kl.mean()),
        "min_class_count": int(counts.min()),
        "max_class_count": int(counts.max()),
        "distinct_labels": (counts > 0).sum(axis=1).tolist(),
    }


# --------------------------------------------------------------------------
# Manifest I/O
# --------------------------------------------------------------------------


def _alpha_to_json(alpha):
    if alpha is None:
        return None
    return "inf" if math.isinf(alpha) else alpha


def write_manifest(pop: Population, path) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "scheme": pop.scheme,
        "seed": pop.seed,
        "alpha": _alpha_to_json(pop.alpha),
        "prior": [float(x) for x in pop.prior],
        "meta": pop.meta,
        "clients": [
            {
                "client_id": c.client_id,
                "class_counts": c.class_counts.tolist(),
                "indices": c.example_indices.tolist(),
            }
            for c in pop.clients
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def read_manifest(path) -> Population:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise PartitionError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    alpha = doc["alpha"]
    if alpha == "inf":
        alpha = math.inf
    clients = []
    for entry in doc["clients"]:
        indices = np.asarray(entry["indices"], dtype=np.int64)
        counts = np.asarray(entry["class_counts"], dtype=np.int64)
        if counts.sum() != len(indices):
            raise PartitionError(
                f"{path}: client {entry['client_id']} counts disagree with its index list"
            )
        clients.append(ClientDataset(int(entry["client_id"]), indices, counts))
    return Population(
        clients=clients,
        alpha=None if alpha is None else float(alpha),
        prior=np.asarray(doc["prior"], dtype=np.float64),
        seed=int(doc["seed"]),
        scheme=doc["scheme"],
        meta=doc.get("meta", {}),
    )


def validate_population(pop: Population, labels, balanced: bool = True) -> None:
    """Raise PartitionError if the population is inconsistent with ``labels``."""
    labels = np.asarray(labels)
    seen = np.zeros(len(labels), dtype=bool)
    for c in pop.clients:
        idx = c.example_indices
        if len(np.unique(idx)) != len(idx):
            raise PartitionError(f"client {c.client_id} has duplicate indices")
        if np.any(seen[idx]):
            raise PartitionError(f"client {c.client_id} overlaps another client")
        seen[idx] = True
        actual = np.bincount(labels[idx], minlength=pop.num_classes)
        if not np.array_equal(actual, c.class_counts):
            raise PartitionError(f"client {c.client_id} class counts do not match labels")
    if balanced and not seen.all():
        raise PartitionError(f"{int((~seen).sum())} examples are not assigned")
