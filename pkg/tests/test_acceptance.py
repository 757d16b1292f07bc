"""Acceptance criteria, each checked at its stated tolerance and time budget.

Run with ``pytest tests/test_acceptance.py``; a summary with one PASS/FAIL
line per criterion is printed at the end of the session.
"""

import itertools
import math
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from fedskew.cli import main
from fedskew.config import BETA_GRID, LR_GRID, ExperimentConfig
from fedskew.harness import effective_learning_rate, load_data, run_experiment, run_sweep
from fedskew.numerics import Batch, ModelSpec, evaluate, init_params, loss_and_grad
from fedskew.partition import (
    DEFAULT_ALPHAS,
    sample_dirichlet,
    sort_and_partition,
    synthesize_population,
    uniform_prior,
)

from test_numerics import numeric_grad, random_instance

# Desk-scale task: 10 classes in 32 dimensions, feature scale chosen so that a
# centrally trained softmax model lands near 0.95 test accuracy.
DESK = ExperimentConfig().with_overrides(
    data={"noise": 0.05, "separation": 0.175},
    population={"clients": 20, "size": 200},
    client={"batch_size": 20, "local_epochs": 1},
    run={"reporting_fraction": 0.25, "rounds": 300, "eval_every": 300},
)
REPEATS = 5


def desk_grid(**axes):
    grid = {
        "alpha": [0.01],
        "reporting_fraction": [0.25],
        "local_epochs": [1],
        "learning_rate": list(LR_GRID),
        "beta": [0.0],
    }
    grid.update({k: list(v) for k, v in axes.items()})
    return grid


def cell_means(result):
    return {
        key: float(np.mean([r.accuracy for r in runs]))
        for key, runs in result.cells().items()
    }


# ----------------------------------------------------------------------- 1


def test_criterion_1_zero_momentum_equivalence(acceptance):
    start = time.perf_counter()
    base = DESK.with_overrides(run={"rounds": 100, "eval_every": 100})
    trajectories = {}
    for kind in ("plain", "momentum", "nesterov"):
        cfg = base.with_overrides(server={"kind": kind, "beta": 0.0, "server_lr": 1.0})
        traj = []
        run_experiment(cfg, callback=lambda r, s, traj=traj: traj.append(s.params.copy()))
        trajectories[kind] = traj
    elapsed = time.perf_counter() - start
    plain = trajectories["plain"]
    identical = all(
        len(trajectories[k]) == len(plain) == 100
        and all(np.array_equal(a, b) for a, b in zip(plain, trajectories[k]))
        for k in ("momentum", "nesterov")
    )
    acceptance(
        1, "beta=0 server momentum equals plain averaging bitwise",
        identical and elapsed < 10, f"100 rounds x 3 runs, identical={identical}, {elapsed:.2f}s",
    )


# ----------------------------------------------------------------------- 2


def test_criterion_2_gradient_suite(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        spec, w, batch = random_instance(rng)
        _, grad = loss_and_grad(spec, w, batch)
        fd = numeric_grad(lambda v: loss_and_grad(spec, v, batch)[0], w)
        scale = max(np.abs(grad).max(), np.abs(fd).max(), 1e-8)
        worst = max(worst, float(np.abs(grad - fd).max() / scale))
    elapsed = time.perf_counter() - start
    acceptance(
        2, "analytic gradients match central differences",
        worst < 1e-5 and elapsed < 5, f"200 instances, max rel err {worst:.2e}, {elapsed:.2f}s",
    )


# ----------------------------------------------------------------------- 3


def test_criterion_3_partition_exact_cover(acceptance, cifar_labels):
    start = time.perf_counter()
    alphas = DEFAULT_ALPHAS + (math.inf,)
    failures = []
    for seed in range(20):
        alpha = alphas[seed % len(alphas)]
        pop = synthesize_population(cifar_labels, 100, 500, alpha, seed=seed)
        idx = np.concatenate([c.example_indices for c in pop.clients])
        sizes_ok = all(len(c) == 500 for c in pop.clients)
        if not (sizes_ok and np.array_equal(np.sort(idx), np.arange(50_000))):
            failures.append((seed, alpha))
    elapsed = time.perf_counter() - start
    acceptance(
        3, "100 x 500 clients exactly cover 50,000 indices",
        not failures and elapsed < 10, f"20 seeds, failures={failures}, {elapsed:.2f}s",
    )


# ----------------------------------------------------------------------- 4


def test_criterion_4_dirichlet_statistics(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    prior = uniform_prior(10)
    n = 100_000
    worst_z = 0.0
    for alpha in (0.1, 1.0, 10.0):
        q = sample_dirichlet(alpha, prior, rng, size=n)
        # Var(q_i) = p_i (1 - p_i) / (alpha + 1) for Dir(alpha * p).
        sigma = math.sqrt(0.1 * 0.9 / (alpha + 1) / n)
        worst_z = max(worst_z, float(np.abs(q.mean(axis=0) - 0.1).max() / sigma))
    peaked = float((sample_dirichlet(1e-3, prior, rng, size=n).max(axis=1) > 0.99).mean())
    elapsed = time.perf_counter() - start
    acceptance(
        4, "Dirichlet means within 3 sigma; alpha=1e-3 draws are one-hot",
        worst_z < 3 and peaked >= 0.99 and elapsed < 10,
        f"max |z|={worst_z:.2f}, peaked fraction={peaked:.4f}, {elapsed:.2f}s",
    )


# ----------------------------------------------------------------------- 5


def centralized_accuracy(cfg, lr=0.03, epochs=50):
    train, test = load_data(cfg.data)
    spec = ModelSpec(train.input_dim, train.num_classes, 0, cfg.model.weight_decay)
    w = init_params(spec, 0)
    rng = np.random.default_rng(0)
    bs = cfg.client.batch_size
    for _ in range(epochs):
        perm = rng.permutation(len(train.labels))
        for s in range(0, len(perm), bs):
            idx = perm[s:s + bs]
            _, g = loss_and_grad(spec, w, Batch(train.features[idx], train.labels[idx]))
            w -= lr * g
    return evaluate(spec, w, test.features, test.labels)[0]


@pytest.mark.slow
def test_criterion_5_label_skew_hurts(acceptance):
    start = time.perf_counter()
    central = centralized_accuracy(DESK)
    result = run_sweep(DESK, desk_grid(alpha=[1e-2, 1e2]), repeats=REPEATS)
    means = cell_means(result)
    best = {
        a: max(means[(a, 0.25, 1, lr, 0.0)] for lr in LR_GRID) for a in (1e-2, 1e2)
    }
    gap = best[1e2] - best[1e-2]
    elapsed = time.perf_counter() - start
    acceptance(
        5, "accuracy at alpha=1e-2 trails alpha=1e2 by >= 0.05",
        gap >= 0.05 and abs(central - 0.95) <= 0.03 and elapsed < 300,
        f"alpha=1e-2 {best[1e-2]:.4f}, alpha=1e2 {best[1e2]:.4f}, gap {gap:.4f}, "
        f"centralized {central:.4f}, {elapsed:.1f}s",
    )


# ----------------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_server_momentum_helps(acceptance):
    start = time.perf_counter()
    fractions = (0.25, 0.1)
    result = run_sweep(
        DESK, desk_grid(reporting_fraction=fractions, beta=BETA_GRID), repeats=REPEATS
    )
    means = cell_means(result)
    ok = True
    details = []
    for c in fractions:
        fedavg = max(means[(0.01, c, 1, lr, 0.0)] for lr in LR_GRID)
        fedavgm = max(means[(0.01, c, 1, lr, b)] for lr in LR_GRID for b in BETA_GRID)
        margin = 0.02 if c == 0.1 else 0.0
        ok &= fedavgm >= fedavg + margin
        details.append(f"C={c}: FedAvg {fedavg:.4f}, FedAvgM {fedavgm:.4f}")
    elapsed = time.perf_counter() - start
    acceptance(
        6, "best server momentum matches or beats plain averaging",
        ok and elapsed < 600, "; ".join(details) + f", {elapsed:.1f}s",
    )


# ----------------------------------------------------------------------- 7

# 1 / (1 - beta) for each beta in the grid, written out by hand.
INVERSE_ONE_MINUS_BETA = {
    0.0: Fraction(1),
    0.7: Fraction(10, 3),
    0.9: Fraction(10),
    0.97: Fraction(100, 3),
    0.99: Fraction(100),
    0.997: Fraction(1000, 3),
}
LR_AS_FRACTION = {
    1e-4: Fraction(1, 10_000),
    3e-4: Fraction(3, 10_000),
    1e-3: Fraction(1, 1000),
    3e-3: Fraction(3, 1000),
    1e-2: Fraction(1, 100),
    3e-2: Fraction(3, 100),
    1e-1: Fraction(1, 10),
    3e-1: Fraction(3, 10),
}


def test_criterion_7_effective_learning_rate_table(acceptance):
    start = time.perf_counter()
    mismatches = [
        (lr, b)
        for lr, b in itertools.product(LR_GRID, BETA_GRID)
        if effective_learning_rate(lr, b)
        != float(LR_AS_FRACTION[lr] * INVERSE_ONE_MINUS_BETA[b])
    ]
    anchor = effective_learning_rate(0.003, 0.997)
    elapsed = time.perf_counter() - start
    acceptance(
        7, "effective learning rates match the hand-computed table",
        not mismatches and anchor == 1.0 and elapsed < 1,
        f"{len(LR_GRID) * len(BETA_GRID)} cells, mismatches={mismatches}, "
        f"(0.003, 0.997) -> {anchor!r}, {elapsed * 1000:.1f}ms",
    )


# ----------------------------------------------------------------------- 8


def test_criterion_8_sort_and_partition_two_labels(acceptance):
    start = time.perf_counter()
    labels = np.repeat(np.arange(10), 100)
    counts = set()
    for seed in range(10):
        pop = sort_and_partition(labels, 10, 2, seed=seed)
        counts |= {len(np.unique(labels[c.example_indices])) for c in pop.clients}
    elapsed = time.perf_counter() - start
    acceptance(
        8, "10 clients x 2 shards hold exactly 2 labels each",
        counts == {2} and elapsed < 1, f"distinct label counts {sorted(counts)}, {elapsed * 1000:.1f}ms",
    )


# ----------------------------------------------------------------------- 9


TRAIN_CONFIGS = {
    "plain": "",
    "nesterov": '[server]\nkind = "nesterov"\nbeta = 0.9\n',
    "sort": '[population]\nscheme = "sort"\nclients = 20\n[model]\nhidden_dim = 8\n',
}
DESK_TOML = """
[data]
noise = 0.05
separation = 0.175

[client]
batch_size = 20

[run]
reporting_fraction = 0.25
rounds = 40
eval_every = 10
"""


def test_criterion_9_train_is_deterministic(acceptance, tmp_path):
    start = time.perf_counter()
    differing = []
    for name, extra in TRAIN_CONFIGS.items():
        cfg = tmp_path / f"{name}.toml"
        cfg.write_text(DESK_TOML + extra)
        outputs = []
        for threads in ("1", "1", "4"):
            out = tmp_path / f"{name}-{len(outputs)}.csv"
            assert main(["train", "--config", str(cfg), "--out", str(out), "--threads", threads]) == 0
            outputs.append(out.read_bytes())
        out = tmp_path / f"{name}-fresh.csv"
        subprocess.run(
            [sys.executable, "-m", "fedskew", "train", "--config", str(cfg), "--out", str(out),
             "--threads", "2"],
            check=True,
        )
        outputs.append(out.read_bytes())
        if any(o != outputs[0] for o in outputs):
            differing.append(name)
    elapsed = time.perf_counter() - start
    acceptance(
        9, "repeated train runs write byte-identical CSVs",
        not differing and elapsed < 30,
        f"{len(TRAIN_CONFIGS)} configs x 4 runs incl. threads 1/4/2 and a fresh process, "
        f"differing={differing}, {elapsed:.2f}s",
    )
