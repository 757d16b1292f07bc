"""Experiment driver, hyperparameter sweeps and result tables."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, SyntheticSpec, generate_synthetic, load_cifar10
from .numerics import STREAM_CLIENT, ModelSpec, derive_rng, evaluate, init_params
from .partition import (
    PartitionError,
    Population,
    read_manifest,
    sort_and_partition,
    synthesize_population,
)
from .protocol import (
    ClientConfig,
    Divergence,
    ServerOptimizerConfig,
    ServerState,
    aggregate,
    client_update,
    sample_clients,
    server_step,
)

log = logging.getLogger(__name__)

SWEEP_AXES = ("alpha", "reporting_fraction", "local_epochs", "learning_rate", "beta")
METRICS_COLUMNS = ("round", "train_loss", "test_accuracy", "n_sampled", "wall_ms")
SWEEP_COLUMNS = SWEEP_AXES + (
    "repeat",
    "population_seed",
    "training_seed",
    "final_accuracy",
    "diverged",
    "error",
)
SMOOTHING_WINDOW = 5


def effective_learning_rate(lr: float, beta: float) -> float:
    """``lr / (1 - beta)``.

    Inputs are taken at their shortest decimal value, so grid points such as
    ``(0.003, 0.997)`` give exactly 1.0 instead of a rounding artifact.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    return float(Fraction(repr(float(lr))) / (1 - Fraction(repr(float(beta)))))


# --------------------------------------------------------------------------
# Building blocks from config
# --------------------------------------------------------------------------


@lru_cache(maxsize=4)
def load_data(section) -> tuple[Dataset, Dataset]:
    if section.kind == "cifar10":
        return load_cifar10(section.cifar_dir)
    return generate_synthetic(
        SyntheticSpec(
            num_classes=section.num_classes,
            input_dim=section.input_dim,
            train_per_class=section.train_per_class,
            test_per_class=section.test_per_class,
            separation=section.separation,
            noise=section.noise,
            seed=section.seed,
        )
    )


def model_spec(cfg: ExperimentConfig, train: Dataset) -> ModelSpec:
    return ModelSpec(
        input_dim=train.input_dim,
        num_classes=train.num_classes,
        hidden_dim=cfg.model.hidden_dim,
        weight_decay=cfg.model.weight_decay,
    )


def build_population(cfg: ExperimentConfig, labels: np.ndarray, num_classes: int) -> Population:
    pc = cfg.population
    if pc.manifest:
        return read_manifest(pc.manifest)
    if pc.scheme == "sort":
        return sort_and_partition(
            labels, pc.clients, pc.shards_per_client, seed=cfg.run.population_seed,
            num_classes=num_classes,
        )
    return synthesize_population(
        labels,
        pc.clients,
        pc.size,
        pc.alpha,
        prior=pc.prior,
        seed=cfg.run.population_seed,
        count_mode=pc.count_mode,
        num_classes=num_classes,
    )


# --------------------------------------------------------------------------
# Single experiment
# --------------------------------------------------------------------------


@dataclass
class RoundReport:
    round: int
    train_loss: float | None
    test_accuracy: float | None
    selected: list[int]
    wall_ms: float
    test_loss: float | None = None

    @property
    def n_sampled(self) -> int:
        return len(self.selected)


@dataclass
class ExperimentRun:
    reports: list[RoundReport]
    params: np.ndarray
    diverged: bool = False
    diverged_round: int | None = None

    def accuracies(self) -> list[float]:
        return [r.test_accuracy for r in self.reports if r.test_accuracy is not None]

    def final_accuracy(self, stat: str = "last") -> float:
        acc = self.accuracies()
        if stat == "smoothed":
            return float(np.mean(acc[-SMOOTHING_WINDOW:]))
        return acc[-1]


def run_experiment(
    cfg: ExperimentConfig,
    train: Dataset | None = None,
    test: Dataset | None = None,
    population: Population | None = None,
    threads: int = 1,
    callback: Callable[[int, ServerState], None] | None = None,
) -> ExperimentRun:
    """Run ``cfg.run.rounds`` federated rounds and evaluate on the test split.

    Evaluation happens at round 0 and every ``eval_every`` rounds. On
    divergence the run stops; the report list ends at the failing round.
    """
    if train is None or test is None:
        train, test = load_data(cfg.data)
    spec = model_spec(cfg, train)
    if population is None:
        population = build_population(cfg, train.labels, train.num_classes)
    client_cfg = ClientConfig(
        cfg.client.batch_size, cfg.client.local_epochs, cfg.client.learning_rate
    )
    server_cfg = ServerOptimizerConfig(cfg.server.kind, cfg.server.beta, cfg.server.server_lr)
    run = cfg.run
    seed = run.training_seed
    n_clients = len(population.clients)

    state = ServerState(init_params(spec, seed))
    acc, loss = evaluate(spec, state.params, test.features, test.labels)
    reports = [RoundReport(0, None, acc, [], 0.0, loss)]

    def local(round_idx, cid):
        client = population.clients[cid]
        idx = client.example_indices
        rng = derive_rng(seed, STREAM_CLIENT, round_idx, cid)
        return client_update(
            spec, state.params, train.features[idx], train.labels[idx], client_cfg, rng
        )

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for r in range(1, run.rounds + 1):
            start = time.perf_counter()
            ids = sample_clients(n_clients, run.reporting_fraction, r, seed)
            try:
                if pool is None:
                    updates = [local(r, cid) for cid in ids]
                else:
                    updates = list(pool.map(lambda cid: local(r, cid), ids))
                delta = aggregate(
                    [u.delta for u in updates], [u.num_examples for u in updates], ids
                )
                state = server_step(state, delta, server_cfg)
            except Divergence as err:
                log.info("diverged at round %d: %s", r, err)
                reports.append(
                    RoundReport(r, math.nan, None, ids, _ms_since(start))
                )
                return ExperimentRun(reports, state.params, True, r)
            train_loss = float(np.mean([u.train_loss for u in updates]))
            acc = loss = None
            if r % run.eval_every == 0:
                acc, loss = evaluate(spec, state.params, test.features, test.labels)
            reports.append(RoundReport(r, train_loss, acc, ids, _ms_since(start), loss))
            if callback is not None:
                callback(r, state)
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentRun(reports, state.params)


def _ms_since(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


@dataclass
class CellRun:
    cell: dict
    repeat: int
    population_seed: int
    training_seed: int
    accuracy: float | None
    diverged: bool = False
    error: str | None = None


@dataclass
class SweepResult:
    axes: dict[str, list]
    runs: list[CellRun] = field(default_factory=list)
    num_classes: int = 10

    def cells(self) -> dict[tuple, list[CellRun]]:
        grouped: dict[tuple, list[CellRun]] = {}
        for run in self.runs:
            grouped.setdefault(_cell_key(run.cell, self.axes), []).append(run)
        return grouped

    def cell_mean(self, cell: dict) -> float | None:
        runs = self.cells().get(_cell_key(cell, self.axes), [])
        values = [r.accuracy for r in runs if r.accuracy is not None]
        return float(np.mean(values)) if values else None


def _cell_key(cell: dict, axes: Iterable[str]) -> tuple:
    return tuple(cell[a] for a in axes)


def sweep_grid(cfg: ExperimentConfig) -> dict[str, list]:
    s = cfg.sweep
    return {
        "alpha": list(s.alpha),
        "reporting_fraction": list(s.reporting_fraction),
        "local_epochs": list(s.local_epochs),
        "learning_rate": list(s.learning_rate),
        "beta": list(s.beta),
    }


def cell_config(base: ExperimentConfig, cell: dict, repeat: int) -> ExperimentConfig:
    beta = cell["beta"]
    kind = "plain" if beta == 0 else base.sweep.momentum_kind
    return base.with_overrides(
        population={"alpha": cell["alpha"]},
        client={"local_epochs": cell["local_epochs"], "learning_rate": cell["learning_rate"]},
        server={"kind": kind, "beta": beta},
        run={
            "reporting_fraction": cell["reporting_fraction"],
            "population_seed": base.run.population_seed + repeat,
            "training_seed": base.run.training_seed + repeat,
        },
    )


def run_sweep(
    base: ExperimentConfig,
    grid: dict[str, Sequence] | None = None,
    repeats: int | None = None,
    threads: int = 1,
    train: Dataset | None = None,
    test: Dataset | None = None,
) -> SweepResult:
    """Run every grid cell ``repeats`` times with distinct seed pairs.

    Repeat ``k`` uses population seed ``population_seed + k`` and training
    seed ``training_seed + k``. Diverged runs score chance accuracy; a cell
    whose population cannot be built is recorded with its error and skipped.
    """
    grid = sweep_grid(base) if grid is None else {a: list(grid[a]) for a in SWEEP_AXES}
    repeats = base.sweep.repeats if repeats is None else repeats
    if repeats < 1 or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep needs repeats >= 1 and non-empty axes")
    if train is None or test is None:
        train, test = load_data(base.data)
    chance = 1.0 / train.num_classes

    populations: dict[tuple, Population | str] = {}
    for alpha in grid["alpha"]:
        for k in range(repeats):
            cfg = base.with_overrides(
                population={"alpha": alpha},
                run={"population_seed": base.run.population_seed + k},
            )
            try:
                populations[alpha, k] = build_population(cfg, train.labels, train.num_classes)
            except PartitionError as err:
                populations[alpha, k] = str(err)

    jobs = []
    for values in itertools.product(*(grid[a] for a in SWEEP_AXES)):
        cell = dict(zip(SWEEP_AXES, values))
        for k in range(repeats):
            jobs.append((cell, k))

    def execute(job) -> CellRun:
        cell, k = job
        cfg = cell_config(base, cell, k)
        pop = populations[cell["alpha"], k]
        seeds = (cfg.run.population_seed, cfg.run.training_seed)
        if isinstance(pop, str):
            return CellRun(cell, k, *seeds, accuracy=None, error=pop)
        run = run_experiment(cfg, train, test, pop)
        if run.diverged:
            return CellRun(cell, k, *seeds, accuracy=chance, diverged=True)
        return CellRun(cell, k, *seeds, accuracy=run.final_accuracy(cfg.run.final_stat))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            runs = list(pool.map(execute, jobs))
    else:
        runs = [execute(j) for j in jobs]
    return SweepResult(grid, runs, train.num_classes)


def select_best(
    result: SweepResult,
    cell_axes: Sequence[str],
    optimize_axes: Sequence[str],
) -> list[dict]:
    """Best setting of ``optimize_axes`` for every combination of ``cell_axes``.

    Accuracies are averaged over repeats first, then maximized. Ties go to
    the smaller effective learning rate. Axes in neither list must hold a
    single value in the sweep. Cells with no successful run are reported with
    ``best_accuracy = None``.
    """
    for a in optimize_axes:
        if a not in result.axes:
            raise ValueError(f"unknown optimize axis {a!r}")
    for a in result.axes:
        if a not in cell_axes and a not in optimize_axes and len(result.axes[a]) > 1:
            raise ValueError(f"axis {a!r} has several values but is neither a cell nor optimized")

    means: dict[tuple, float | None] = {}
    for key, runs in result.cells().items():
        values = [r.accuracy for r in runs if r.accuracy is not None]
        means[key] = float(np.mean(values)) if values else None

    axes = list(result.axes)
    table = []
    for cell_values in itertools.product(*(result.axes[a] for a in cell_axes)):
        row = dict(zip(cell_axes, cell_values))
        best = None
        for opt_values in itertools.product(*(result.axes[a] for a in optimize_axes)):
            setting = dict(zip(optimize_axes, opt_values))
            full = {a: result.axes[a][0] for a in axes}
            full.update(row)
            full.update(setting)
            mean = means.get(_cell_key(full, axes))
            if mean is None:
                continue
            eff = effective_learning_rate(full["learning_rate"], full["beta"])
            if best is None or mean > best[0] or (mean == best[0] and eff < best[1]):
                best = (mean, eff, setting)
        if best is None:
            row.update({a: None for a in optimize_axes})
            row.update(best_accuracy=None, eta_eff=None)
        else:
            row.update(best[2])
            row.update(best_accuracy=best[0], eta_eff=best[1])
        table.append(row)
    return table


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------


def fmt(value) -> str:
    """Shortest round-trip text for numbers; empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_metrics_csv(
    path,
    run: ExperimentRun,
    config_echo: str | None = None,
    record_time: bool = False,
) -> None:
    """One row per round; ``wall_ms`` stays empty unless ``record_time``.

    Leading ``#`` lines carry the resolved config; a trailing ``#`` line marks
    divergence.
    """
    with open(path, "w", newline="") as fh:
        if config_echo is not None:
            fh.write(f"# config: {config_echo}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for r in run.reports:
            writer.writerow([
                r.round,
                fmt(r.train_loss),
                fmt(r.test_accuracy),
                r.n_sampled,
                fmt(r.wall_ms) if record_time else "",
            ])
        if run.diverged:
            fh.write(f"# diverged at round {run.diverged_round}\n")


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def write_sweep_csv(path, result: SweepResult, config_echo: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config_echo is not None:
            fh.write(f"# config: {config_echo}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for run in result.runs:
            writer.writerow(
                [fmt(run.cell[a]) for a in SWEEP_AXES]
                + [
                    run.repeat,
                    run.population_seed,
                    run.training_seed,
                    fmt(run.accuracy),
                    fmt(run.diverged),
                    run.error or "",
                ]
            )


def write_table_csv(path, rows: list[dict], config_echo: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config_echo is not None:
            fh.write(f"# config: {config_echo}\n")
        if not rows:
            return
        writer = csv.writer(fh, lineterminator="\n")
        columns = list(rows[0])
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row[c]) for c in columns])


def read_sweep_csv(path) -> SweepResult:
    rows = read_csv_rows(path)
    axes: dict[str, list] = {a: [] for a in SWEEP_AXES}
    runs = []
    for row in rows:
        cell = {
            a: (int(row[a]) if a == "local_epochs" else float(row[a])) for a in SWEEP_AXES
        }
        for a, v in cell.items():
            if v not in axes[a]:
                axes[a].append(v)
        runs.append(
            CellRun(
                cell,
                int(row["repeat"]),
                int(row["population_seed"]),
                int(row["training_seed"]),
                float(row["final_accuracy"]) if row["final_accuracy"] else None,
                row["diverged"] == "1",
                row["error"] or None,
            )
        )
    return SweepResult(axes, runs)


def plot_tables(result: SweepResult) -> list[dict]:
    """Long-format rows for accuracy-vs-alpha and effective-LR plots.

    ``fedavg_vs_alpha``: best over learning rate at beta = 0.
    ``fedavgm_vs_alpha``: best over (learning rate, beta > 0) when present.
    ``eta_eff``: every (learning rate, beta) mean, keyed by effective LR.
    """
    rows = []
    cell_axes = ["alpha", "reporting_fraction", "local_epochs"]
    plain = _restrict(result, beta=[b for b in result.axes["beta"] if b == 0])
    momentum = _restrict(result, beta=[b for b in result.axes["beta"] if b > 0])
    for figure, sub, opt in (
        ("fedavg_vs_alpha", plain, ["learning_rate", "beta"]),
        ("fedavgm_vs_alpha", momentum, ["learning_rate", "beta"]),
    ):
        if sub is None:
            continue
        for row in select_best(sub, cell_axes, opt):
            rows.append({"figure": figure, **row, "accuracy": row.pop("best_accuracy")})
    for key, runs in sorted(result.cells().items()):
        cell = runs[0].cell
        values = [r.accuracy for r in runs if r.accuracy is not None]
        rows.append({
            "figure": "eta_eff",
            **cell,
            "eta_eff": effective_learning_rate(cell["learning_rate"], cell["beta"]),
            "accuracy": float(np.mean(values)) if values else None,
        })
    columns = ["figure", *SWEEP_AXES, "eta_eff", "accuracy"]
    return [{c: row.get(c) for c in columns} for row in rows]


def _restrict(result: SweepResult, **subsets) -> SweepResult | None:
    axes = dict(result.axes)
    for a, values in subsets.items():
        if not values:
            return None
        axes[a] = values
    runs = [r for r in result.runs if all(r.cell[a] in axes[a] for a in subsets)]
    return SweepResult(axes, runs, result.num_classes)
