"""Command-line entry point: partition, train, sweep, stats, plotdata."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigError, ExperimentConfig, load_config
from .data import DatasetError
from .partition import PartitionError, population_stats, read_manifest, write_manifest

log = logging.getLogger("fedskew")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    population = {}
    data = {}
    run = {}
    if getattr(args, "alpha", None) is not None:
        population["alpha"] = args.alpha
    if getattr(args, "clients", None) is not None:
        population["clients"] = args.clients
    if getattr(args, "size", None) is not None:
        population["size"] = args.size
    if getattr(args, "scheme", None) is not None:
        population["scheme"] = args.scheme
    if getattr(args, "cifar", None) is not None:
        data.update(kind="cifar10", cifar_dir=args.cifar)
    if getattr(args, "seed", None) is not None:
        key = "population_seed" if args.command == "partition" else "training_seed"
        run[key] = args.seed
    if population or data or run:
        cfg = cfg.with_overrides(population=population, data=data, run=run)
    return cfg


def _summary(stats: dict) -> dict:
    return {
        "n_clients": stats["n_clients"],
        "client_sizes": sorted(set(stats["client_sizes"])),
        "mean_emd": stats["mean_emd"],
        "mean_kl": stats["mean_kl"],
        "min_class_count": stats["min_class_count"],
        "max_class_count": stats["max_class_count"],
        "mean_distinct_labels": float(np.mean(stats["distinct_labels"])),
    }


def cmd_partition(args) -> int:
    cfg = _load(args)
    train, _ = harness.load_data(cfg.data)
    pop = harness.build_population(cfg, train.labels, train.num_classes)
    write_manifest(pop, args.out)
    print(json.dumps(_summary(population_stats(pop)), indent=2))
    return 0


def cmd_stats(args) -> int:
    pop = read_manifest(args.manifest)
    stats = population_stats(pop)
    out = _summary(stats)
    out["alpha"] = pop.alpha
    out["scheme"] = pop.scheme
    out["seed"] = pop.seed
    if args.per_client:
        out["clients"] = [
            {"client_id": c.client_id, "class_counts": c.class_counts.tolist(),
             "emd": float(e), "kl": float(k)}
            for c, e, k in zip(pop.clients, stats["emd"], stats["kl"])
        ]
    print(json.dumps(out, indent=2))
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    run = harness.run_experiment(cfg, threads=args.threads)
    harness.write_metrics_csv(args.out, run, cfg.echo(), record_time=args.record_time)
    if args.params_out:
        np.save(args.params_out, run.params)
    final = run.accuracies()[-1]
    status = f"diverged at round {run.diverged_round}" if run.diverged else "ok"
    print(f"final test accuracy {final:.4f} ({status})")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    result = harness.run_sweep(cfg, threads=args.threads)
    harness.write_sweep_csv(args.out, result, cfg.echo())
    best = harness.select_best(
        result,
        ["alpha", "reporting_fraction", "local_epochs"],
        ["learning_rate", "beta"],
    )
    best_path = args.best_out or str(Path(args.out).with_suffix(".best.csv"))
    harness.write_table_csv(best_path, best, cfg.echo())
    errors = sum(1 for r in result.runs if r.error)
    print(f"{len(result.runs)} runs, {errors} failed cells; best table in {best_path}")
    return 0


def cmd_plotdata(args) -> int:
    result = harness.read_sweep_csv(args.sweep)
    harness.write_table_csv(args.out, harness.plot_tables(result))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedskew",
        description="Federated averaging under Dirichlet label skew.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p, seed_help):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--alpha", type=float, help="Dirichlet concentration (inf allowed)")
        p.add_argument("--clients", type=int, help="number of clients")
        p.add_argument("--size", type=int, help="examples per client")
        p.add_argument("--seed", type=int, help=seed_help)
        p.add_argument("--cifar", metavar="DIR", help="CIFAR-10 binary batch directory")

    p = sub.add_parser("partition", help="synthesize a population and write its manifest")
    overrides(p, "population seed")
    p.add_argument("--scheme", choices=["dirichlet", "sort"])
    p.add_argument("--out", required=True, help="manifest path")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="run one experiment and write a metrics CSV")
    overrides(p, "training seed")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--threads", type=int, default=1, help="client worker cap")
    p.add_argument("--record-time", action="store_true",
                   help="fill the wall_ms column (output is then not reproducible)")
    p.add_argument("--params-out", help="write final parameters as .npy")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run the configured grid and write sweep CSVs")
    overrides(p, "base training seed")
    p.add_argument("--out", required=True, help="per-run sweep CSV path")
    p.add_argument("--best-out", help="best-cell table path (default: <out>.best.csv)")
    p.add_argument("--threads", type=int, default=1, help="cell worker cap")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="report population statistics for a manifest")
    p.add_argument("manifest")
    p.add_argument("--per-client", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("plotdata", help="reshape a sweep CSV into long-format plot data")
    p.add_argument("sweep", help="sweep CSV written by `sweep`")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"fedskew: {err}", file=sys.stderr)
        return 2
    except (PartitionError, DatasetError, OSError) as err:
        print(f"fedskew: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
