"""Experiment configuration: TOML sections validated with pydantic.

Unknown keys are rejected so a typo in a sweep file cannot silently fall back
to a default.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Client learning-rate grid: 1e-4, 3e-4, ..., 1e-1, 3e-1.
LR_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1)
BETA_GRID = (0.0, 0.7, 0.9, 0.97, 0.99, 0.997)
REPORTING_FRACTIONS = (0.05, 0.1, 0.2, 0.4)
LOCAL_EPOCHS = (1, 5)
# Centralized reference accuracy quoted for the full-scale CIFAR-10 CNN.
CENTRALIZED_CIFAR10_ACCURACY = 0.860


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, ser_json_inf_nan="constants")


class DataSection(_Section):
    kind: Literal["synthetic", "cifar10"] = "synthetic"
    cifar_dir: Optional[str] = None
    num_classes: int = Field(10, ge=2)
    input_dim: int = Field(32, ge=1)
    train_per_class: int = Field(400, ge=1)
    test_per_class: int = Field(200, ge=1)
    separation: float = Field(3.5, ge=0)
    noise: float = Field(1.0, ge=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _cifar_needs_dir(self):
        if self.kind == "cifar10" and not self.cifar_dir:
            raise ValueError("cifar_dir is required when kind = 'cifar10'")
        return self


class ModelSection(_Section):
    hidden_dim: int = Field(0, ge=0)
    weight_decay: float = Field(0.004, ge=0)


class PopulationSection(_Section):
    scheme: Literal["dirichlet", "sort"] = "dirichlet"
    alpha: float = Field(1.0, gt=0)
    clients: int = Field(20, ge=1)
    size: int = Field(200, ge=1)
    prior: Optional[list[float]] = None
    count_mode: Literal["round", "multinomial"] = "round"
    shards_per_client: int = Field(2, ge=1)
    manifest: Optional[str] = None

    @model_validator(mode="after")
    def _prior_on_simplex(self):
        if self.prior is not None:
            if any(p < 0 for p in self.prior) or abs(sum(self.prior) - 1.0) > 1e-9:
                raise ValueError("prior must be non-negative and sum to 1")
        return self


class ClientSection(_Section):
    batch_size: int = Field(64, ge=1)
    local_epochs: int = Field(1, ge=1)
    learning_rate: float = Field(0.01, ge=0)


class ServerSection(_Section):
    kind: Literal["plain", "momentum", "nesterov"] = "plain"
    beta: float = Field(0.0, ge=0, lt=1)
    server_lr: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _plain_has_no_momentum(self):
        if self.kind == "plain" and self.beta != 0:
            raise ValueError("kind = 'plain' requires beta = 0")
        return self


class RunSection(_Section):
    reporting_fraction: float = Field(0.1, gt=0, le=1)
    rounds: int = Field(100, ge=1)
    eval_every: int = Field(10, ge=1)
    population_seed: int = Field(0, ge=0)
    training_seed: int = Field(0, ge=0)
    final_stat: Literal["last", "smoothed"] = "last"

    @model_validator(mode="after")
    def _eval_divides_rounds(self):
        if self.rounds % self.eval_every:
            raise ValueError(
                f"eval_every ({self.eval_every}) must divide rounds ({self.rounds})"
            )
        return self


class SweepSection(_Section):
    alpha: list[float] = Field(default_factory=lambda: [1.0], min_length=1)
    reporting_fraction: list[float] = Field(default_factory=lambda: [0.1], min_length=1)
    local_epochs: list[int] = Field(default_factory=lambda: [1], min_length=1)
    learning_rate: list[float] = Field(default_factory=lambda: list(LR_GRID), min_length=1)
    beta: list[float] = Field(default_factory=lambda: [0.0], min_length=1)
    momentum_kind: Literal["momentum", "nesterov"] = "nesterov"
    repeats: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _axis_ranges(self):
        problems = []
        if any(not a > 0 for a in self.alpha):
            problems.append("alpha values must be > 0")
        if any(not 0 < c <= 1 for c in self.reporting_fraction):
            problems.append("reporting_fraction values must lie in (0, 1]")
        if any(e < 1 for e in self.local_epochs):
            problems.append("local_epochs values must be >= 1")
        if any(not lr >= 0 for lr in self.learning_rate):
            problems.append("learning_rate values must be >= 0")
        if any(not 0 <= b < 1 for b in self.beta):
            problems.append("beta values must lie in [0, 1)")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class ExperimentConfig(_Section):
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    population: PopulationSection = PopulationSection()
    client: ClientSection = ClientSection()
    server: ServerSection = ServerSection()
    run: RunSection = RunSection()
    sweep: SweepSection = SweepSection()

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with ``section={field: value}`` updates, re-validated."""
        doc = self.model_dump()
        for section, values in sections.items():
            doc[section].update(values)
        return parse_config(doc)

    def echo(self) -> str:
        """Fully resolved config as one line of JSON."""
        return json.dumps(self.model_dump(), sort_keys=True)


def _format_errors(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"]
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        out.append(f"{loc}: {msg}")
    return out


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError([f"{path}: {err}"]) from None
    return parse_config(doc)
