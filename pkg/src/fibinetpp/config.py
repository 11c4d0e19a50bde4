"""Run configuration shared by the ``train`` family of CLI commands.

A config file is a JSON object whose keys are the field names of
:class:`RunConfig`; anything omitted keeps its default and command-line flags
override file values. Example::

    {"arch": "fibinetpp", "d": 10, "mlp": [400, 400, 400], "m": 50,
     "g": 2, "r": 3, "lr": 0.001, "epochs": 20, "seed": 0,
     "data": "train.tsv", "out": "runs/model"}

``lr`` of ``null`` trains once per entry of ``lr_grid`` and keeps the best
run by validation AUC. ``num_numerical`` / ``num_categorical`` describe the
TSV layout; when omitted they come from a synthetic sidecar file if present,
else the Criteo layout (13 numerical, 26 categorical) is assumed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError
from .models import Arch, ModelHyper, validate
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    arch: str = Arch.FIBINETPP.value
    d: int = 10
    mlp: tuple = (400, 400, 400)
    m: int = 50
    g: int = 2
    r: float = 3
    field_type: str = "field_interaction"
    lr: float | None = None
    lr_grid: tuple = (1e-4, 1e-3)
    batch_size: int = 1024
    epochs: int = 20
    patience: int = 3
    seed: int = 0
    lazy_adam: bool = False
    wall_time: bool = True
    min_freq: int = 1
    num_numerical: int | None = None
    num_categorical: int | None = None
    max_bad_fraction: float = 0.001
    data: str | None = None
    val: str | None = None
    test: str | None = None
    out: str = "model"
    metrics: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "mlp", tuple(self.mlp))
        object.__setattr__(self, "lr_grid", tuple(self.lr_grid))

    @classmethod
    def from_dict(cls, data: dict, source: str = "config") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: expected a JSON object at the top level")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data, str(path))

    def override(self, **values) -> "RunConfig":
        """Copy with every non-``None`` value replaced."""
        return replace(self, **{k: v for k, v in values.items() if v is not None})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mlp"], out["lr_grid"] = list(self.mlp), list(self.lr_grid)
        return out

    def hyper(self) -> ModelHyper:
        return ModelHyper(d=self.d, mlp=self.mlp, m=self.m, g=self.g, r=self.r,
                          field_type=self.field_type)

    def learning_rates(self) -> tuple:
        return (self.lr,) if self.lr is not None else self.lr_grid

    def train_config(self, lr: float) -> TrainConfig:
        return TrainConfig(lr=lr, batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
                           patience=self.patience, lazy_adam=self.lazy_adam,
                           record_wall_time=self.wall_time)

    def validate(self) -> "RunConfig":
        """Check every constraint up front; returns ``self``."""
        try:
            arch = Arch(self.arch)
        except ValueError:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from "
                              f"{', '.join(a.value for a in Arch)}") from None
        for name in ("d", "m", "g", "batch_size", "epochs", "patience", "min_freq"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        for name in ("num_numerical", "num_categorical"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value < 0):
                raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")
        if not self.learning_rates():
            raise ConfigError("lr_grid is empty")
        for lr in self.learning_rates():
            if not isinstance(lr, (int, float)) or not math.isfinite(lr) or lr < 0:
                raise ConfigError(f"learning rate must be finite and >= 0, got {lr!r}")
        if not 0.0 <= self.max_bad_fraction <= 1.0:
            raise ConfigError(f"max_bad_fraction must lie in [0, 1], got {self.max_bad_fraction}")
        try:
            hyper = self.hyper()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model hyper-parameters: {exc}") from None
        validate(arch, hyper)
        self.train_config(self.learning_rates()[0]).validate()
        return self
