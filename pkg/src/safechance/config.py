"""Run configuration: a fixed JSON schema with a stable content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .calibration import KINDS
from .nn import TrainConfig

SPLITS = ("train", "calibration", "validation", "test")
PIPELINES = ("mono", "composite", "composite_image")


class ConfigError(ValueError):
    pass


@dataclass
class ComponentConfig:
    hidden: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 30
    plateau_window: int = 10
    plateau_eps: float = 1e-4
    lr_decay: float = 0.1
    max_samples: int = 0  # 0: use every training sample

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, self.max_epochs, self.plateau_window,
                           self.plateau_eps, self.lr_decay, seed)


@dataclass
class RunConfig:
    seed: int = 0
    physics: dict = field(default_factory=lambda: {
        "gravity": 9.8, "mass_cart": 1.0, "mass_pole": 0.1, "length": 0.5, "force_max": 10.0, "dt": 0.02})
    controller: dict = field(default_factory=lambda: {
        "gains": [0.05, 0.2, 1.0, 0.3], "gain_scale": 1.0, "noise_std": 0.02})
    trajectories: dict = field(default_factory=lambda: {s: 600 for s in SPLITS})
    max_steps: int = 199
    windows: list = field(default_factory=lambda: [8])
    horizons: list = field(default_factory=lambda: [5, 10, 20, 30])
    forecast_window: int = 1
    latent_dim: int = 16
    lambda1: float = 1.0
    monolithic_input: str = "latent"  # latent | pixels
    vae: ComponentConfig = field(default_factory=lambda: ComponentConfig(
        hidden=128, batch_size=64, max_epochs=20, max_samples=20000))
    forecaster: ComponentConfig = field(default_factory=lambda: ComponentConfig(hidden=64, batch_size=64))
    monolithic: ComponentConfig = field(default_factory=lambda: ComponentConfig(hidden=64))
    evaluator: ComponentConfig = field(default_factory=lambda: ComponentConfig(
        hidden=32, max_epochs=20, max_samples=20000))
    memo: dict = field(default_factory=lambda: {
        "B": 8, "eta": 1.0, "samples": 900, "minority": 0.3, "contrast": 0.6, "brightness": 0.0})
    calibration: dict = field(default_factory=lambda: {"Q": 10, "kinds": list(KINDS), "inner_split": 0.5})
    conformal: dict = field(default_factory=lambda: {"Q": 10, "M": 200, "N": 100, "alpha": 0.05, "trials": 1000})
    out: str = "runs/default"

    def validate(self) -> RunConfig:
        if any(self.trajectories.get(s, 0) < 1 for s in SPLITS):
            raise ConfigError(f"trajectories needs a positive count for each of {SPLITS}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if not self.windows or any(m < 1 for m in self.windows):
            raise ConfigError("windows must be a non-empty list of positive ints")
        if not self.horizons or any(k < 1 for k in self.horizons):
            raise ConfigError("horizons must be a non-empty list of positive ints")
        if self.forecast_window > min(self.horizons):
            raise ConfigError("forecast_window must not exceed the smallest horizon")
        if self.monolithic_input not in ("latent", "pixels"):
            raise ConfigError("monolithic_input must be 'latent' or 'pixels'")
        if not 0 < self.conformal["alpha"] < 0.5:
            raise ConfigError("conformal alpha must be in (0, 0.5)")
        if self.memo["B"] < 2 or self.memo["eta"] < 0:
            raise ConfigError("memo needs B >= 2 and eta >= 0")
        unknown = set(self.calibration["kinds"]) - set(KINDS)
        if unknown:
            raise ConfigError(f"unknown calibrator kinds {sorted(unknown)}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def split_seed_range(self, split: str) -> tuple[int, int]:
        """Half-open trajectory-seed range for a split; ranges never overlap."""
        base = self.seed * 10_000_000 + SPLITS.index(split) * 1_000_000
        return base, base + self.trajectories[split]


_COMPONENTS = ("vae", "forecaster", "monolithic", "evaluator")


def from_dict(d: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    base = RunConfig()
    kw = {}
    for key, value in d.items():
        if key in _COMPONENTS:
            try:
                kw[key] = dataclasses.replace(getattr(base, key), **value)
            except TypeError as exc:
                raise ConfigError(f"bad {key} section: {exc}") from exc
        elif isinstance(getattr(base, key), dict):
            merged = dict(getattr(base, key))
            merged.update(value)
            kw[key] = merged
        else:
            kw[key] = value
    try:
        return RunConfig(**kw).validate()
    except (TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(d)
