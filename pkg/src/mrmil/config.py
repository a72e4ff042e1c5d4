"""Flat ``key = value`` run configuration.

Every key has a typed default; a config file or ``--set`` override may only
name known keys.  The resolved config (all keys, defaults included) is
written back out as text, and reading that text reproduces the same config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import DEFAULT_ZOOM_RANGE, SyntheticSpec
from .model import ModelConfig
from .train import TrainConfig


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # dataset: a directory written by `gen`, or empty for in-memory synthetic data
    data: str = ""
    image_size: int = 64
    n_train: int = 500
    n_val: int = 200
    n_test: int = 200
    focal_radius_range: tuple[float, float] = (4.0, 8.0)
    diffuse_coverage_range: tuple[float, float] = (0.15, 0.35)
    noise_std: float = 0.05
    instance_count_range: tuple[int, int] = (1, 3)
    # model
    levels: int = 3
    base_channels: int = 8
    channels_per_level: tuple[int, ...] = ()
    dense_depth: int = 2
    growth_rate: int = 8
    fuse_channels: int = 16
    saliency_resolution: int = 16
    refine_mode: str = "dense"
    per_class_beta: bool = False
    # pooling
    pool_kind: str = "lse_lba"
    pool_r: float = 1.0
    r0: float = 5.0
    beta_init: float = 0.0
    # optimisation
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 8
    max_epochs: int = 50
    max_steps: int = 2000
    patience: int = 10
    augment: bool = False
    zoom_range: tuple[float, float] = DEFAULT_ZOOM_RANGE
    record_wall_time: bool = False
    # evaluation
    taus: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    alphas: tuple[float, ...] = (0.5,)
    iobb_rule: str = "pixels"
    # sweep
    r0_list: tuple[float, ...] = (0.0, 5.0, 10.0)
    seed: int = 0
    out: str = ""

    # ---- derived configs -------------------------------------------------

    def seeds(self) -> dict[str, int]:
        """Independent sub-seeds for each consumer of randomness."""
        children = np.random.SeedSequence(self.seed).spawn(5)
        names = ("train_data", "val_data", "test_data", "model", "optimizer")
        return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}

    def synthetic_spec(self, split: str) -> SyntheticSpec:
        return SyntheticSpec(image_size=self.image_size, focal_radius_range=self.focal_radius_range,
                             diffuse_coverage_range=self.diffuse_coverage_range, noise_std=self.noise_std,
                             instance_count_range=self.instance_count_range,
                             seed=self.seeds()[f"{split}_data"])

    def model_config(self, num_classes: int = 2) -> ModelConfig:
        return ModelConfig(input_size=self.image_size, levels=self.levels, base_channels=self.base_channels,
                           channels_per_level=self.channels_per_level, dense_depth=self.dense_depth,
                           growth_rate=self.growth_rate, fuse_channels=self.fuse_channels,
                           num_classes=num_classes, saliency_resolution=self.saliency_resolution,
                           r0=self.r0, beta_init=self.beta_init, per_class_beta=self.per_class_beta,
                           pool_kind=self.pool_kind, pool_r=self.pool_r, refine_mode=self.refine_mode,
                           seed=self.seeds()["model"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, max_steps=self.max_steps, patience=self.patience,
                           augment=self.augment, zoom_range=self.zoom_range, seed=self.seeds()["optimizer"],
                           record_wall_time=self.record_wall_time)

    def validate(self) -> None:
        for name in ("n_train", "n_val", "n_test", "batch_size", "max_epochs", "max_steps", "patience"):
            if getattr(self, name) < 1:
                raise RunConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0 or self.weight_decay < 0:
            raise RunConfigError("lr and weight_decay must be non-negative")
        if not self.r0_list:
            raise RunConfigError("r0_list must not be empty")
        if any(r < 0 for r in self.r0_list):
            raise RunConfigError(f"r0 values must be >= 0, got {self.r0_list}")
        for t in tuple(self.taus) + tuple(self.alphas):
            if not 0 < t < 1:
                raise RunConfigError(f"tau/alpha values must lie in (0, 1), got {t}")
        if self.iobb_rule not in ("pixels", "components"):
            raise RunConfigError(f"iobb_rule must be 'pixels' or 'components', got {self.iobb_rule!r}")
        if self.data and not Path(self.data).is_dir():
            raise RunConfigError(f"data directory not found: {self.data}")
        try:
            self.synthetic_spec("train")
            self.model_config()
        except ValueError as exc:
            raise RunConfigError(str(exc)) from exc

    # ---- text form -------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def with_updates(self, updates: dict[str, str]) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        values = {}
        for key, raw in updates.items():
            if key not in known:
                raise RunConfigError(f"unknown config key {key!r}")
            values[key] = _parse(raw, getattr(self, key), key)
        return dataclasses.replace(self, **values)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            items = [s.strip() for s in raw.split(",")]
            elem = type(default[0]) if default else int
            return tuple(elem(float(s)) if elem is int and float(s).is_integer() else elem(s) for s in items)
        return raw
    except ValueError:
        raise RunConfigError(f"bad value for {key}: {raw!r}") from None


def parse_assignments(lines: Iterable[str], source: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise RunConfigError(f"{source} line {n}: expected key = value, got {line.strip()!r}")
        key, value = text.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise RunConfigError(f"config file not found: {path}")
        cfg = cfg.with_updates(parse_assignments(path.read_text().splitlines(), str(path)))
    cfg = cfg.with_updates(parse_assignments(overrides, "--set"))
    return cfg


__all__ = ["RunConfig", "RunConfigError", "load_config", "parse_assignments"]
