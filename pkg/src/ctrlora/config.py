"""Declarative run configuration loaded from YAML.

A run file has four top-level keys besides ``seed`` and ``out_dir``::

    seed: 0
    out_dir: runs/example
    arch:   {kind: mlp, dims: [32, 32, 32, 8], activation: relu, task: regression}
    task:   {ranks: {1: 2}, scales: {1: 4.0}, noise: 0.05, n_samples: 1000, eval_fraction: 0.2}
    train:  {budget_fraction: 0.003, steps: 300, peak_lr: 0.003}

The single ``seed`` drives network init, data generation, splitting and training.
Unknown keys are rejected and physically impossible settings (planted rank larger
than the layer, calibration set larger than the train split) fail before any compute.
Environment variables are never consulted.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .model import ArchSpec, ShapeError
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class TaskConfig:
    """Planted-task generator settings plus the evaluation split."""

    ranks: dict[int, int] = field(default_factory=lambda: {1: 2})
    scales: dict[int, float] = field(default_factory=lambda: {1: 4.0})
    decay: float = 1.0
    noise: float = 0.05
    n_samples: int = 1000
    input_scale: float = 1.0
    eval_fraction: float = 0.2


@dataclass
class RunConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed), train=dataclasses.replace(self.train, seed=int(seed)))

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        train.pop("seed")
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "arch": self.arch.to_dict(),
            "task": dataclasses.asdict(self.task),
            "train": train,
        }

    def validate(self) -> None:
        validate(self)


_SECTIONS = {"arch": ArchSpec, "task": TaskConfig, "train": TrainConfig}
_TOP_LEVEL = {"seed", "out_dir", *_SECTIONS}


def _section(name: str, cls, raw: Any, skip: tuple[str, ...] = ()):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section '{name}' must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(map(str, unknown))}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad value in '{name}': {exc}") from exc


def from_mapping(raw: Mapping | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(map(str, unknown))}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    task = _section("task", TaskConfig, raw.get("task"))
    try:
        task.ranks = {int(k): int(v) for k, v in (task.ranks or {}).items()}
        task.scales = {int(k): float(v) for k, v in (task.scales or {}).items()}
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"task ranks/scales must map layer ids to numbers: {exc}") from exc
    train = _section("train", TrainConfig, raw.get("train"), skip=("seed",))
    train.seed = seed
    cfg = RunConfig(
        arch=_section("arch", ArchSpec, raw.get("arch")),
        task=task,
        train=train,
        seed=seed,
        out_dir=str(raw.get("out_dir", "runs/default")),
    )
    validate(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return from_mapping(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def validate(cfg: RunConfig) -> None:
    """Reject impossible settings before any compute happens."""
    try:
        cfg.arch.validate()
    except ShapeError as exc:
        raise ConfigError(f"arch: {exc}") from exc
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    t = cfg.task
    if t.n_samples < 1:
        raise ConfigError("task: n_samples must be positive")
    if not 0.0 <= t.eval_fraction < 1.0:
        raise ConfigError("task: eval_fraction must lie in [0, 1)")
    if t.noise < 0 or t.input_scale <= 0 or t.decay < 0:
        raise ConfigError("task: noise and decay must be >= 0 and input_scale > 0")
    shapes = _layer_shapes(cfg.arch)
    for layer_id, r in t.ranks.items():
        if layer_id not in shapes:
            raise ConfigError(f"task: layer {layer_id} is not adapter-eligible (eligible: {sorted(shapes)})")
        d_out, d_in = shapes[layer_id]
        if r < 0 or r > min(d_out, d_in):
            raise ConfigError(f"task: planted rank {r} exceeds dims {d_out}x{d_in} of layer {layer_id}")
    for layer_id, s in t.scales.items():
        if s < 0:
            raise ConfigError(f"task: scale of layer {layer_id} is negative")
        if layer_id not in t.ranks:
            raise ConfigError(f"task: scale given for layer {layer_id} without a rank")
    n_train = t.n_samples - int(round(t.eval_fraction * t.n_samples))
    if cfg.train.calibration_size > n_train:
        raise ConfigError(
            f"train: calibration_size {cfg.train.calibration_size} exceeds train split size {n_train}"
        )
    if cfg.train.batch_size > n_train:
        raise ConfigError(f"train: batch_size {cfg.train.batch_size} exceeds train split size {n_train}")


def _layer_shapes(arch: ArchSpec) -> dict[int, tuple[int, int]]:
    """Adapter-eligible ``(d_out, d_in)`` per layer id, without building weights."""
    if arch.kind == "mlp":
        return {i: (arch.dims[i + 1], arch.dims[i]) for i in range(len(arch.dims) - 1)}
    d, f = arch.d_model, arch.ff_dim
    return {0: (d, d), 1: (d, d), 2: (d, d), 3: (d, d), 4: (f, d), 5: (d, f)}


def reference_markdown() -> str:
    """Every configurable key with its default, generated from the dataclasses."""
    lines = [
        "# Run configuration reference",
        "",
        "Generated from the config dataclasses; regenerate with `ctrlora config-reference`.",
        "",
        "| section | key | default |",
        "|---|---|---|",
        "| (top) | seed | 0 |",
        "| (top) | out_dir | runs/default |",
    ]
    for name, cls in _SECTIONS.items():
        inst = cls()
        for f in dataclasses.fields(cls):
            if name == "train" and f.name == "seed":
                continue
            lines.append(f"| {name} | {f.name} | {getattr(inst, f.name)!r} |")
    return "\n".join(lines) + "\n"
