"""Experiment configuration: JSON parsing with strict unknown-key rejection,
defaults, validation, and the hashes used for resume and manifests."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .attacks import METHODS
from .models import STOCK_ARCHITECTURES

__all__ = [
    "ConfigError",
    "DatasetConfig",
    "ModelConfig",
    "ExperimentConfig",
    "default_config",
    "parse_config",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
    "model_key",
]


class ConfigError(ValueError):
    """Invalid or unknown configuration; the message names the key path."""


@dataclass
class DatasetConfig:
    kind: str = "synth"  # "synth" or "directory"
    path: str | None = None
    num_classes: int = 10
    per_class: int = 80
    image_size: int = 32
    train_fraction: float = 0.8
    seed: int | None = None  # None: derived from the global seed


@dataclass
class ModelConfig:
    arch: str
    name: str | None = None  # None: arch name
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 15
    batch_size: int = 32
    seed: int | None = None  # None: derived from the global seed


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    models: list[ModelConfig] = field(default_factory=list)
    methods: list[str] = field(default_factory=lambda: ["bim", "illc"])
    eps_set: list[float] = field(default_factory=lambda: [4.0, 8.0, 16.0, 32.0, 64.0, 128.0])
    alpha: float = 1.0
    jpeg_quality: int = 90
    jpeg_quality_sweep: list[int] = field(default_factory=lambda: [95, 75, 50])
    k_set: list[int] = field(default_factory=lambda: [1, 5, 10, 25, 50])
    eval_count: int = 100
    output_dir: str = "runs/default"
    seed: int = 2024
    workers: int = 1  # >1 rarely helps: BLAS already uses all cores
    attack_chunk: int = 25
    grid_samples: int = 3


def default_config() -> ExperimentConfig:
    cfg = ExperimentConfig(
        models=[ModelConfig(arch="cnn_a"), ModelConfig(arch="cnn_b"), ModelConfig(arch="cnn_c")]
    )
    return _resolve(cfg)


def _resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill derived defaults (names, seeds) and validate."""
    if cfg.dataset.seed is None:
        cfg.dataset.seed = cfg.seed
    for i, m in enumerate(cfg.models):
        if m.name is None:
            m.name = m.arch
        if m.seed is None:
            m.seed = cfg.seed + 101 * (i + 1)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    ds = cfg.dataset
    if ds.kind not in ("synth", "directory"):
        raise ConfigError(f"dataset.kind: unknown kind {ds.kind!r}")
    if ds.kind == "directory" and not ds.path:
        raise ConfigError("dataset.path: required when dataset.kind is 'directory'")
    if ds.kind == "synth" and ds.num_classes < 2:
        raise ConfigError(f"dataset.num_classes: need >= 2, got {ds.num_classes}")
    if not 0.0 < ds.train_fraction < 1.0:
        raise ConfigError(f"dataset.train_fraction: {ds.train_fraction} not in (0, 1)")
    if not cfg.models:
        raise ConfigError("models: need at least one model")
    names = [m.name for m in cfg.models]
    if len(set(names)) != len(names):
        raise ConfigError(f"models: duplicate names {names}")
    for i, m in enumerate(cfg.models):
        if m.arch not in STOCK_ARCHITECTURES:
            raise ConfigError(
                f"models[{i}].arch: unknown architecture {m.arch!r}; "
                f"known: {', '.join(STOCK_ARCHITECTURES)}"
            )
        if m.epochs < 0 or m.batch_size < 1 or m.lr < 0:
            raise ConfigError(f"models[{i}]: invalid hyperparameters")
    if not cfg.methods:
        raise ConfigError("methods: need at least one method")
    for meth in cfg.methods:
        if meth not in METHODS:
            raise ConfigError(f"methods: unknown method {meth!r}")
    if not cfg.eps_set:
        raise ConfigError("eps_set: must be nonempty")
    for e in cfg.eps_set:
        if e <= 0:
            raise ConfigError(f"eps_set: epsilon must be positive, got {e}")
    if cfg.alpha < 0:
        raise ConfigError(f"alpha: must be non-negative, got {cfg.alpha}")
    for q in [cfg.jpeg_quality, *cfg.jpeg_quality_sweep]:
        if not 1 <= q <= 100:
            raise ConfigError(f"jpeg quality {q} not in [1, 100]")
    if not cfg.k_set or any(k < 1 for k in cfg.k_set):
        raise ConfigError(f"k_set: invalid {cfg.k_set}")
    if cfg.eval_count < 1:
        raise ConfigError(f"eval_count: need >= 1, got {cfg.eval_count}")
    if cfg.workers < 1 or cfg.attack_chunk < 1 or cfg.grid_samples < 1:
        raise ConfigError("workers, attack_chunk, grid_samples must be >= 1")
    probe = Path(cfg.output_dir).resolve()
    while not probe.exists():
        probe = probe.parent
    if not os.access(probe, os.W_OK):
        raise ConfigError(f"output_dir: {cfg.output_dir} is not writable")


def _build(cls, data: dict, path: str):
    fields = {f: t for f, t in cls.__dataclass_fields__.items()}
    unknown = set(data) - set(fields)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown key {path}{key!r}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    data = dict(data)
    ds_data = data.pop("dataset", {})
    if not isinstance(ds_data, dict):
        raise ConfigError("dataset: must be an object")
    models_data = data.pop("models", None)
    dataset = _build(DatasetConfig, ds_data, "dataset.")
    if models_data is None:
        models = [ModelConfig(arch=a) for a in STOCK_ARCHITECTURES]
    else:
        if not isinstance(models_data, list):
            raise ConfigError("models: must be a list")
        models = []
        for i, m in enumerate(models_data):
            if not isinstance(m, dict):
                raise ConfigError(f"models[{i}]: must be an object")
            if "arch" not in m:
                raise ConfigError(f"models[{i}].arch: required")
            models.append(_build(ModelConfig, m, f"models[{i}]."))
    cfg = _build(ExperimentConfig, data, "")
    cfg.dataset = dataset
    cfg.models = models
    return _resolve(cfg)


def parse_config(path) -> ExperimentConfig:
    """Load and validate a JSON config file; unknown keys are rejected."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def _canonical(cfg_part) -> str:
    return json.dumps(cfg_part, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(_canonical(config_to_dict(cfg)).encode()).hexdigest()


def model_key(dataset: DatasetConfig, model: ModelConfig, num_classes: int) -> str:
    """Resume token: a trained checkpoint is reusable iff the dataset and
    the model's own training configuration are unchanged."""
    payload = {"dataset": asdict(dataset), "model": asdict(model), "num_classes": num_classes}
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()[:16]
