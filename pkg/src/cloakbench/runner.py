"""End-to-end experiment driver: dataset -> train -> attack -> evaluate ->
report, with checkpoint resume, per-stage timings, and a checksummed
artifact manifest. Deterministic: the same config produces byte-identical
matrix CSVs at any worker count.
"""

from __future__ import annotations

import json
import hashlib
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_hash, config_to_dict, model_key
from .evaluation import TransferMatrix, craft_records, transfer_matrix
from .models import (
    Classifier,
    TrainConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
    stock_descriptor,
    train,
    CheckpointError,
)
from .pipeline import Dataset, ingest_directory, resize, split, synth_dataset
from .reports import (
    emit_curves,
    emit_delta_table,
    emit_image_grid,
    emit_storage_per_image,
    emit_storage_summary,
    emit_table,
)

__all__ = ["RunManifest", "StageError", "run_experiment", "verify_manifest"]

STAGES = ("dataset", "train", "attack", "evaluate", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    tool_version: str
    stages: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)  # relpath -> sha256
    total_seconds: float = 0.0
    # runtime-only handles, not serialized
    models: list[Classifier] = field(default_factory=list, repr=False)
    matrices: dict[int, TransferMatrix] = field(default_factory=dict, repr=False)
    dataset: Dataset | None = field(default=None, repr=False)
    records: dict = field(default_factory=dict, repr=False)
    eval_slice: tuple | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "stages": self.stages,
            "artifacts": self.artifacts,
            "total_seconds": self.total_seconds,
        }


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _register(manifest: RunManifest, out_dir: Path, path: Path) -> None:
    manifest.artifacts[str(path.relative_to(out_dir))] = _sha256(path)


def verify_manifest(path) -> list[str]:
    """Check every artifact listed in a manifest; returns mismatch messages
    (empty means all artifacts exist with matching checksums)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    problems = []
    for rel, digest in data.get("artifacts", {}).items():
        target = path.parent / rel
        if not target.is_file():
            problems.append(f"missing artifact: {rel}")
        elif _sha256(target) != digest:
            problems.append(f"checksum mismatch: {rel}")
    return problems


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    if ds.kind == "synth":
        base = synth_dataset(ds.num_classes, ds.per_class, ds.image_size, ds.seed)
    else:
        base = ingest_directory(ds.path)
    return split(base, ds.train_fraction, ds.seed + 1)


def _resized_dataset(dataset: Dataset, side: int) -> Dataset:
    if dataset.image_size == side:
        return dataset
    images = np.stack([resize(im, side) for im in dataset.images])
    return Dataset(dataset.identities, images, dataset.labels, dataset.split,
                   dict(dataset.provenance))


def _train_models(cfg: ExperimentConfig, dataset: Dataset, out_dir: Path,
                  manifest: RunManifest) -> list[Classifier]:
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    models: list[Classifier] = []
    trained, reused = [], []
    for mc in cfg.models:
        desc = replace(stock_descriptor(mc.arch, dataset.num_classes), name=mc.name)
        key = model_key(cfg.dataset, mc, dataset.num_classes)
        ckpt_path = ckpt_dir / f"{mc.name}.ckpt"
        model = None
        if ckpt_path.exists():
            try:
                candidate = load_checkpoint(ckpt_path)
                if candidate.provenance.get("config_key") == key:
                    model = candidate
                    reused.append(mc.name)
            except CheckpointError as exc:
                warnings.warn(f"ignoring unreadable checkpoint {ckpt_path}: {exc}")
        if model is None:
            model = build_model(desc, mc.seed)
            stats = train(
                model,
                _resized_dataset(dataset, desc.input_size),
                TrainConfig(lr=mc.lr, momentum=mc.momentum, epochs=mc.epochs,
                            batch_size=mc.batch_size, seed=mc.seed),
            )
            model.provenance["config_key"] = key
            model.freeze()
            save_checkpoint(model, ckpt_path)
            metrics_path = ckpt_dir / f"{mc.name}.metrics.json"
            with open(metrics_path, "w", encoding="utf-8") as f:
                json.dump(
                    [vars(s) for s in stats], f, indent=2, sort_keys=True
                )
            _register(manifest, out_dir, metrics_path)
            trained.append(mc.name)
        _register(manifest, out_dir, ckpt_path)
        models.append(model)
    manifest.stages["train"].update({"trained": trained, "reused": reused})
    for m in models:
        acc = m.provenance.get("final_val_accuracy")
        if acc is not None and acc < 0.90:
            warnings.warn(f"{m.name}: validation accuracy {acc:.3f} below 0.90")
    return models


def _eval_slice(cfg: ExperimentConfig, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    idx = dataset.eval_indices()
    if len(idx) == 0:
        raise ValueError("dataset has no eval split")
    if len(idx) <= cfg.eval_count:
        chosen = idx
        if len(idx) < cfg.eval_count:
            warnings.warn(
                f"eval split has {len(idx)} images, fewer than eval_count={cfg.eval_count}"
            )
    else:
        rng = np.random.default_rng(cfg.seed)
        pick = rng.choice(len(idx), size=cfg.eval_count, replace=False)
        chosen = idx[np.sort(pick)]
    return dataset.images[chosen], dataset.labels[chosen]


def run_experiment(cfg: ExperimentConfig, upto: str = "report") -> RunManifest:
    """Run pipeline stages through `upto` and write the manifest. Existing
    checkpoints whose config key matches are reused, so reruns only retrain
    models whose checkpoint is missing or stale."""
    if upto not in STAGES:
        raise ValueError(f"unknown stage {upto!r}")
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config=config_to_dict(cfg),
        config_hash=config_hash(cfg),
        tool_version=__version__,
    )
    started = time.perf_counter()
    last = STAGES.index(upto)
    stage = None
    try:
        for stage in STAGES[: last + 1]:
            t0 = time.perf_counter()
            manifest.stages[stage] = {"status": "ok"}
            if stage == "dataset":
                dataset = _load_dataset(cfg)
                manifest.dataset = dataset
                manifest.stages[stage]["id"] = dataset.provenance.get("id")
            elif stage == "train":
                models = _train_models(cfg, dataset, out_dir, manifest)
                manifest.models = models
            elif stage == "attack":
                eval_images, eval_labels = _eval_slice(cfg, dataset)
                records = craft_records(
                    models, cfg.methods, cfg.eps_set, eval_images, eval_labels,
                    alpha=cfg.alpha, parallelism=cfg.workers, chunk_size=cfg.attack_chunk,
                )
                manifest.records = records
                manifest.eval_slice = (eval_images, eval_labels)
                n_errors = sum(
                    1 for group in records.values() for r in group if r.error
                )
                manifest.stages[stage]["record_errors"] = n_errors
                grids_dir = out_dir / "grids"
                for mc in cfg.models:
                    for method in cfg.methods:
                        by_eps = {
                            float(e): records[(mc.name, method, float(e))]
                            for e in cfg.eps_set
                        }
                        path = emit_image_grid(
                            by_eps, grids_dir / f"grid_{mc.name}_{method}.png",
                            samples=cfg.grid_samples,
                        )
                        _register(manifest, out_dir, path)
            elif stage == "evaluate":
                for q in [cfg.jpeg_quality] + sorted(
                    set(cfg.jpeg_quality_sweep) - {cfg.jpeg_quality}
                ):
                    manifest.matrices[q] = transfer_matrix(
                        models, cfg.methods, cfg.eps_set, eval_images, eval_labels,
                        jpeg_quality=q, k_set=cfg.k_set, alpha=cfg.alpha,
                        records=records,
                        metadata={"dataset_id": dataset.provenance.get("id"),
                                  "global_seed": cfg.seed},
                    )
                path = emit_table(manifest.matrices[cfg.jpeg_quality], out_dir / "table.csv")
                _register(manifest, out_dir, path)
            elif stage == "report":
                main = manifest.matrices[cfg.jpeg_quality]
                _register(manifest, out_dir, emit_table(main, out_dir / "table.md", "markdown"))
                for p in emit_curves(main, out_dir / "curves"):
                    _register(manifest, out_dir, p)
                delta = emit_delta_table(main, out_dir / "bim_minus_illc.csv")
                if delta is not None:
                    _register(manifest, out_dir, delta)
                _register(
                    manifest, out_dir,
                    emit_storage_summary(manifest.matrices, out_dir / "storage_summary.csv"),
                )
                _register(
                    manifest, out_dir,
                    emit_storage_per_image(manifest.matrices, out_dir / "storage_per_image.csv"),
                )
            manifest.stages[stage]["seconds"] = round(time.perf_counter() - t0, 3)
    except Exception as exc:
        manifest.stages.setdefault(stage or "dataset", {})["status"] = f"error: {exc}"
        manifest.total_seconds = round(time.perf_counter() - started, 3)
        _write_manifest(manifest, out_dir)
        raise StageError(stage or "dataset", str(exc)) from exc
    manifest.total_seconds = round(time.perf_counter() - started, 3)
    _write_manifest(manifest, out_dir)
    return manifest


def _write_manifest(manifest: RunManifest, out_dir: Path) -> None:
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest.to_json_dict(), f, indent=2, sort_keys=True)
