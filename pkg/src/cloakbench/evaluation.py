"""Protection Success Rate and the source x method x budget x target
transferability matrix.

PSR at top-k is 100 minus the percentage of de-identified images whose true
label still appears among the target model's k highest-probability classes.
Percentages are computed with exact rational arithmetic before the final
float conversion.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .attacks import AdvRecord, AttackConfig, attack_batch
from .models import Classifier, top_k
from .pipeline import (
    DetectGate,
    Detector,
    JpegRoundtrip,
    QuantizeU8,
    ResizeTo,
    TransformStep,
    apply_chain,
    resize,
)

__all__ = [
    "EvalCell",
    "TransferMatrix",
    "psr",
    "evaluate_cell",
    "psr_oracle",
    "storage_chain",
    "craft_records",
    "transfer_matrix",
]


@dataclass
class EvalCell:
    source: str
    method: str
    epsilon: float
    target: str
    psr: dict[int, float]  # k -> PSR percentage
    sample_count: int
    detect_fail_count: int
    storage_max_delta: float
    storage_deltas: list[float] = field(default_factory=list)  # per surviving image
    error: str | None = None

    @property
    def key(self) -> tuple[str, str, float, str]:
        return (self.source, self.method, self.epsilon, self.target)


@dataclass
class TransferMatrix:
    cells: list[EvalCell]
    metadata: dict

    def cell(self, source: str, method: str, epsilon: float, target: str) -> EvalCell:
        for c in self.cells:
            if c.key == (source, method, float(epsilon), target):
                return c
        raise KeyError(f"no cell ({source}, {method}, {epsilon}, {target})")


def psr(topk_lists, true_labels, k: int) -> float:
    """100 - 100 * (#{i : y_true_i in topk_i[:k]} / N), exact rational
    arithmetic before the float conversion."""
    if len(topk_lists) != len(true_labels):
        raise ValueError(
            f"psr: {len(topk_lists)} prediction lists vs {len(true_labels)} labels"
        )
    n = len(true_labels)
    if n == 0:
        raise ValueError("psr: empty input (denominator would be zero)")
    if k < 1:
        raise ValueError(f"psr: invalid k={k}")
    hits = sum(1 for top, y in zip(topk_lists, true_labels) if int(y) in top[:k])
    return float(Fraction(100 * (n - hits), n))


def _validate_k_set(k_set, num_classes: int) -> list[int]:
    ks = sorted(set(int(k) for k in k_set))
    if not ks:
        raise ValueError("empty k set")
    for k in ks:
        if not 1 <= k <= num_classes:
            raise ValueError(f"k={k} out of range for {num_classes} classes")
    return ks


def evaluate_cell(
    adv_records: list[AdvRecord],
    target_model: Classifier,
    transform_chain: tuple[TransformStep, ...] | list[TransformStep],
    k_set,
) -> EvalCell:
    """Transform, gate, and classify the records of one (source, method,
    eps) group against one target model. Gate failures leave the PSR
    denominator and are counted separately."""
    records = [r for r in adv_records if r.error is None]
    if not records:
        raise ValueError("evaluate_cell: no valid records")
    src, method, eps = records[0].source_model, records[0].method, records[0].epsilon
    if any((r.source_model, r.method, r.epsilon) != (src, method, eps) for r in records):
        raise ValueError("evaluate_cell: records mix sources, methods, or budgets")
    ks = _validate_k_set(k_set, target_model.num_classes)
    topk_lists: list[list[int]] = []
    labels: list[int] = []
    deltas: list[float] = []
    fails = 0
    for rec in records:
        result = apply_chain(rec.x_adv, transform_chain)
        if not result.passed:
            fails += 1
            continue
        probs = target_model.predict(result.image)
        topk_lists.append(top_k(probs, max(ks)))
        labels.append(rec.y_true)
        deltas.append(result.storage_delta)
    if not topk_lists:
        raise ValueError(
            f"evaluate_cell: no detectable samples ({fails} gate failures)"
        )
    return EvalCell(
        source=src,
        method=method,
        epsilon=eps,
        target=target_model.name,
        psr={k: psr(topk_lists, labels, k) for k in ks},
        sample_count=len(topk_lists),
        detect_fail_count=fails,
        storage_max_delta=max(deltas) if deltas else 0.0,
        storage_deltas=deltas,
    )


def psr_oracle(
    adv_records: list[AdvRecord],
    target_model: Classifier,
    transform_chain: tuple[TransformStep, ...] | list[TransformStep],
    k_set,
) -> dict[int, float]:
    """Brute-force reference for evaluate_cell: re-runs predictions one by
    one and counts top-k membership by comparing the true label's rank
    against every other class, without the top_k fast path."""
    ks = _validate_k_set(k_set, target_model.num_classes)
    n_hits = {k: 0 for k in ks}
    survivors = 0
    for rec in adv_records:
        if rec.error is not None:
            continue
        result = apply_chain(rec.x_adv, transform_chain)
        if not result.passed:
            continue
        survivors += 1
        probs = target_model.predict(result.image)
        y = rec.y_true
        rank = 0
        for j in range(len(probs)):
            if j == y:
                continue
            if probs[j] > probs[y] or (probs[j] == probs[y] and j < y):
                rank += 1
        for k in ks:
            if rank < k:
                n_hits[k] += 1
    if survivors == 0:
        raise ValueError("psr_oracle: no detectable samples")
    return {k: float(Fraction(100 * (survivors - n_hits[k]), survivors)) for k in ks}


def storage_chain(
    jpeg_quality: int,
    source_size: int,
    target_size: int,
    detector: Detector | None = None,
) -> tuple[TransformStep, ...]:
    """The fixed cross-model chain: quantize, JPEG store, resize only when
    the source and target input sizes differ, then the detection gate."""
    steps: list[TransformStep] = [QuantizeU8(), JpegRoundtrip(jpeg_quality)]
    if source_size != target_size:
        steps.append(ResizeTo(target_size))
    steps.append(DetectGate(detector))
    return tuple(steps)


def craft_records(
    models: list[Classifier],
    methods: list[str],
    eps_set: list[float],
    images: np.ndarray,
    labels: np.ndarray,
    *,
    alpha: float = 1.0,
    parallelism: int = 1,
    chunk_size: int = 25,
) -> dict[tuple[str, str, float], list[AdvRecord]]:
    """Craft every (source, method, eps) group once. Images are given at
    their common base size; each source model sees them resized to its own
    input size before the attack runs in that domain."""
    out: dict[tuple[str, str, float], list[AdvRecord]] = {}
    for model in models:
        if images.shape[1] == model.input_size:
            imgs = images
        else:
            imgs = np.stack([resize(im, model.input_size) for im in images])
        for method in methods:
            for eps in eps_set:
                config = AttackConfig(method=method, epsilon=float(eps), alpha=alpha)
                out[(model.name, method, float(eps))] = attack_batch(
                    model, imgs, labels, config, parallelism, chunk_size
                )
    return out


def transfer_matrix(
    models: list[Classifier],
    methods: list[str],
    eps_set: list[float],
    images: np.ndarray,
    labels: np.ndarray,
    *,
    jpeg_quality: int = 90,
    k_set=(1, 5, 10, 25, 50),
    alpha: float = 1.0,
    detector: Detector | None = None,
    parallelism: int = 1,
    chunk_size: int = 25,
    records: dict[tuple[str, str, float], list[AdvRecord]] | None = None,
    metadata: dict | None = None,
) -> TransferMatrix:
    """Full cross product: craft on each source once per (method, eps), then
    evaluate against every target through the storage chain. Per-cell errors
    are recorded in place; the matrix is still emitted."""
    if not models:
        raise ValueError("transfer_matrix: need at least one model")
    if len(images) == 0:
        raise ValueError("transfer_matrix: empty evaluation slice")
    num_classes = models[0].num_classes
    kept = [int(k) for k in k_set if 1 <= int(k) <= num_classes]
    dropped = sorted(set(int(k) for k in k_set) - set(kept))
    if dropped:
        warnings.warn(f"k values {dropped} exceed N={num_classes}; dropped")
    if not kept:
        raise ValueError(f"transfer_matrix: no usable k values for N={num_classes}")
    if records is None:
        records = craft_records(
            models, methods, eps_set, images, labels,
            alpha=alpha, parallelism=parallelism, chunk_size=chunk_size,
        )
    cells: list[EvalCell] = []
    for source in models:
        for method in methods:
            for eps in eps_set:
                group = records[(source.name, method, float(eps))]
                for target in models:
                    chain = storage_chain(
                        jpeg_quality, source.input_size, target.input_size, detector
                    )
                    try:
                        cells.append(evaluate_cell(group, target, chain, kept))
                    except Exception as exc:
                        cells.append(
                            EvalCell(
                                source=source.name,
                                method=method,
                                epsilon=float(eps),
                                target=target.name,
                                psr={},
                                sample_count=0,
                                detect_fail_count=len(group),
                                storage_max_delta=0.0,
                                error=str(exc),
                            )
                        )
    meta = {
        "models": {m.name: {"input_size": m.input_size} for m in models},
        "num_classes": num_classes,
        "eval_count": int(len(images)),
        "methods": list(methods),
        "eps_set": [float(e) for e in eps_set],
        "k_set": kept,
        "jpeg_quality": int(jpeg_quality),
        "alpha": float(alpha),
    }
    meta.update(metadata or {})
    return TransferMatrix(cells=cells, metadata=meta)
