"""Sign-gradient de-identification attacks under an L-infinity pixel budget.

Three methods: a single-step attack (fgsm), iterative ascent on the true
class loss (bim), and iterative descent toward the least likely class
(illc). All operate on continuous [0, 255] float32 pixels; quantization
belongs to the storage pipeline, not the optimizer.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeMismatchError
from .models import Classifier, least_likely_class

__all__ = [
    "AttackConfig",
    "AdvRecord",
    "BudgetViolationError",
    "clip_eps",
    "schedule",
    "fgsm",
    "bim",
    "illc",
    "attack_batch",
]

METHODS = ("fgsm", "bim", "illc")


class BudgetViolationError(RuntimeError):
    """An iterate left the epsilon ball or the valid pixel range."""


@dataclass
class AttackConfig:
    method: str
    epsilon: float
    alpha: float = 1.0
    n_iter: int | None = None  # None: use schedule(epsilon)
    record_trajectory: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.n_iter is not None and self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")

    def iterations(self) -> int:
        return self.n_iter if self.n_iter is not None else schedule(self.epsilon)


@dataclass
class AdvRecord:
    x: np.ndarray
    x_adv: np.ndarray
    method: str
    epsilon: float
    n_iter_used: int
    y_true: int
    y_target: int | None  # least likely class; illc only
    source_model: str
    losses: list[float] | None = None  # J at each iterate incl. start and end
    iterates: list[np.ndarray] | None = None  # post-clip iterates when recorded
    error: str | None = None


def schedule(epsilon: float) -> int:
    """Iteration budget min(eps + 4, 1.25 * eps), rounded half away from
    zero to an integer, never below 1."""
    if epsilon <= 0:
        raise ValueError(f"schedule: epsilon must be positive, got {epsilon}")
    n = min(epsilon + 4.0, 1.25 * epsilon)
    return max(1, int(math.floor(n + 0.5)))


def _ball_bounds(x: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Float32 bounds of the eps-ball intersected with [0, 255], rounded
    inward so clipped pixels satisfy |adv - x| <= eps exactly in real
    arithmetic despite float32 rounding."""
    x64 = x.astype(np.float64)
    lb64 = np.maximum(x64 - epsilon, 0.0)
    ub64 = np.minimum(x64 + epsilon, 255.0)
    lb = lb64.astype(np.float32)
    lb = np.where(lb.astype(np.float64) < lb64, np.nextafter(lb, np.float32(np.inf)), lb)
    ub = ub64.astype(np.float32)
    ub = np.where(ub.astype(np.float64) > ub64, np.nextafter(ub, np.float32(-np.inf)), ub)
    return lb, ub


def clip_eps(candidate: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Per pixel: min(max(candidate, x - eps, 0), x + eps, 255)."""
    candidate = np.asarray(candidate, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    if candidate.shape != x.shape:
        raise ShapeMismatchError(f"clip_eps: candidate {candidate.shape} vs x {x.shape}")
    if epsilon <= 0:
        raise ValueError(f"clip_eps: epsilon must be positive, got {epsilon}")
    lb, ub = _ball_bounds(x, epsilon)
    return np.minimum(np.maximum(candidate, lb), ub)


def _check_budget(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> None:
    diff = x_adv.astype(np.float64) - x.astype(np.float64)
    if float(np.abs(diff).max(initial=0.0)) > epsilon:
        raise BudgetViolationError(
            f"|x_adv - x| = {np.abs(diff).max():.6g} exceeds eps={epsilon}"
        )
    if float(x_adv.min(initial=0.0)) < 0.0 or float(x_adv.max(initial=0.0)) > 255.0:
        raise BudgetViolationError("x_adv left the [0, 255] pixel range")


def _craft_group(
    model: Classifier,
    images: np.ndarray,
    loss_labels: np.ndarray,
    direction: float,
    n_iter: int,
    alpha: float,
    epsilon: float,
    record: bool,
) -> tuple[np.ndarray, list[list[float]] | None, list[np.ndarray] | None]:
    """Shared iteration core: x <- clip(x + direction * alpha * sign(grad)).

    Gradients are taken w.r.t. the per-image loss at `loss_labels` (y_true
    for ascent, the frozen target class for descent). The budget invariant
    is checked after every iteration.
    """
    x0 = np.ascontiguousarray(images, dtype=np.float32)
    lb, ub = _ball_bounds(x0, epsilon)
    x_adv = x0.copy()
    step = np.float32(direction * alpha)
    losses: list[list[float]] | None = [[] for _ in range(len(x0))] if record else None
    iterates: list[np.ndarray] | None = [] if record else None
    for _ in range(n_iter):
        grads, loss_now = model.input_gradient_batch(x_adv, loss_labels)
        x_adv = np.minimum(np.maximum(x_adv + step * np.sign(grads), lb), ub)
        _check_budget(x_adv, x0, epsilon)
        if record:
            for i, v in enumerate(loss_now):
                losses[i].append(float(v))
            iterates.append(x_adv.copy())
    if record:
        for i, v in enumerate(model.loss_batch(x_adv, loss_labels)):
            losses[i].append(float(v))
    return x_adv, losses, iterates


def _records_for_group(
    model, x0, x_adv, labels, targets, method, epsilon, n_iter, losses, iterates
) -> list[AdvRecord]:
    out = []
    for i in range(len(x0)):
        out.append(
            AdvRecord(
                x=x0[i],
                x_adv=x_adv[i],
                method=method,
                epsilon=float(epsilon),
                n_iter_used=n_iter,
                y_true=int(labels[i]),
                y_target=None if targets is None else int(targets[i]),
                source_model=model.name,
                losses=None if losses is None else losses[i],
                iterates=None if iterates is None else [it[i] for it in iterates],
            )
        )
    return out


def _craft_records(
    model: Classifier, images: np.ndarray, labels: np.ndarray, config: AttackConfig
) -> list[AdvRecord]:
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n_iter = config.iterations()
    if config.method == "illc":
        targets = np.asarray(
            [least_likely_class(model, im, int(y)) for im, y in zip(images, labels)],
            dtype=np.int64,
        )
        x_adv, losses, iterates = _craft_group(
            model, images, targets, -1.0, n_iter, config.alpha, config.epsilon,
            config.record_trajectory,
        )
    else:
        targets = None
        alpha = config.epsilon if config.method == "fgsm" else config.alpha
        n_iter = 1 if config.method == "fgsm" else n_iter
        x_adv, losses, iterates = _craft_group(
            model, images, labels, +1.0, n_iter, alpha, config.epsilon,
            config.record_trajectory,
        )
    return _records_for_group(
        model, images, x_adv, labels, targets, config.method, config.epsilon,
        n_iter, losses, iterates,
    )


def fgsm(model: Classifier, x: np.ndarray, y_true: int, epsilon: float) -> AdvRecord:
    """Single sign-gradient step of size eps; identical bit-for-bit to
    bim with n_iter=1 and alpha=eps."""
    config = AttackConfig(method="fgsm", epsilon=epsilon)
    return _craft_records(model, np.asarray(x)[None], [y_true], config)[0]


def bim(model: Classifier, x: np.ndarray, y_true: int, config: AttackConfig) -> AdvRecord:
    """Iterative ascent on the true-class loss with per-step clipping."""
    if config.method != "bim":
        raise ValueError(f"bim called with config.method={config.method!r}")
    return _craft_records(model, np.asarray(x)[None], [y_true], config)[0]


def illc(model: Classifier, x: np.ndarray, y_true: int, config: AttackConfig) -> AdvRecord:
    """Iterative descent toward the least likely class of the clean image.
    The target is computed once, before any perturbation, and frozen."""
    if config.method != "illc":
        raise ValueError(f"illc called with config.method={config.method!r}")
    return _craft_records(model, np.asarray(x)[None], [y_true], config)[0]


def attack_batch(
    model: Classifier,
    images: np.ndarray,
    labels,
    config: AttackConfig,
    parallelism: int = 1,
    chunk_size: int = 25,
) -> list[AdvRecord]:
    """Craft records for a slice of images, ordered by input index.

    Work is partitioned into fixed-size chunks regardless of the worker
    count, so results are bit-identical at any parallelism level. A failure
    inside a chunk falls back to per-image crafting so errors attach to
    individual records without aborting the batch.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise ShapeMismatchError(f"attack_batch: {len(images)} images vs {len(labels)} labels")
    if len(images) == 0:
        return []
    chunk_size = max(1, int(chunk_size))
    chunks = [
        (start, images[start : start + chunk_size], labels[start : start + chunk_size])
        for start in range(0, len(images), chunk_size)
    ]

    def run_chunk(chunk):
        start, imgs, labs = chunk
        try:
            return _craft_records(model, imgs, labs, config)
        except Exception:
            records = []
            for i in range(len(imgs)):
                try:
                    records.extend(_craft_records(model, imgs[i : i + 1], labs[i : i + 1], config))
                except Exception as exc:
                    records.append(
                        AdvRecord(
                            x=imgs[i],
                            x_adv=imgs[i].copy(),
                            method=config.method,
                            epsilon=float(config.epsilon),
                            n_iter_used=0,
                            y_true=int(labs[i]),
                            y_target=None,
                            source_model=model.name,
                            error=str(exc),
                        )
                    )
            return records

    if parallelism > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(c) for c in chunks]
    out: list[AdvRecord] = []
    for r in results:
        out.extend(r)
    return out
