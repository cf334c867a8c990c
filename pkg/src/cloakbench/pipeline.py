"""Dataset synthesis and ingestion plus the inter-model transforms that
shape transferability: u8 quantization, JPEG round-trip storage, bilinear
resizing between classifier input sizes, and a pluggable detection gate.

All pixel data flows as float32 in [0, 255]; quantization to u8 happens only
at storage boundaries (PNG/JPEG), never inside the attack loop.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "Dataset",
    "synth_dataset",
    "ingest_directory",
    "export_dataset",
    "split",
    "quantize_u8",
    "jpeg_roundtrip",
    "resize",
    "detect_gate",
    "QuantizeU8",
    "JpegRoundtrip",
    "ResizeTo",
    "DetectGate",
    "TransformStep",
    "ChainResult",
    "apply_chain",
    "save_png",
    "load_png",
]


@dataclass
class Dataset:
    """Labelled images of one common size. `split` holds "train"/"eval" per
    image; freshly built datasets start fully in the train split."""

    identities: list[str]
    images: np.ndarray  # (M, S, S, 3) float32 in [0, 255]
    labels: np.ndarray  # (M,) int64
    split: np.ndarray  # (M,) unicode, "train" or "eval"
    provenance: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.identities)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == "train")

    def eval_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == "eval")


def _base_texture(image_size: int, seed: int) -> np.ndarray:
    """Low-frequency color field shared by every class, so class identity
    lives only in the layout cues on top of it."""
    rng = np.random.default_rng([seed, 9000])
    grid = rng.uniform(70.0, 185.0, size=(4, 4, 3)).astype(np.float32)
    return resize(grid, image_size)


def _class_pattern(texture: np.ndarray, image_size: int, seed: int, cls: int) -> np.ndarray:
    """Class-unique geometric layout: a handful of low-contrast shape bumps
    added to the shared texture. Amplitudes stay small so class margins are
    modest and perturbation budgets in the tens of pixels matter."""
    rng = np.random.default_rng([seed, cls, 101])
    img = texture.copy()
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    for _ in range(4):
        kind = int(rng.integers(0, 3))
        if kind == 0:
            y0, x0 = rng.integers(0, image_size - 4, size=2)
            hh, ww = rng.integers(image_size // 5, image_size // 2, size=2)
            mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        elif kind == 1:
            cy, cx = rng.integers(4, image_size - 4, size=2)
            radius = int(rng.integers(image_size // 8, image_size // 3))
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < radius**2
        else:
            period = int(rng.integers(image_size // 6, image_size // 3))
            phase = int(rng.integers(0, period))
            mask = ((yy + xx + phase) // period) % 2 == 0
        delta = (
            rng.uniform(12.0, 26.0, size=3) * rng.choice([-1.0, 1.0], size=3)
        ).astype(np.float32)
        img[mask] += delta
    return img


def synth_dataset(num_classes: int, per_class: int, image_size: int, seed: int) -> Dataset:
    """Procedural stand-in for a face-identity dataset: one base pattern per
    class plus per-image jitter (brightness, <=2 px translation, sigma-8
    noise). Fully deterministic in (num_classes, per_class, image_size, seed).
    """
    if num_classes < 2:
        raise ValueError(f"synth_dataset: need >= 2 classes, got {num_classes}")
    if per_class < 1 or image_size < 8:
        raise ValueError(
            f"synth_dataset: degenerate size (per_class={per_class}, image_size={image_size})"
        )
    images = np.empty((num_classes * per_class, image_size, image_size, 3), np.float32)
    labels = np.empty(num_classes * per_class, np.int64)
    texture = _base_texture(image_size, seed)
    for cls in range(num_classes):
        pattern = _class_pattern(texture, image_size, seed, cls)
        for i in range(per_class):
            rng = np.random.default_rng([seed, cls, i, 202])
            img = pattern + np.float32(rng.uniform(-20.0, 20.0))
            dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
            img = np.roll(img, (dy, dx), axis=(0, 1))
            img = img + rng.normal(0.0, 8.0, size=img.shape).astype(np.float32)
            np.clip(img, 0.0, 255.0, out=img)
            images[cls * per_class + i] = img
            labels[cls * per_class + i] = cls
    return Dataset(
        identities=[f"synth_{c:02d}" for c in range(num_classes)],
        images=images,
        labels=labels,
        split=np.full(len(labels), "train", dtype="<U5"),
        provenance={
            "id": f"synth-c{num_classes}-p{per_class}-s{image_size}-seed{seed}",
            "kind": "synth",
            "num_classes": num_classes,
            "per_class": per_class,
            "image_size": image_size,
            "seed": seed,
        },
    )


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32)


def save_png(image: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize_u8(image).astype(np.uint8), mode="RGB").save(path, format="PNG")


def ingest_directory(path) -> Dataset:
    """Read a <identity>/<image>.png tree. Labels follow the sorted identity
    directory names; unreadable files are skipped with a warning record."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"ingest_directory: {root} is not a directory")
    identity_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not identity_dirs:
        raise ValueError(f"ingest_directory: no identity directories under {root}")
    images: list[np.ndarray] = []
    labels: list[int] = []
    warnings: list[str] = []
    shape = None
    for label, d in enumerate(identity_dirs):
        for f in sorted(d.glob("*.png")):
            try:
                arr = load_png(f)
            except (OSError, UnidentifiedImageError) as exc:
                warnings.append(f"skipped unreadable {f}: {exc}")
                continue
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(
                    f"ingest_directory: {f} has shape {arr.shape}, expected {shape}"
                )
            images.append(arr)
            labels.append(label)
    if not images:
        raise ValueError(f"ingest_directory: no readable images under {root}")
    names = [d.name for d in identity_dirs]
    digest = hashlib.sha256(
        repr([(n, sorted(p.name for p in d.glob('*.png'))) for n, d in zip(names, identity_dirs)]).encode()
    ).hexdigest()[:12]
    return Dataset(
        identities=names,
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        split=np.full(len(labels), "train", dtype="<U5"),
        provenance={"id": f"dir-{digest}", "kind": "directory", "path": str(root),
                    "warnings": warnings},
    )


def export_dataset(dataset: Dataset, path) -> None:
    root = Path(path)
    counters = {name: 0 for name in dataset.identities}
    for img, label in zip(dataset.images, dataset.labels):
        name = dataset.identities[int(label)]
        save_png(img, root / name / f"{counters[name]:04d}.png")
        counters[name] += 1


def split(dataset: Dataset, train_fraction: float, seed: int) -> Dataset:
    """Stratified per-class split with a seeded shuffle; every class keeps at
    least one image on each side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"split: train_fraction {train_fraction} not in (0, 1)")
    rng = np.random.default_rng(seed)
    assignment = np.full(len(dataset.labels), "eval", dtype="<U5")
    for cls in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) < 2:
            raise ValueError(
                f"split: class {dataset.identities[cls]!r} has {len(idx)} image(s), "
                "cannot populate both splits"
            )
        order = rng.permutation(len(idx))
        n_train = int(np.clip(round(train_fraction * len(idx)), 1, len(idx) - 1))
        assignment[idx[order[:n_train]]] = "train"
    return Dataset(
        identities=list(dataset.identities),
        images=dataset.images,
        labels=dataset.labels,
        split=assignment,
        provenance={**dataset.provenance, "train_fraction": train_fraction,
                    "split_seed": seed},
    )


def quantize_u8(image: np.ndarray) -> np.ndarray:
    """Round half away from zero to integers, clamped to [0, 255]."""
    image = np.asarray(image, dtype=np.float32)
    rounded = np.trunc(image + np.copysign(np.float32(0.5), image))
    return np.clip(rounded, 0.0, 255.0).astype(np.float32)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """Encode to baseline JPEG (4:2:0 chroma subsampling) and decode back."""
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"jpeg_roundtrip: quality {quality} not in [1, 100]")
    u8 = quantize_u8(image).astype(np.uint8)
    buf = io.BytesIO()
    try:
        Image.fromarray(u8, mode="RGB").save(
            buf, format="JPEG", quality=int(quality), subsampling=2
        )
        buf.seek(0)
        decoded = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise RuntimeError(f"jpeg_roundtrip: codec failure: {exc}") from exc
    return decoded


def _lin_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    u = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    u = np.clip(u, 0.0, n_in - 1.0)
    lo = np.floor(u).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, u - lo


def resize(image: np.ndarray, target_side: int) -> np.ndarray:
    """Bilinear resize (aligned-corners-off sampling). Resizing to the input
    size is an exact identity."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"resize: expected (H, W, 3), got {image.shape}")
    if target_side < 1:
        raise ValueError(f"resize: degenerate target {target_side}")
    h, w, _ = image.shape
    if (h, w) == (target_side, target_side):
        return image.copy()
    arr = image.astype(np.float64)
    lo, hi, t = _lin_coords(h, target_side)
    arr = arr[lo] * (1.0 - t)[:, None, None] + arr[hi] * t[:, None, None]
    lo, hi, t = _lin_coords(w, target_side)
    arr = arr[:, lo] * (1.0 - t)[None, :, None] + arr[:, hi] * t[None, :, None]
    return np.clip(arr, 0.0, 255.0).astype(np.float32)


Detector = Callable[[np.ndarray], bool]


def detect_gate(image: np.ndarray, detector: Detector | None = None) -> tuple[bool, str | None]:
    """Run the pluggable detectability predicate. The default detector
    passes everything; a detector that raises counts as a failure with the
    exception text as the reason."""
    if detector is None:
        return True, None
    try:
        ok = bool(detector(image))
    except Exception as exc:  # detector errors surface as gate failures
        return False, f"detector error: {exc}"
    return (True, None) if ok else (False, "rejected by detector")


@dataclass(frozen=True)
class QuantizeU8:
    pass


@dataclass(frozen=True)
class JpegRoundtrip:
    quality: int = 90


@dataclass(frozen=True)
class ResizeTo:
    side: int


@dataclass(frozen=True)
class DetectGate:
    detector: Detector | None = None


TransformStep = QuantizeU8 | JpegRoundtrip | ResizeTo | DetectGate


@dataclass
class ChainResult:
    image: np.ndarray
    passed: bool
    fail_reason: str | None
    storage_delta: float  # max |pixel change| accumulated before any resize


def apply_chain(image: np.ndarray, steps: tuple[TransformStep, ...] | list[TransformStep]) -> ChainResult:
    """Apply transform steps in order. The empty chain is the identity.
    `storage_delta` reports how far storage (quantize/JPEG) moved the image
    from its input, measured before any resize changes the geometry."""
    original = np.asarray(image, dtype=np.float32)
    current = original
    delta = 0.0
    delta_frozen = False
    passed = True
    reason: str | None = None
    for step in steps:
        if isinstance(step, QuantizeU8):
            current = quantize_u8(current)
        elif isinstance(step, JpegRoundtrip):
            current = jpeg_roundtrip(current, step.quality)
        elif isinstance(step, ResizeTo):
            if not delta_frozen:
                delta = float(np.max(np.abs(current - original))) if current.size else 0.0
                delta_frozen = True
            current = resize(current, step.side)
        elif isinstance(step, DetectGate):
            ok, why = detect_gate(current, step.detector)
            if not ok:
                passed = False
                reason = why
        else:
            raise TypeError(f"apply_chain: unknown step {step!r}")
    if not delta_frozen:
        delta = float(np.max(np.abs(current - original))) if current.size else 0.0
    return ChainResult(image=current, passed=passed, fail_reason=reason, storage_delta=delta)
