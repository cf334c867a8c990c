"""Report emission: transfer-matrix tables (CSV/markdown), PSR-vs-budget
curve data, method-difference tables, storage-effect records, and PNG
contact sheets of de-identified images.

All tabular outputs are pure views of a TransferMatrix with fixed ordering
and one-decimal formatting, so re-emission is byte-identical.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .attacks import AdvRecord
from .evaluation import TransferMatrix
from .pipeline import quantize_u8

__all__ = [
    "emit_table",
    "emit_curves",
    "emit_delta_table",
    "emit_storage_summary",
    "emit_storage_per_image",
    "emit_image_grid",
]


def _fmt(value: float | None) -> str:
    return "err" if value is None else f"{value:.1f}"


def _axes(matrix: TransferMatrix):
    meta = matrix.metadata
    targets = list(meta["models"])
    methods = list(meta["methods"])
    eps_set = sorted(float(e) for e in meta["eps_set"])
    k_set = sorted(int(k) for k in meta["k_set"])
    return targets, methods, eps_set, k_set


def _cell_value(matrix: TransferMatrix, source, method, eps, target, k) -> float | None:
    cell = matrix.cell(source, method, eps, target)
    if cell.error is not None:
        return None
    return cell.psr[k]


def emit_table(matrix: TransferMatrix, path, fmt: str = "csv") -> Path:
    """One row per (source, method, eps); one column per (target, top-k)."""
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"emit_table: unknown format {fmt!r}")
    targets, methods, eps_set, k_set = _axes(matrix)
    header = ["source", "method", "epsilon"] + [
        f"{t}_top{k}" for t in targets for k in k_set
    ]
    rows = []
    for source in targets:
        for method in methods:
            for eps in eps_set:
                row = [source, method, f"{eps:g}"]
                for target in targets:
                    for k in k_set:
                        row.append(_fmt(_cell_value(matrix, source, method, eps, target, k)))
                rows.append(row)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    else:
        lines = [
            "| " + " | ".join(header) + " |",
            "| " + " | ".join("---" for _ in header) + " |",
        ]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def emit_curves(matrix: TransferMatrix, out_dir) -> list[Path]:
    """Per (source, method, k): PSR vs epsilon, one column per target."""
    targets, methods, eps_set, k_set = _axes(matrix)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for source in targets:
        for method in methods:
            for k in k_set:
                path = out_dir / f"psr_{source}_{method}_top{k}.csv"
                with open(path, "w", newline="", encoding="utf-8") as f:
                    writer = csv.writer(f)
                    writer.writerow(["epsilon"] + targets)
                    for eps in eps_set:
                        writer.writerow(
                            [f"{eps:g}"]
                            + [
                                _fmt(_cell_value(matrix, source, method, eps, t, k))
                                for t in targets
                            ]
                        )
                paths.append(path)
    return paths


def emit_delta_table(matrix: TransferMatrix, path) -> Path | None:
    """BIM minus ILLC PSR per (source, epsilon, target, k). Positive values
    mean the untargeted method protects better. Emitted only when the matrix
    holds both methods."""
    targets, methods, eps_set, k_set = _axes(matrix)
    if not {"bim", "illc"} <= set(methods):
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["source", "epsilon", "target", "transfer"]
            + [f"bim_minus_illc_top{k}" for k in k_set]
        )
        for source in targets:
            for eps in eps_set:
                for target in targets:
                    row = [source, f"{eps:g}", target,
                           "same-model" if source == target else "cross-model"]
                    for k in k_set:
                        b = _cell_value(matrix, source, "bim", eps, target, k)
                        i = _cell_value(matrix, source, "illc", eps, target, k)
                        row.append("err" if b is None or i is None else f"{b - i:.1f}")
                    writer.writerow(row)
    return path


def emit_storage_summary(matrices: dict[int, TransferMatrix], path) -> Path:
    """Per (jpeg quality, cell): PSR values plus the largest pixel change
    storage introduced, making budget leakage from JPEG visible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    qualities = sorted(matrices)
    first = matrices[qualities[0]]
    targets, methods, eps_set, k_set = _axes(first)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["jpeg_quality", "source", "method", "epsilon", "target",
             "samples", "detect_fails", "storage_max_delta"]
            + [f"top{k}" for k in k_set]
        )
        for q in qualities:
            matrix = matrices[q]
            for source in targets:
                for method in methods:
                    for eps in eps_set:
                        for target in targets:
                            cell = matrix.cell(source, method, eps, target)
                            row = [str(q), source, method, f"{eps:g}", target,
                                   str(cell.sample_count), str(cell.detect_fail_count)]
                            if cell.error is not None:
                                row += ["err"] + ["err"] * len(k_set)
                            else:
                                row += [f"{cell.storage_max_delta:.1f}"]
                                row += [f"{cell.psr[k]:.1f}" for k in k_set]
                            writer.writerow(row)
    return path


def emit_storage_per_image(matrices: dict[int, TransferMatrix], path) -> Path:
    """Per (jpeg quality, source, method, epsilon, image): max |delta| that
    storage introduced. The delta is measured before any resize, so it is
    target-independent; one cell per group supplies it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["jpeg_quality", "source", "method", "epsilon", "image_index", "max_abs_delta"]
        )
        for q in sorted(matrices):
            matrix = matrices[q]
            seen: set[tuple[str, str, float]] = set()
            for cell in matrix.cells:
                group = (cell.source, cell.method, cell.epsilon)
                if group in seen or cell.error is not None:
                    continue
                seen.add(group)
                for i, d in enumerate(cell.storage_deltas):
                    writer.writerow(
                        [str(q), cell.source, cell.method, f"{cell.epsilon:g}",
                         str(i), f"{d:.2f}"]
                    )
    return path


def emit_image_grid(
    records_by_eps: dict[float, list[AdvRecord]],
    path,
    samples: int = 3,
    gap: int = 2,
) -> Path:
    """Contact sheet for one (source, method): one row per sample image,
    the unperturbed original in the leftmost column, then one column per
    epsilon in ascending order. Lossless PNG, so visible artifacts come from
    the attack and u8 quantization only."""
    eps_sorted = sorted(records_by_eps)
    if not eps_sorted:
        raise ValueError("emit_image_grid: no records")
    first_group = records_by_eps[eps_sorted[0]]
    n_rows = min(samples, len(first_group))
    if n_rows == 0:
        raise ValueError("emit_image_grid: empty record group")
    side = first_group[0].x.shape[0]
    n_cols = 1 + len(eps_sorted)
    canvas = np.full(
        (n_rows * side + gap * (n_rows - 1), n_cols * side + gap * (n_cols - 1), 3),
        255,
        dtype=np.uint8,
    )

    def paste(row, col, image):
        y, x = row * (side + gap), col * (side + gap)
        canvas[y : y + side, x : x + side] = quantize_u8(image).astype(np.uint8)

    for r in range(n_rows):
        paste(r, 0, first_group[r].x)
        for c, eps in enumerate(eps_sorted, start=1):
            paste(r, c, records_by_eps[eps][r].x_adv)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="RGB").save(path, format="PNG")
    return path
