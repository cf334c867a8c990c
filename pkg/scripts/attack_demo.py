#!/usr/bin/env python3
"""Craft and inspect de-identified versions of one image.

Trains a small classifier on a fresh synthetic set, runs BIM and ILLC on a
single held-out image across the standard budgets, prints how the predicted
identity and its probability move, and writes a before/after contact sheet.
"""

import sys

import numpy as np

from cloakbench import (
    AttackConfig,
    TrainConfig,
    attack_batch,
    build_model,
    split,
    stock_descriptor,
    synth_dataset,
    train,
)
from cloakbench.reports import emit_image_grid

EPS_SET = [4.0, 8.0, 16.0, 32.0, 64.0, 128.0]


def main() -> int:
    out = sys.argv[1] if len(sys.argv) > 1 else "demo_grid.png"
    dataset = split(synth_dataset(10, 40, 32, seed=2024), 0.8, seed=2025)
    model = build_model(stock_descriptor("cnn_a", 10), seed=1)
    stats = train(model, dataset, TrainConfig(epochs=10, seed=1))
    model.freeze()
    print(f"trained cnn_a, val accuracy {stats[-1].val_accuracy:.3f}")

    idx = dataset.eval_indices()[:1]
    image, label = dataset.images[idx], dataset.labels[idx]
    clean = model.predict(image[0])
    print(f"clean:  true={int(label[0])}  argmax={int(clean.argmax())}  "
          f"p_true={clean[int(label[0])]:.4f}")

    by_eps = {}
    for method in ("bim", "illc"):
        print(f"\n{method}:")
        for eps in EPS_SET:
            rec = attack_batch(model, image, label, AttackConfig(method, eps))[0]
            probs = model.predict(rec.x_adv)
            tgt = "" if rec.y_target is None else f" target={rec.y_target}"
            print(f"  eps={eps:5.0f}  argmax={int(probs.argmax())}  "
                  f"p_true={probs[int(label[0])]:.4f}{tgt}")
            if method == "bim":
                by_eps[eps] = [rec]
    emit_image_grid(by_eps, out, samples=1)
    print(f"\nwrote {out} (original, then BIM at each budget)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
