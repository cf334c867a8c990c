#!/usr/bin/env python3
"""Run the full desk-scale experiment with stock settings.

Equivalent to `cloakbench run` with no config file: 10 synthetic identities,
three classifiers (two 32px, one 48px), BIM and ILLC over the six standard
budgets, 100 evaluation images, JPEG quality 90 plus a {95, 75, 50} sweep.
Writes tables, curves, grids, and the manifest under runs/default.
"""

import sys

from cloakbench import default_config, run_experiment


def main() -> int:
    cfg = default_config()
    if len(sys.argv) > 1:
        cfg.output_dir = sys.argv[1]
    manifest = run_experiment(cfg)
    print(f"finished in {manifest.total_seconds:.0f}s")
    print(f"matrix: {cfg.output_dir}/table.csv")
    for stage, info in manifest.stages.items():
        print(f"  {stage}: {info.get('seconds', 0):.1f}s {info['status']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
