"""Command-line driver.

Subcommands: gen-data, train, attack, evaluate, report, run. Flags mirror
config keys and override the JSON config; the CLOAKBENCH_SEED environment
variable overrides the global seed last. Exit codes: 0 success, 2 config
error, 3 stage failure (the manifest is still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    default_config,
)
from .pipeline import export_dataset, synth_dataset
from .runner import StageError, run_experiment

_DEFAULTS_EPILOG = (
    "config defaults:\n"
    + json.dumps(config_to_dict(default_config()), indent=2, sort_keys=True)
)


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults used when omitted)")
    p.add_argument("--output-dir", help="override output_dir")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--eval-count", type=int, help="override eval_count")
    p.add_argument("--jpeg-quality", type=int, help="override jpeg_quality")
    p.add_argument("--alpha", type=float, help="override step size alpha")
    p.add_argument("--workers", type=int, help="override worker count")
    p.add_argument("--eps-set", help="comma-separated budgets, e.g. 4,8,16")
    p.add_argument("--methods", help="comma-separated methods, e.g. bim,illc")
    p.add_argument("--k-set", help="comma-separated top-k values, e.g. 1,5")


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    else:
        data = {}
    if args.output_dir is not None:
        data["output_dir"] = args.output_dir
    if args.seed is not None:
        data["seed"] = args.seed
    if args.eval_count is not None:
        data["eval_count"] = args.eval_count
    if args.jpeg_quality is not None:
        data["jpeg_quality"] = args.jpeg_quality
    if args.alpha is not None:
        data["alpha"] = args.alpha
    if args.workers is not None:
        data["workers"] = args.workers
    if args.eps_set is not None:
        try:
            data["eps_set"] = [float(v) for v in args.eps_set.split(",") if v]
        except ValueError:
            raise ConfigError(f"--eps-set: cannot parse {args.eps_set!r}")
    if args.methods is not None:
        data["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.k_set is not None:
        try:
            data["k_set"] = [int(v) for v in args.k_set.split(",") if v]
        except ValueError:
            raise ConfigError(f"--k-set: cannot parse {args.k_set!r}")
    env_seed = os.environ.get("CLOAKBENCH_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"CLOAKBENCH_SEED is not an integer: {env_seed!r}")
    return config_from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloakbench",
        description="Desk-scale face de-identification lab: sign-gradient "
        "attacks, small classifiers, and transferability reports.",
        epilog=_DEFAULTS_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic PNG identity tree")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--classes", type=int, default=10)
    gen.add_argument("--per-class", type=int, default=80)
    gen.add_argument("--size", type=int, default=32)
    gen.add_argument("--seed", type=int, default=2024)

    for name, help_text, stage in (
        ("train", "build the dataset and train (or reuse) all classifiers", "train"),
        ("attack", "craft de-identified images and emit image grids", "attack"),
        ("evaluate", "compute the transfer matrix (writes table.csv)", "evaluate"),
        ("report", "emit all tables, curves, and storage reports", "report"),
        ("run", "full pipeline: train, attack, evaluate, report", "report"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_override_flags(p)
        p.set_defaults(stage=stage)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            env_seed = os.environ.get("CLOAKBENCH_SEED")
            seed = int(env_seed) if env_seed is not None else args.seed
            dataset = synth_dataset(args.classes, args.per_class, args.size, seed)
            export_dataset(dataset, args.out)
            print(f"wrote {len(dataset.labels)} images "
                  f"({args.classes} identities) to {args.out}")
            return 0
        cfg = _load_config(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        manifest = run_experiment(cfg, upto=args.stage)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    done = ", ".join(s for s in manifest.stages)
    print(f"completed stages: {done} in {manifest.total_seconds:.1f}s")
    print(f"outputs in {cfg.output_dir} (manifest.json lists checksums)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
