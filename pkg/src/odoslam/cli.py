"""Experiment runner: scenario TOML in, reproducible artifact files out.

Two subcommands.  ``run`` simulates a single scenario and writes the full
set of artifacts (trajectories, frame log, map dump, metrics).  ``batch``
sweeps scenarios over seeds, writes one artifact directory per run, and
aggregates everything into a single ``summary.csv``.

All outputs are pure functions of (scenario file bytes, seed); running
the same command twice produces byte-identical files.
"""

import argparse
import csv
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import sim
from .config import BadConfig, apply_overrides, pipeline_config_from_tree
from .evaluate import METRICS_FIELDS
from .pipeline import RUN_MODES, run_pipeline, write_outputs

SUMMARY_FIELDS = METRICS_FIELDS + ["rmse_stddev_m", "status"]


class UsageError(Exception):
    """Bad invocation or unreadable configuration; exits with code 2."""


def load_scenario_tree(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"scenario file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise UsageError(f"cannot parse {path}: {err}")


def prepare_tree(path: str, overrides: Sequence[str], seed: Optional[int]) -> dict:
    """Load a scenario file and fold in --set / --seed overrides."""
    tree = apply_overrides(load_scenario_tree(path), overrides)
    if seed is not None:
        tree.setdefault("sim", {})
        tree["sim"] = dict(tree["sim"])
        tree["sim"]["seed"] = seed
    return tree


def execute_run(tree: dict, mode: str, out_dir: str, label: str) -> dict:
    """Simulate, run the estimator, write artifacts; returns the metrics row."""
    scenario = sim.scenario_from_dict(tree)
    cfg = pipeline_config_from_tree(tree)
    trace = sim.generate(scenario)
    result = run_pipeline(trace, cfg, mode)
    return write_outputs(result, out_dir, label=label)


def _label(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def cmd_run(args: argparse.Namespace) -> int:
    tree = prepare_tree(args.scenario, args.overrides, args.seed)
    try:
        row = execute_run(tree, args.mode, args.out, _label(args.scenario))
    except (BadConfig, sim.InvalidScenario) as err:
        raise UsageError(str(err))
    except Exception as err:
        print(f"pipeline error: {err}", file=sys.stderr)
        return 1
    print(
        f"{row['scenario']} seed {row['seed']}: rmse {row['rmse_m']} m "
        f"({row['percent_of_distance']}% of distance) -> {args.out}"
    )
    return 0


def _summary_row(label: str, rows: List[dict], attempted: int) -> dict:
    """Mean row over the successful runs of one scenario."""
    out: Dict[str, object] = {
        "scenario": label,
        "seed": "mean",
        "rmse_stddev_m": "",
        "status": f"summary over {len(rows)} of {attempted} runs",
    }
    if rows:
        for field in METRICS_FIELDS[2:]:
            out[field] = f"{np.mean([float(r[field]) for r in rows]):.6f}"
        rmse = np.array([float(r["rmse_m"]) for r in rows])
        # identical runs must report exactly zero spread
        spread = 0.0 if np.all(rmse == rmse[0]) else float(np.std(rmse))
        out["rmse_stddev_m"] = f"{spread:.6f}"
    return out


def cmd_batch(args: argparse.Namespace) -> int:
    for path in args.scenario:
        if not os.path.exists(path):
            raise UsageError(f"scenario file not found: {path}")
    os.makedirs(args.out, exist_ok=True)

    table: List[dict] = []
    for path in args.scenario:
        label = _label(path)
        ok_rows: List[dict] = []
        for seed in args.seed:
            run_dir = os.path.join(args.out, f"{label}_seed{seed}")
            try:
                tree = prepare_tree(path, args.overrides, seed)
                row = execute_run(tree, args.mode, run_dir, label)
            except Exception as err:  # record and continue
                table.append(
                    {"scenario": label, "seed": seed, "status": f"error: {err}"}
                )
                print(f"{label} seed {seed}: FAILED ({err})", file=sys.stderr)
                continue
            row = dict(row)
            row["status"] = "ok"
            table.append(row)
            ok_rows.append(row)
            print(f"{label} seed {seed}: rmse {row['rmse_m']} m")
        table.append(_summary_row(label, ok_rows, len(args.seed)))

    summary_path = os.path.join(args.out, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, restval="")
        writer.writeheader()
        writer.writerows(table)
    print(f"wrote {summary_path}")
    failed = sum(1 for row in table if str(row.get("status", "")).startswith("error"))
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odoslam",
        description="Simulate wheel-odometer + gyro + landmark scenarios and run the estimator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario and write its artifacts")
    batch_p = sub.add_parser("batch", help="sweep scenarios over seeds; write summary.csv")
    for p in (run_p, batch_p):
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--mode", choices=RUN_MODES, default="full")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a scenario value, e.g. --set pipeline.window_size=6",
        )

    run_p.add_argument("--scenario", required=True, help="scenario TOML file")
    run_p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    batch_p.add_argument(
        "--scenario", required=True, nargs="+", help="one or more scenario TOML files"
    )
    batch_p.add_argument(
        "--seed", type=int, nargs="+", default=[0], help="seeds to sweep"
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_batch(args)
    except (UsageError, BadConfig) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
