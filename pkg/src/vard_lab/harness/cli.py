"""Command line entry point: ``vard-lab <task> --config PATH --seed N``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from ..errors import ConfigError
from . import config as config_mod
from .run import EXIT_INVALID, run


def build_parser():
    ap = argparse.ArgumentParser(prog="vard-lab", description="Value-guided diffusion fine-tuning lab")
    sub = ap.add_subparsers(dest="command", required=True)
    for task in config_mod.TASKS:
        p = sub.add_parser(task, help=f"run the {task} pipeline")
        p.add_argument("--config", type=Path, help="JSON run config (defaults when omitted)")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--preset", action="append", default=[],
                       help="named preset (eta or reward); repeatable")
        p.add_argument("--out", type=Path, help="run directory (overrides output_dir)")
        p.add_argument("--dump-trajectories", action="store_true",
                       help="write trajectories.jsonl next to the metrics")
    p = sub.add_parser("inspect", help="print the summary and checkpoint manifests of a run")
    p.add_argument("run_dir", type=Path)
    p = sub.add_parser("acceptance", help="run acceptance recipes and print one line per criterion")
    p.add_argument("--criterion", type=int, action="append", help="criterion number; repeatable")
    p.add_argument("--out", type=Path, help="directory for per-criterion metrics")
    return ap


def inspect(run_dir):
    run_dir = Path(run_dir)
    summary = run_dir / "summary.json"
    if summary.exists():
        print(summary.read_text(), end="")
    diag = run_dir / "diagnostics.json"
    if diag.exists():
        print(diag.read_text(), end="")
    for manifest in sorted((run_dir / "checkpoints").glob("*.json")):
        meta = json.loads(manifest.read_text())
        n = sum(_size(p["shape"]) for p in meta.get("parameters", []))
        print(f"{manifest.name}: kind={meta.get('kind')} parameters={n}")
    metrics = run_dir / "metrics.csv"
    if metrics.exists():
        lines = metrics.read_text().splitlines()
        print(f"metrics.csv: {len(lines) - 1} rows; last: {lines[-1] if len(lines) > 1 else '-'}")
    return 0 if summary.exists() or diag.exists() else EXIT_INVALID


def _size(shape):
    n = 1
    for s in shape:
        n *= s
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "inspect":
        return inspect(args.run_dir)
    if args.command == "acceptance":
        from .acceptance import main as acceptance_main
        return acceptance_main(args.criterion, args.out)
    text = args.config.read_text(encoding="utf-8") if args.config else "{}"
    try:
        raw_task = json.loads(text).get("task") if text.strip() else None
    except (json.JSONDecodeError, AttributeError):
        raw_task = None
    if raw_task not in (None, args.command):
        print(f"error: config task {raw_task!r} does not match command {args.command!r}",
              file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.config is None or raw_task is None:
            text = _with_task(text, args.command)
        cfg = config_mod.parse_config(text, args.seed, args.preset, args.out)
    except ConfigError as exc:
        where = f"{args.config}:" if args.config else ""
        print(f"error: {where}{exc}", file=sys.stderr)
        return EXIT_INVALID
    t0 = time.perf_counter()
    status = run(cfg, dump_trajectories=args.dump_trajectories,
                 log=lambda m: print(m, file=sys.stderr if m.startswith("error") else sys.stdout))
    print(f"done in {time.perf_counter() - t0:.1f}s (status {status})")
    return status


def _with_task(text, task):
    """Insert the task without disturbing line numbers of the user's file."""
    stripped = text.strip()
    if not stripped or stripped == "{}":
        return json.dumps({"task": task})
    i = text.index("{")
    return text[:i + 1] + f' "task": {json.dumps(task)},' + text[i + 1:]


if __name__ == "__main__":
    sys.exit(main())
