"""Command-line entry points: ``viral generate | run | ate``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Log verbosity comes
from the ``VIRAL_LOG`` environment variable (default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .dataset import SENSORS, DatasetError, load_dataset
from .geometry import InvalidArgument
from .metrics import ALIGNMENTS, ate
from .sim import GenerationError, NoiseSpec, generate, make_scenario, scenario_library

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_sensors(text: str) -> tuple:
    sensors = tuple(s.strip() for s in text.split(",") if s.strip())
    unknown = [s for s in sensors if s not in SENSORS]
    if unknown:
        raise UsageError(f"unknown sensors: {', '.join(unknown)} (choose from {', '.join(SENSORS)})")
    if "imu" not in sensors or "lidar" not in sensors:
        raise UsageError("--sensors must include imu and lidar")
    return sensors


def cmd_generate(args) -> int:
    if args.scenario not in scenario_library():
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {', '.join(scenario_library())}")
    noise = NoiseSpec.zero() if args.noise_free else NoiseSpec()
    ds = generate(make_scenario(args.scenario, args.seed), args.seed, noise, duration=args.duration)
    out = ds.write(args.out)
    print(f"wrote {args.scenario} (seed {args.seed}) to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import make_config, run, write_outputs

    sensors = _parse_sensors(args.sensors)
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
    if args.inline:
        overrides["threaded"] = False
    try:
        config = make_config(sensors, overrides)
    except InvalidArgument as e:
        raise UsageError(str(e)) from e
    ds = load_dataset(args.dataset)
    result = run(ds, config)
    out = write_outputs(result, ds, config, args.out)
    summary = {"steps": len(result.reports), "keyframes": len(result.keyframes), "ate": result.ate}
    print(json.dumps(summary))
    if result.aborted:
        print(f"estimator aborted: {result.aborted}; partial outputs in {out}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _read_positions(path: Path):
    """(t, p) from a trajectory/keyframes JSONL, a groundtruth JSONL or a dataset directory."""
    if path.is_dir():
        path = path / "groundtruth.jsonl"
    t, p = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            t.append(r["t"])
            p.append(r["p"] if "p" in r else r["pose"][4:7])
    return np.array(t), np.array(p).reshape(-1, 3)


def cmd_ate(args) -> int:
    try:
        et, ep = _read_positions(Path(args.est))
        gt, gp = _read_positions(Path(args.gt))
    except (OSError, ValueError, KeyError) as e:
        raise UsageError(f"cannot read trajectories: {e}") from e
    print(f"{ate(et, ep, gt, gp, args.align):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viral", description="Lidar/visual/inertial/UWB SLAM on synthetic datasets")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--scenario", required=True, help=f"one of: {', '.join(scenario_library())}")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--noise-free", action="store_true", help="disable all sensor noise and biases")
    g.add_argument("--duration", type=float, default=None, help="truncate the trajectory (s)")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run the estimator on a dataset")
    r.add_argument("--dataset", required=True)
    r.add_argument("--sensors", default="imu,lidar,cam,uwb", help="comma list; imu and lidar are required")
    r.add_argument("--config", default=None, help="JSON file of configuration overrides")
    r.add_argument("--out", required=True)
    r.add_argument("--inline", action="store_true", help="run the global map in the caller's thread")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ate", help="absolute trajectory error (RMSE, m)")
    a.add_argument("--est", required=True, help="trajectory.jsonl or keyframes.jsonl")
    a.add_argument("--gt", required=True, help="groundtruth.jsonl or dataset directory")
    a.add_argument("--align", choices=ALIGNMENTS, default="none")
    a.set_defaults(func=cmd_ate)
    return p


def main(argv=None) -> int:
    level = os.environ.get("VIRAL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, GenerationError, InvalidArgument, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
