"""Command line interface: run explorations, render map rasters, compare runs.

Subcommands:
    explore  -- run one explorer for N iterations, writing metrics and rasters
    render   -- turn a map snapshot JSON into occupancy/entropy (and MI) PGMs
    compare  -- aggregate >= 2 run directories into compare.csv

Set NBP_LOG=debug|info|warn to control log verbosity on stderr.
Exit codes: 0 success, 1 usage error, 2 run failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .envs import BUILTIN_START, builtin_env
from .exploration import (ExplorationRun, LoopConfig, MapConfig, METHODS,
                          map_entropy_total, occupancy_raster)
from .hilbert_map import HilbertMap
from .perturbed_map import PerturbedMap
from .pgm import PgmFormatError, write_pgm
from .planner import ObjectiveConfig
from .sensor import GroundTruthEnv, SensorModel, expected_observations
from .util import entropy_bits, sha256_file

log = logging.getLogger("nbp.cli")

_SECTIONS = {"map": MapConfig, "sensor": SensorModel,
             "objective": ObjectiveConfig, "loop": LoopConfig}
_TOP_KEYS = {"env", "method", "seed", "iterations", "out_dir", "start"} | set(_SECTIONS)


class UsageError(ValueError):
    pass


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise UsageError(f"unknown config key(s) in '{section}': {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | None, overrides: dict) -> dict:
    """Parse the JSON config (strict keys), apply flag overrides, and
    return the effective config dict."""
    raw = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {path}")
        raw = json.loads(p.read_text())
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise UsageError(f"unknown config key(s): {sorted(unknown)}")
    cfg = {
        "env": raw.get("env", "rooms"),
        "method": raw.get("method", "functional"),
        "seed": raw.get("seed", 0),
        "iterations": raw.get("iterations", 40),
        "out_dir": raw.get("out_dir", "run_out"),
        "start": dict(raw.get("start", {})),
        "map": dict(raw.get("map", {})),
        "sensor": dict(raw.get("sensor", {})),
        "objective": dict(raw.get("objective", {})),
        "loop": dict(raw.get("loop", {})),
    }
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    bad_start = set(cfg["start"]) - {"x", "y", "theta"}
    if bad_start:
        raise UsageError(f"unknown config key(s) in 'start': {sorted(bad_start)}")
    if cfg["method"] not in METHODS:
        raise UsageError(
            f"invalid method {cfg['method']!r}; valid methods: {', '.join(METHODS)}")
    # the RRT explorer reasons about collision only, not conservative safety
    if cfg["method"] == "rrt-mi" and "p_safe" not in cfg["objective"]:
        cfg["objective"]["p_safe"] = 0.6
    return cfg


def _resolve_env(spec: str) -> tuple[GroundTruthEnv, tuple, str, str]:
    """Returns (env, default_start, label, content_hash)."""
    if spec in BUILTIN_START:
        env, start = builtin_env(spec)
        return env, start, spec, env.content_hash()
    p = Path(spec)
    if not p.exists():
        raise UsageError(f"environment file not found: {spec}")
    env = GroundTruthEnv.from_pgm(p)
    return env, None, str(p), sha256_file(p)


def effective_config(cfg: dict, run: ExplorationRun) -> dict:
    return {
        "env": cfg["env"],
        "method": run.method,
        "seed": run.seed,
        "iterations": cfg["iterations"],
        "out_dir": cfg["out_dir"],
        "start": {"x": float(run_start(run)[0]), "y": float(run_start(run)[1]),
                  "theta": float(run_start(run)[2])},
        "map": asdict(run.map_config),
        "sensor": asdict(run.sensor),
        "objective": asdict(run.objective),
        "loop": asdict(run.loop),
    }


def run_start(run: ExplorationRun) -> np.ndarray:
    return run.traversed[0]


def cmd_explore(args) -> int:
    overrides = {"env": args.env, "method": args.method, "seed": args.seed,
                 "iterations": args.iterations, "out_dir": args.out}
    cfg = load_config(args.config, overrides)
    env, default_start, label, env_hash = _resolve_env(cfg["env"])
    start = default_start
    if cfg["start"]:
        s = cfg["start"]
        base = default_start or (0.0, 0.0, 0.0)
        start = (s.get("x", base[0]), s.get("y", base[1]), s.get("theta", base[2]))
    if start is None:
        xmin, ymin, xmax, ymax = env.bounds
        start = ((xmin + xmax) / 2, (ymin + ymax) / 2, 0.0)
    run = ExplorationRun(
        env, method=cfg["method"], seed=int(cfg["seed"]), start_pose=start,
        map_config=_build_section(MapConfig, cfg["map"], "map"),
        sensor=_build_section(SensorModel, cfg["sensor"], "sensor"),
        objective=_build_section(ObjectiveConfig, cfg["objective"], "objective"),
        loop=_build_section(LoopConfig, cfg["loop"], "loop"),
        env_label=label, env_hash=env_hash)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(effective_config(cfg, run), indent=2))
    report = run.run(int(cfg["iterations"]), out)
    log.info("run finished: status=%s entropy=%.1f bits",
             report["status"], report["final_entropy_bits"])
    if report["status"] in ("collision", "exhausted"):
        print(f"run failed: {report['status']}", file=sys.stderr)
        return 2
    return 0


def cmd_render(args) -> int:
    snap = Path(args.snapshot)
    if not snap.exists():
        raise UsageError(f"snapshot not found: {args.snapshot}")
    m = HilbertMap.load_snapshot(snap)
    fm = m.features
    if fm.grid_origin is not None:
        nx, ny = fm.grid_shape
        bounds = (fm.grid_origin[0], fm.grid_origin[1],
                  fm.grid_origin[0] + (nx - 1) * fm.pitch,
                  fm.grid_origin[1] + (ny - 1) * fm.pitch)
    else:
        bounds = (-10.0, -10.0, 10.0, 10.0)
    res = args.resolution
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "occupancy.pgm", occupancy_raster(m, res, bounds),
              "occupancy: 0 = free (black), 255 = occupied; p=0.5 renders as 128")
    xmin, ymin, xmax, ymax = bounds
    nx = max(1, int(round((xmax - xmin) / res)))
    ny = max(1, int(round((ymax - ymin) / res)))
    xs = xmin + (np.arange(nx) + 0.5) * res
    ys = ymin + (np.arange(ny) + 0.5) * res
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    h = np.asarray(m.entropy(pts)).reshape(ny, nx)
    write_pgm(out / "entropy.pgm",
              np.flipud(np.rint(h * 255.0).astype(np.uint8)),
              "entropy: 0..255 maps 0..1 bits")
    if args.pose:
        try:
            px, py, pt = (float(v) for v in args.pose.split(","))
        except ValueError:
            raise UsageError("--pose expects 'x,y,theta'") from None
        s = SensorModel()
        ocfg = ObjectiveConfig()
        obs = expected_observations(m, (px, py, pt), s, ocfg.p_block, ocfg.p_free_target)
        pm = PerturbedMap(m, obs, ocfg.gp_noise)
        mi = np.asarray(pm.mi(pts)).reshape(ny, nx)
        peak = float(np.abs(mi).max())
        scaled = np.zeros_like(mi) if peak == 0 else np.clip(mi / peak, 0.0, 1.0)
        write_pgm(out / "mi.pgm", np.flipud(np.rint(scaled * 255.0).astype(np.uint8)),
                  "pointwise MI: 0..255 maps 0..max, negatives clipped")
    return 0


COMPARE_FIELDS = ("method", "seed", "mean_occ", "max_occ",
                  "median_plan_s", "mean_plan_s", "max_plan_s")


def _read_run_dir(d: Path) -> dict:
    report = json.loads((d / "run_report.json").read_text())
    entropy = []
    with open(d / "metrics.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            entropy.append((int(row["iteration"]), float(row["map_entropy_bits"])))
    times = []
    tpath = d / "timings.csv"
    if tpath.exists():
        with open(tpath, newline="") as fh:
            times = [float(r["plan_time_s"]) for r in csv.DictReader(fh)]
    else:
        times = [float(t) for t in report.get("plan_times_s", [])]
    report["_entropy_series"] = entropy
    report["_plan_times"] = times
    return report


def cmd_compare(args) -> int:
    dirs = [Path(d) for d in args.run_dirs]
    if len(dirs) < 2:
        raise UsageError("compare needs at least 2 run directories")
    for d in dirs:
        if not (d / "run_report.json").exists():
            raise UsageError(f"not a run directory (missing run_report.json): {d}")
    reports = [_read_run_dir(d) for d in dirs]
    hashes = {r.get("env_sha256", "") for r in reports}
    if len(hashes) > 1:
        raise UsageError(
            "refusing to compare runs over different environments "
            f"(distinct env hashes: {sorted(hashes)})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in reports:
        t = r["_plan_times"] or [0.0]
        rows.append([r["method"], r["seed"],
                     repr(float(r["mean_occ"])), repr(float(r["max_occ"])),
                     repr(float(np.median(t))), repr(float(np.mean(t))),
                     repr(float(np.max(t)))])
    rows.sort(key=lambda row: (row[0], row[1]))
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_FIELDS)
        w.writerows(rows)
    with open(out / "entropy_series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "iteration", "map_entropy_bits"])
        for r in sorted(reports, key=lambda r: (r["method"], r["seed"])):
            for it, h in r["_entropy_series"]:
                w.writerow([r["method"], r["seed"], it, repr(h)])
    print(f"wrote {out / 'compare.csv'} ({len(rows)} runs)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nbp", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("explore", help="run an exploration")
    ex.add_argument("--config", help="JSON config file (strict keys)")
    ex.add_argument("--env", help="environment PGM path or builtin name (rooms, intel-crop)")
    ex.add_argument("--method", help=f"one of: {', '.join(METHODS)}")
    ex.add_argument("--seed", type=int)
    ex.add_argument("--iterations", type=int)
    ex.add_argument("--out", help="output directory")
    ex.set_defaults(fn=cmd_explore)

    rn = sub.add_parser("render", help="render rasters from a map snapshot")
    rn.add_argument("--snapshot", required=True, help="map snapshot JSON")
    rn.add_argument("--out", required=True, help="output directory")
    rn.add_argument("--resolution", type=float, default=0.25)
    rn.add_argument("--pose", help="x,y,theta for an MI raster")
    rn.set_defaults(fn=cmd_render)

    cp = sub.add_parser("compare", help="aggregate completed run directories")
    cp.add_argument("run_dirs", nargs="+")
    cp.add_argument("--out", default=".", help="output directory for compare.csv")
    cp.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    level = {"debug": logging.DEBUG, "info": logging.INFO,
             "warn": logging.WARNING}.get(os.environ.get("NBP_LOG", "warn").lower(),
                                          logging.WARNING)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PgmFormatError as e:
        print(f"error: malformed PGM: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
