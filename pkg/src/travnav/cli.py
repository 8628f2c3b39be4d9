"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import OracleUnavailable, PlanningError, ValidationError

log = logging.getLogger("travnav")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", type=Path, help="YAML configuration file")
    p.add_argument("--out", type=Path, help="output directory")


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ValidationError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError("config must be a mapping")
    return data


def _split_config(raw: dict):
    """(SimConfig, oracle section) from a raw config mapping."""
    from .sim.episode import config_from_dict
    raw = dict(raw)
    oracle = raw.pop("oracle", None) or {}
    return config_from_dict(raw), oracle


def _backend_factory(oracle: dict, selector: str | None):
    from .llm_client import LlmConfig, LlmOracle
    backend = selector or oracle.get("backend", "mock")
    if backend == "mock":
        return None
    if backend != "llm":
        raise ValidationError(f"unknown oracle backend {backend!r} (mock | llm)")
    llm = oracle.get("llm") or {}
    try:
        cfg = LlmConfig(**llm)
    except TypeError as exc:
        raise ValidationError(f"bad llm config: {exc}") from exc
    return lambda world, seed: LlmOracle(cfg)


def _out_dir(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _parse_floats(text: str, n: tuple[int, ...], name: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ValidationError(f"--{name}: expected comma-separated numbers, got {text!r}") from None
    if len(vals) not in n:
        raise ValidationError(f"--{name}: expected {' or '.join(map(str, n))} values")
    return vals


# -- subcommands -----------------------------------------------------------

def cmd_run(args) -> int:
    from .sim import load_world, run_episode
    cfg, oracle = _split_config(_load_config(args.config))
    world = load_world(args.world)
    factory = _backend_factory(oracle, args.backend)
    out = _out_dir(args, "run_out")
    res = run_episode(world, cfg, args.seed, out, backend=factory(world, args.seed) if factory else None,
                      time_limit=args.time_limit)
    _write_json(out / "episode.json", res.to_dict())
    print(json.dumps(res.to_dict(), sort_keys=True))
    return 0


def _seed_list(text: str) -> list[int]:
    try:
        if "-" in text:
            a, b = text.split("-")
            return list(range(int(a), int(b) + 1))
        if "," in text:
            return [int(v) for v in text.split(",")]
        return list(range(int(text)))
    except ValueError:
        raise ValidationError(f"--seeds: expected N, A-B or a comma list, got {text!r}") from None


def cmd_suite(args) -> int:
    from .sim import load_world, run_suite
    from .sim.episode import summary_table
    cfg, oracle = _split_config(_load_config(args.config))
    worlds = [load_world(w) for w in args.worlds.split(",")]
    seeds = [args.seed + s for s in _seed_list(args.seeds)]
    out = _out_dir(args, "suite_out")
    summary = run_suite(worlds, seeds, cfg, out, _backend_factory(oracle, args.backend))
    print(summary_table(summary), end="")
    return 0


def cmd_plan(args) -> int:
    from .mapping import compress_pillars, load_map
    from .planner import PlannerParams, PoseSE2, RobotDims, rrt_star
    from .sim.episode import _build
    raw = _load_config(args.config)
    vmap = load_map(args.map)
    params = _build(PlannerParams, {**(raw.get("planner") or {}), "seed": args.seed,
                                    **({"max_iters": args.iters} if args.iters is not None else {})})
    robot = raw.get("robot") or {}
    dims = RobotDims(robot.get("length", 0.6), robot.get("width", 0.4))
    start = PoseSE2(*_parse_floats(args.start, (2, 3), "start"))
    goal = PoseSE2(*_parse_floats(args.goal, (2, 3), "goal"))
    extent = None
    if args.extent:
        extent = tuple(int(v) for v in _parse_floats(args.extent, (4,), "extent"))
    grid = compress_pillars(vmap, vmap.origin[2], vmap.origin[2] + vmap.resolution * 0.5, extent=extent)
    path = rrt_star(start, goal, grid.bounds, grid, params, dims)
    out = _out_dir(args, "plan_out")
    doc = path.to_json()
    doc["cost_history"] = path.cost_history
    _write_json(out / "path.json", doc)
    print(json.dumps({"cost": path.cost, "best_effort": path.best_effort, "poses": len(path.poses),
                      "length": path.length}))
    return 0


def cmd_segment(args) -> int:
    from .segmentation import load_png, number_masks, save_png, save_registry, slic
    if not args.image.exists():
        raise ValidationError(f"image not found: {args.image}")
    img = load_png(args.image)
    labels = slic(img, args.k, args.compactness, args.iters)
    annotated, reg = number_masks(labels, img)
    out = _out_dir(args, "segment_out")
    save_png(annotated, out / "annotated.png")
    np.save(out / "labels.npy", labels)
    save_registry(reg, out / "regions.json")
    print(json.dumps({"regions": len(reg), "k": args.k}))
    return 0


def cmd_bench_risk(args) -> int:
    from .bench import bench_risk
    report = bench_risk(args.evaluations, seed=args.seed)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        _write_json(args.out / "bench_risk.json", report)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_export_map(args) -> int:
    """Run an episode and export its final map snapshot plus a tidy grid CSV,
    or export the grid of an existing snapshot."""
    from .mapping import compress_pillars, load_map, save_map
    out = _out_dir(args, "map_out")
    if args.map:
        vmap = load_map(args.map)
    else:
        from .sim import load_world, run_episode
        cfg, _ = _split_config(_load_config(args.config))
        res = run_episode(load_world(args.world), cfg, args.seed, out)
        vmap = res.final_map
        save_map(vmap, out / "map.json")
    grid = compress_pillars(vmap, vmap.origin[2], vmap.origin[2] + vmap.resolution * 0.5)
    with open(out / "grid.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "cvar", "count", "observed"])
        h, wd = grid.shape
        for r in range(h):
            for c in range(wd):
                w.writerow([repr(grid.origin[0] + (c + 0.5) * grid.resolution),
                            repr(grid.origin[1] + (r + 0.5) * grid.resolution),
                            repr(float(grid.cvar[r, c])), repr(float(grid.count[r, c])),
                            int(grid.observed[r, c])])
    print(json.dumps({"cells": len(vmap.cells), "revision": vmap.revision, "grid": list(grid.shape)}))
    return 0


def cmd_import_map(args) -> int:
    """Validate a snapshot and rewrite it in canonical form."""
    from .mapping import load_map, save_map
    vmap = load_map(args.map)
    info = {"cells": len(vmap.cells), "revision": vmap.revision, "resolution": vmap.resolution}
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        save_map(vmap, args.out / "map.json")
    print(json.dumps(info))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="travnav", description="Risk-aware traversability navigation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("run", help="run one episode")
    s.add_argument("--world", required=True, help="world JSON file or canonical name")
    s.add_argument("--backend", choices=("mock", "llm"))
    s.add_argument("--time-limit", type=float)
    _common(s)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="run worlds x seeds and tabulate successes")
    s.add_argument("--worlds", default="corridor,forest", help="comma-separated worlds")
    s.add_argument("--seeds", default="10", help="N (0..N-1), A-B, or comma list; offset by --seed")
    s.add_argument("--backend", choices=("mock", "llm"))
    _common(s)
    s.set_defaults(func=cmd_suite)

    s = sub.add_parser("plan", help="RRT* over a saved map snapshot")
    s.add_argument("--map", type=Path, required=True)
    s.add_argument("--start", required=True, help="x,y[,psi]")
    s.add_argument("--goal", required=True, help="x,y[,psi]")
    s.add_argument("--iters", type=int)
    s.add_argument("--extent", help="ix0,iy0,width,height in cells (default: observed bbox)")
    _common(s)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("segment", help="SLIC superpixels and numbered markers for a PNG")
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--k", type=int, default=48)
    s.add_argument("--compactness", type=float, default=10.0)
    s.add_argument("--iters", type=int, default=10)
    _common(s)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("bench-risk", help="quantile fast-path accuracy and speed report")
    s.add_argument("--evaluations", type=int, default=1_000_000)
    _common(s)
    s.set_defaults(func=cmd_bench_risk)

    s = sub.add_parser("export-map", help="export a map snapshot and its risk grid as CSV")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--world", help="run an episode on this world and export its final map")
    g.add_argument("--map", type=Path, help="existing snapshot to export")
    _common(s)
    s.set_defaults(func=cmd_export_map)

    s = sub.add_parser("import-map", help="validate a map snapshot (and rewrite it to --out)")
    s.add_argument("--map", type=Path, required=True)
    _common(s)
    s.set_defaults(func=cmd_import_map)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _load_config(args.config)  # every subcommand rejects a missing or malformed config
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PlanningError, OracleUnavailable) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any other failure at runtime
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
