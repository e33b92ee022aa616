"""Command-line driver: ``occslam {simulate,run,slice,score,compare}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 regression detected by ``compare``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline, sim
from .occupancy import OccupancySubmap, export_slice

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_REGRESSION = 4


def _parse_sets(items) -> dict[str, dict[str, str]]:
    doc: dict[str, dict[str, str]] = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not section or not name:
            raise pipeline.ConfigError(f"--set expects section.key=value, got {item!r}")
        doc.setdefault(section.strip(), {})[name.strip()] = value
    return doc


def _overrides(args) -> dict[str, dict[str, str]]:
    doc = _parse_sets(getattr(args, "set", None))
    shortcuts = [("scene", "scene", "kind"), ("scene_file", "scene", "path"),
                 ("trajectory", "trajectory", "kind"), ("resolution", "submap", "resolution"),
                 ("dimension", "submap", "dimension"), ("frame_rate", "pipeline", "frame_rate"),
                 ("backend", "pipeline", "backend")]
    for attr, section, key in shortcuts:
        v = getattr(args, attr, None)
        if v is not None:
            doc.setdefault(section, {})[key] = str(v)
    if getattr(args, "scene_file", None):
        doc.setdefault("scene", {})["kind"] = "file"
    return doc


def _config(args) -> pipeline.RunConfig:
    doc = _overrides(args)
    if args.config:
        cfg = pipeline.load_config(args.config, doc)
    else:
        cfg = pipeline.config_from_mapping(doc)
    if args.seed is not None:
        cfg = pipeline.config_with_seed(cfg, args.seed)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config(args)
    run = pipeline.simulate(cfg)
    out = sim.save_run(run, args.output, extra={"seed": cfg.seed})
    pipeline.write_config(cfg, out / "config.ini")
    print(f"wrote {len(run.scans)} scans to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    run = sim.load_run(args.run_dir) if args.run_dir else None
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    result = pipeline.run_pipeline(cfg, run=run, output=out)
    m = result.metrics
    print(f"frames {m['frames']}  submaps {len(m['submaps'])}  "
          f"ATE final {m['ate_final']:.4f} m  causal {m['ate_causal']:.4f} m  "
          f"odometry {m['ate_odometry']:.4f} m  score {m['score_final']:.1f}")
    return EXIT_OK


def cmd_slice(args) -> int:
    try:
        submap = OccupancySubmap.load(args.submap)
    except (OSError, KeyError, ValueError) as exc:
        raise pipeline.ConfigError(f"cannot read submap {args.submap}: {exc}") from exc
    sl = export_slice(submap, args.height, args.output)
    print(f"slice {sl.values.shape[1]}x{sl.values.shape[0]} at z={args.height} written to {args.output}")
    return EXIT_OK


def cmd_score(args) -> int:
    for p in (args.estimate, args.groundtruth):
        if not Path(p).is_file():
            raise pipeline.ConfigError(f"trajectory file {p!r} does not exist")
    t_est, est = sim.read_tum(args.estimate)
    t_gt, gt = sim.read_tum(args.groundtruth)
    if len(t_est) != len(t_gt) or (len(t_est) and abs(t_est - t_gt).max() > 1e-6):
        raise pipeline.ConfigError("estimate and ground truth timestamps do not match")
    res = sim.ate(est, gt)
    report = {"ate_rmse": res.rmse, "score": sim.hilti_score(res.errors), "n": len(res.errors)}
    print(json.dumps(report, indent=1))
    return EXIT_OK


def _read_report(path) -> tuple[dict, dict | None]:
    p = Path(path)
    metrics = p / "metrics.json" if p.is_dir() else p
    if not metrics.is_file():
        raise pipeline.ConfigError(f"no metrics report at {path}")
    timings = metrics.with_name("timings.json")
    t = json.loads(timings.read_text()) if timings.is_file() else None
    return json.loads(metrics.read_text()), t


def cmd_compare(args) -> int:
    base, bt = _read_report(args.baseline)
    cand, ct = _read_report(args.candidate)
    if args.odometry_baseline:
        base, bt = pipeline.odometry_only_metrics(base), None
    try:
        cmp = pipeline.compare_runs(base, cand, bt, ct, ate_tolerance=args.tolerance)
    except pipeline.IncomparableRuns as exc:
        raise pipeline.ConfigError(str(exc)) from exc
    print(cmp.table())
    return EXIT_REGRESSION if cmp.regression else EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser, need_seed: bool):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, required=need_seed)
    p.add_argument("--output", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one configuration entry (repeatable)")
    p.add_argument("--scene", choices=["loop_hall", "box_room", "corridor"])
    p.add_argument("--scene-file", dest="scene_file", help="JSON scene description")
    p.add_argument("--trajectory", choices=["rectangle", "line"])
    p.add_argument("--resolution", type=float)
    p.add_argument("--dimension", type=float)
    p.add_argument("--frame-rate", dest="frame_rate", type=float)
    p.add_argument("--backend", choices=["python", "cython"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="occslam", description="Occupancy-submap LiDAR SLAM on synthetic runs.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic run directory")
    _add_config_flags(p, need_seed=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the full pipeline and write trajectories, maps and metrics")
    _add_config_flags(p, need_seed=True)
    p.add_argument("--run-dir", dest="run_dir", help="use a run written by 'simulate' instead of simulating")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("slice", help="export a horizontal slice of a saved submap")
    p.add_argument("submap", help="submap .npz file")
    p.add_argument("--height", type=float, default=0.0, help="slice height in the submap frame (m)")
    p.add_argument("--output", required=True, help="output prefix (.pgm and .csv are appended)")
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("score", help="ATE and score of a TUM trajectory against ground truth")
    p.add_argument("estimate")
    p.add_argument("groundtruth")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compare", help="compare two run reports")
    p.add_argument("baseline", help="run directory or metrics.json")
    p.add_argument("candidate", help="run directory or metrics.json")
    p.add_argument("--tolerance", type=float, default=0.1, help="relative ATE slack before flagging a regression")
    p.add_argument("--odometry-baseline", action="store_true",
                   help="use the baseline's odometry-only trajectory as the reference")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
