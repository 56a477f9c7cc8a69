"""Command-line entry points: train, track, inflate, replay, assist-serve."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import report
from .conformal import (
    CalibrationConfig,
    calibrate_scores,
    load_bounds,
    quantile_index,
    save_bounds,
    save_dataset,
)
from .config import RunConfig, parse_config, save_config
from .control import tube_radius
from .gridmap import buffer_cells, inflate, load_grid, save_grid
from .simulator import generate_training, load_runlog, metrics, run_tracking_experiment, save_runlog


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else parse_config({})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "out", None):
        from dataclasses import replace
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _outdir(cfg)
    data = generate_training(cfg.disturbance, lap_times=cfg.training.lap_times,
                             duration=cfg.training.duration, dt=cfg.limits.dt,
                             gains=cfg.gains, limits=cfg.limits,
                             seed=cfg.seeds.sim, lookahead=cfg.training.lookahead)
    save_dataset(out / "training.csv", data.tuples)
    cal = CalibrationConfig(epsilon=cfg.epsilon, subsample=cfg.training.subsample,
                            seed=cfg.seeds.calibration)
    scores = calibrate_scores(data.tuples, cal, rho_dz=cfg.limits.rho_dz)
    bounds = scores.bounds()
    np.savetxt(out / "scores.csv",
               np.column_stack([scores.matched, scores.unmatched]),
               delimiter=",", header="matched,unmatched", comments="")
    save_bounds(out / "bounds.json", bounds, seed=cal.seed, digest=scores.dataset_digest,
                extra={"skipped_dead_zone": scores.skipped_dead_zone})
    save_config(out / "config.yaml", cfg)
    report.save_figure(report.scores_figure(scores.matched, scores.unmatched,
                                            bounds, cfg.epsilon), out / "scores.png")

    q = quantile_index(len(scores.matched), cfg.epsilon)
    print(f"tuples: {len(data.tuples)} (skipped {scores.skipped_dead_zone} in dead zone)")
    print(f"quantile index: {q} of {len(scores.matched) + 1}")
    if math.isinf(bounds.z_matched) or math.isinf(bounds.z_unmatched):
        print(f"insufficient samples for epsilon {cfg.epsilon}: "
              f"need quantile index <= {len(scores.matched)}", file=sys.stderr)
        return 1
    r0 = tube_radius(0.0, bounds, cfg.tube)
    r_dt = tube_radius(cfg.tube.dt, bounds, cfg.tube)
    print(f"Z_matched:   {bounds.z_matched:.6g}")
    print(f"Z_unmatched: {bounds.z_unmatched:.6g}")
    print(f"r0:          {r0:.6g} m")
    print(f"r_dT:        {r_dt:.6g} m")
    print(f"wrote {out / 'bounds.json'}")
    return 0


def _resolve_bounds(cfg: RunConfig, args):
    candidates = []
    if getattr(args, "bounds", None):
        candidates.append(Path(args.bounds))
    if cfg.bounds_file:
        candidates.append(Path(cfg.bounds_file))
    candidates.append(Path(cfg.output_dir) / "bounds.json")
    for c in candidates:
        if c.is_file():
            return load_bounds(c), c
    tried = ", ".join(str(c) for c in candidates)
    raise SystemExit(f"no calibration bounds found (tried: {tried}); "
                     f"run `safenav train` first or pass --bounds")


def cmd_track(args) -> int:
    cfg = _load_config(args)
    out = _outdir(cfg)
    bounds, bounds_path = _resolve_bounds(cfg, args)
    if abs(bounds.epsilon - cfg.epsilon) > 1e-12:
        print(f"note: bounds calibrated at epsilon {bounds.epsilon}, "
              f"config asks {cfg.epsilon}; using the bounds as given", file=sys.stderr)
    scenario = cfg.scenario()
    log = run_tracking_experiment(scenario, bounds=bounds)
    m = metrics(log, scenario.obstacles)
    save_runlog(out / "runlog.csv", log)
    with open(out / "metrics.json", "w") as fh:
        json.dump(m.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_config(out / "config.yaml", cfg)
    report.save_figure(report.trajectory_figure(log, scenario.obstacles,
                                                lap_time=scenario.lap_time),
                       out / "trajectory.png")
    report.save_figure(report.errors_figure(log), out / "errors.png")
    print(f"bounds: {bounds_path}")
    print(f"steps: {m.steps}, contacts: {m.contact_count}, "
          f"lethal entries: {m.lethal_entries}")
    print(f"rms error: {m.rms_position_error:.4g} m, min clearance: {m.min_clearance:.4g} m")
    print(f"certified cycles: {m.certified_cycles}, "
          f"certificate violations: {m.certificate_violations}")
    print(f"wrote {out / 'runlog.csv'}, {out / 'metrics.json'}")
    return 0 if m.contact_count == 0 else 1


def cmd_inflate(args) -> int:
    grid = load_grid(args.input)
    if args.n_eps is not None:
        n_eps = args.n_eps
    else:
        cfg = _load_config(args)
        bounds, _ = _resolve_bounds(cfg, args)
        r_dt = tube_radius(cfg.tube.dt, bounds, cfg.tube)
        n_eps = buffer_cells(r_dt, args.r_ego, grid.geometry.resolution)
    cfg = _load_config(args) if args.config else parse_config({})
    cm = inflate(grid, n_eps, alpha_shift=cfg.alpha_shift, lethal=cfg.weights.cap)
    save_grid(args.output, cm)
    if args.figure:
        report.save_figure(report.costmap_figure(cm), args.figure)
    print(f"inflated with buffer {n_eps} cells, lethal {cm.lethal_threshold:g}; "
          f"wrote {args.output}")
    return 0


def cmd_replay(args) -> int:
    log = load_runlog(args.log)
    cfg = _load_config(args)
    out = _outdir(cfg)
    obstacles = cfg.obstacles
    m = metrics(log, obstacles)
    with open(out / "metrics.json", "w") as fh:
        json.dump(m.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    report.save_figure(report.trajectory_figure(log, obstacles,
                                                lap_time=cfg.experiment.lap_time),
                       out / "trajectory.png")
    report.save_figure(report.errors_figure(log), out / "errors.png")
    print(json.dumps(m.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from .service import serve
    cfg = _load_config(args)
    bounds, bounds_path = _resolve_bounds(cfg, args)
    scores_path = Path(bounds_path).with_name("scores.csv")
    port = args.port if args.port is not None else cfg.serve.port
    print(f"serving on port {port} (bounds: {bounds_path})")
    return serve(cfg, bounds, port=port,
                 scores_path=scores_path if scores_path.is_file() else None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safenav",
        description="Safe navigation lab: calibrate discrepancy bounds, inflate "
                    "cost maps, and run tube-aware tracking or driver assist.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, bounds=False):
        p.add_argument("--config", help="run configuration YAML")
        p.add_argument("--seed", type=int, help="override all seeds from this base value")
        p.add_argument("--out", help="output directory (overrides config)")
        if bounds:
            p.add_argument("--bounds", help="calibration bounds JSON")

    p = sub.add_parser("train", help="generate training data and calibrate bounds")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the closed-loop tracking experiment")
    common(p, bounds=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("inflate", help="inflate an occupancy grid into a cost map")
    p.add_argument("--in", dest="input", required=True, help="occupancy grid file")
    p.add_argument("--out-grid", dest="output", required=True, help="cost map file")
    p.add_argument("--n-eps", type=int, help="buffer size in cells (else derived from bounds)")
    p.add_argument("--r-ego", type=float, default=0.39, help="vehicle radius for derived buffers")
    p.add_argument("--figure", help="optional rendered PNG")
    common(p, bounds=True)
    p.set_defaults(func=cmd_inflate)

    p = sub.add_parser("replay", help="recompute metrics and figures from a run log")
    p.add_argument("--log", required=True, help="run log CSV")
    common(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("assist-serve", help="run the live driver-assist service")
    common(p, bounds=True)
    p.add_argument("--port", type=int, help="listen port (overrides config)")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
