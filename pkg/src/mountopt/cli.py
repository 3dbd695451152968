"""Command-line entry point: ``mountopt <command> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import yaml

from .bohb import WORKERS_ENV, read_history
from .exceptions import MountoptError
from .robot import DesignParams, load_robot

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_EMPTY = 3


def load_design(text: str | None) -> DesignParams:
    """``alpha=30deg,x=0.1`` inline, or a YAML/JSON file holding the same keys."""
    if not text:
        return DesignParams()
    p = Path(text)
    if p.is_file():
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise MountoptError(f"{text}: expected a mapping of design parameters")
        return DesignParams.from_mapping(data.get("omega", data))
    return DesignParams.parse(text)


def _workers(args) -> int | None:
    if getattr(args, "workers", None) is not None:
        return args.workers
    raw = os.environ.get(WORKERS_ENV)
    return int(raw) if raw else None


def _experiment_config(args):
    from .experiment import ExperimentConfig
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {k: v for k, v in (("seed", args.seed), ("output_dir", args.out),
                                   ("mode", args.mode), ("robot", args.robot)) if v is not None}
    if args.flat:
        overrides["flat"] = True
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def cmd_optimize(args) -> int:
    from .experiment import run_experiment
    cfg = _experiment_config(args)
    rep = run_experiment(cfg, workers=_workers(args))
    print(Path(cfg.output_dir, "report.txt").read_text(), end="")
    return EXIT_OK if rep.ranking else EXIT_EMPTY


def cmd_resume(args) -> int:
    from .experiment import ExperimentConfig, run_experiment
    run_dir = Path(args.run)
    history = run_dir / "history.jsonl"
    if not history.exists() or not read_history(history):
        print(f"nothing to resume in {run_dir}", file=sys.stderr)
        return EXIT_EMPTY
    cfg = dataclasses.replace(ExperimentConfig.load(run_dir / "config.yaml"),
                              output_dir=str(run_dir))
    rep = run_experiment(cfg, resume_from=history, workers=_workers(args))
    print((run_dir / "report.txt").read_text(), end="")
    return EXIT_OK if rep.ranking else EXIT_EMPTY


def cmd_report(args) -> int:
    from .experiment import report
    run_dir = Path(args.run)
    history = Path(args.history) if args.history else run_dir / "history.jsonl"
    tests = run_dir / "test.jsonl"
    rep = report(history, tests if tests.exists() else None, args.out or run_dir)
    print(Path(args.out or run_dir, "report.txt").read_text(), end="")
    return EXIT_OK if rep.ranking else EXIT_EMPTY


def cmd_evaluate(args) -> int:
    from .controller import ControllerGains, episodes_for, tune_policy
    from .feasibility import check_design
    from .robot import apply_design
    from .sim import run_episode
    from .controller import BoundController

    robot = apply_design(load_robot(args.robot), load_design(args.design))
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    if not tasks or args.episodes < 1:
        print("no tasks or episodes to evaluate", file=sys.stderr)
        return EXIT_EMPTY
    if not check_design(robot).feasible:
        print("design is infeasible (tipover); skipping rollouts", file=sys.stderr)
        return EXIT_INFEASIBLE
    gains = ControllerGains()
    if args.budget:
        gains = tune_policy(robot, tasks, args.budget, seed=args.seed).gains
    ctrl = BoundController(robot, gains)
    counts = {t: [0, 0] for t in tasks}
    sink = open(args.records, "w") if args.records else None
    try:
        for ep in episodes_for(tasks, args.episodes, seed=args.seed):
            res = run_episode(robot, ep, ctrl)
            counts[ep.task][0] += res.success
            counts[ep.task][1] += 1
            if sink:
                sink.write(json.dumps(res.to_dict(), sort_keys=True) + "\n")
    finally:
        if sink:
            sink.close()
    for t, (k, n) in counts.items():
        print(f"{t}: {k}/{n} = {100.0 * k / n:.1f}%")
    return EXIT_OK


def cmd_manipulability(args) -> int:
    from .manipulability import WorkspaceGrid, export_heatmap, global_manipulability
    from .robot import apply_design
    robot = apply_design(load_robot(args.robot), load_design(args.design))
    field = global_manipulability(robot, WorkspaceGrid(spacing=args.spacing), rng_seed=args.seed)
    if args.out:
        export_heatmap(field, args.out)
    print(f"mu = {field.mu:.6f} ({field.reachable} reachable poses)")
    return EXIT_OK


def cmd_feasibility(args) -> int:
    from .feasibility import check_design
    rep = check_design(load_robot(args.robot), load_design(args.design))
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK if rep.feasible else EXIT_INFEASIBLE


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mountopt", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def robot_design(p):
        p.add_argument("--robot", default="fmm_franka", help="robot file or bundled name")
        p.add_argument("--design", help="alpha=30deg,x=0.1 or a YAML file; default tabletop")

    p = sub.add_parser("optimize", help="run BOHB, test the top designs, write the report")
    p.add_argument("--config", help="experiment YAML")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("task", "manipulability"))
    p.add_argument("--robot")
    p.add_argument("--flat", action="store_true",
                   help="manipulability mode: full-resolution grid at every budget")
    p.add_argument("--workers", type=int, help=f"worker processes (env {WORKERS_ENV})")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("resume", help="continue an interrupted run from its history")
    p.add_argument("run", help="run directory holding config.yaml and history.jsonl")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("report", help="regenerate report files from a run directory")
    p.add_argument("run")
    p.add_argument("--history", help="history JSONL (default <run>/history.jsonl)")
    p.add_argument("--out", help="where to write the report (default: the run directory)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("evaluate", help="per-task success rates of one design")
    robot_design(p)
    p.add_argument("--tasks", default="RandomGoal,RandomObstacle")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=0, help="tuning episodes; 0 keeps default gains")
    p.add_argument("--records", help="write one JSON line per episode here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("manipulability", help="global manipulability and heatmap CSV")
    robot_design(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing", type=float, default=0.1)
    p.add_argument("--out", help="heatmap CSV path")
    p.set_defaults(func=cmd_manipulability)

    p = sub.add_parser("feasibility", help="tipover check; exit 2 when infeasible")
    robot_design(p)
    p.set_defaults(func=cmd_feasibility)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MountoptError, ValueError, OSError) as exc:
        print(f"mountopt {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
