"""Command-line entry point: ``robust-bce {simulate,solve,eval,compare}``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
the estimation itself fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .errors import EstimationError, ModeConfigMismatch
from .evaluation import compare, summarize
from .io import read_observations, read_trajectory, write_json, write_labels, write_observations, write_rows, write_trajectory
from .pipeline import parse_mode, run
from .scenario import ScenarioConfig, generate, oracle_error

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robust-bce", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode: bool = False):
        sp.add_argument("--config", type=Path, help="TOML run configuration")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the configured seed(s)")
        if mode:
            sp.add_argument("--mode", help="estimator mode (l2, dcs, mm, bce, bce-ad)")

    common(sub.add_parser("simulate", help="generate observations, truth and labels"))
    sp = sub.add_parser("solve", help="estimate a trajectory from an observation file")
    common(sp, mode=True)
    sp.add_argument("--observations", type=Path, help="observation CSV (default: OUT/observations.csv)")
    sp = sub.add_parser("eval", help="summarise errors of a trajectory against truth")
    common(sp)
    sp.add_argument("--trajectory", type=Path, help="default: OUT/trajectory.csv")
    sp.add_argument("--truth", type=Path, help="default: OUT/truth.csv")
    sp = sub.add_parser("compare", help="run several modes over several seeds")
    common(sp)
    sp.add_argument("--modes", help="comma-separated modes overriding the config")
    return p


def _config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    if not args.config.is_file():
        raise UsageError(f"config file {args.config} not found")
    return load_config(args.config)


def _simulate(args, cfg: RunConfig) -> None:
    sc = cfg.scenario if args.seed is None else replace(cfg.scenario, seed=args.seed)
    scenario = generate(ScenarioConfig(**sc.to_dict()))
    args.out.mkdir(parents=True, exist_ok=True)
    write_observations(args.out / "observations.csv", scenario.observations, sc.dim)
    write_trajectory(args.out / "truth.csv", scenario.truth)
    write_labels(args.out / "labels.csv", scenario.labels)
    write_json(args.out / "scenario.json", sc.to_dict())


def _solve(args, cfg: RunConfig) -> None:
    pipeline = cfg.pipeline
    if args.mode is not None:
        pipeline = replace(pipeline, mode=parse_mode(args.mode))
    if args.seed is not None:
        pipeline = replace(pipeline, vb=replace(pipeline.vb, seed=args.seed))
    obs_path = args.observations or args.out / "observations.csv"
    if not obs_path.is_file():
        raise UsageError(f"observation file {obs_path} not found")
    observations = read_observations(obs_path)
    X, trace = run(observations, pipeline)
    args.out.mkdir(parents=True, exist_ok=True)
    write_trajectory(args.out / "trajectory.csv", X)
    write_json(args.out / "trace.json", trace.to_dict())


def _eval(args, cfg: RunConfig) -> None:
    traj = args.trajectory or args.out / "trajectory.csv"
    truth = args.truth or args.out / "truth.csv"
    for path in (traj, truth):
        if not path.is_file():
            raise UsageError(f"{path} not found")
    s = summarize(oracle_error(read_trajectory(truth), read_trajectory(traj)))
    args.out.mkdir(parents=True, exist_ok=True)
    write_rows(args.out / "summary.csv", ["median", "variance", "max", "count"], [[s.median, s.variance, s.max, s.count]])
    print(f"median {s.median:.4f} m  variance {s.variance:.4f} m^2  max {s.max:.4f} m  count {s.count}")


def _compare(args, cfg: RunConfig) -> None:
    modes = [parse_mode(m) for m in args.modes.split(",")] if args.modes else cfg.modes
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    result = compare(cfg.scenario, modes, seeds, cfg.pipeline, out=args.out)
    for mode in modes:
        s = result.summaries[mode]
        text = "failed" if s is None else f"median {s.median:.4f}  variance {s.variance:.4f}  max {s.max:.4f}"
        print(f"{mode:7s} {text}")


COMMANDS = {"simulate": _simulate, "solve": _solve, "eval": _eval, "compare": _compare}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
        if getattr(args, "mode", None) is not None:
            parse_mode(args.mode)
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, ModeConfigMismatch) as exc:
        print(f"robust-bce: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (EstimationError, ArithmeticError, ValueError, OSError) as exc:
        print(f"robust-bce: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
