"""Command-line entry point: ``patchflow <command> [options]``."""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import ExperimentConfig, load_config
from .errors import ConfigError, SolverError
from .grid import make_grid


_SCENARIO = {"run": "single", "pair": "pair", "triple": "intermediate_triple", "sweep": "sweep"}


def _parser():
    ap = argparse.ArgumentParser(prog="patchflow", description="Density-patch flow experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "single solution"), ("pair", "two solutions and their difference"),
                        ("triple", "pair compared through the intermediate solution"),
                        ("sweep", "pair runs over a perturbation amplitude sweep")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="YAML experiment file (defaults otherwise)")
        p.add_argument("--out", type=Path, help=f"output directory (default ${harness.OUT_ENV}/<scenario>)")
        p.add_argument("--threads", type=int, help="worker processes for sweeps")
        p.add_argument("--seed", type=int)
    p = sub.add_parser("eig", help="Poincare constant and decay rate of a grid")
    p.add_argument("--config", type=Path)
    p = sub.add_parser("verify", help="recompute the checks of a finished run")
    p.add_argument("directory", type=Path)
    return ap


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    want = _SCENARIO[args.command]
    if cfg.scenario != want:
        if args.config:
            raise ConfigError([f"scenario: command {args.command!r} needs {want!r}, file has {cfg.scenario!r}"])
        cfg = replace(cfg, scenario=want)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "eig":
            cfg = load_config(args.config) if args.config else ExperimentConfig()
            g = make_grid(cfg.grid.nx, cfg.grid.ny, cfg.grid.lx, cfg.grid.ly)
            consts, beta1 = harness.domain_rate(g, cfg.fluid.mu, cfg.fluid.rho_star)
            print(f"lambda1 = {consts.lambda1:.10g}")
            print(f"poincare_constant = {consts.poincare_constant:.10g}")
            print(f"beta1 = {beta1:.10g}")
            print(f"t_end(auto) = {harness.resolve_t_end(cfg, beta1):.10g}")
            return 0
        if args.command == "verify":
            checks, consistent = harness.verify(args.directory)
            print(harness.format_checks(checks))
            print("stored verdicts reproduced" if consistent else "stored verdicts NOT reproduced")
            return 0 if consistent and all(c.passed for c in checks) else 1
        cfg = _config(args)
        if args.command == "sweep":
            res = harness.run_sweep(cfg, args.out)
        else:
            res = harness.run_scenario(cfg, args.out)
        print(harness.format_checks(res.checks))
        print("overall:", "PASS" if res.passed else "FAIL")
        return 0 if res.passed else 1
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (SolverError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
