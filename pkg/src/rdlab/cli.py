"""Command line entry point: ``lab run | validate | list-experiments``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments

log = logging.getLogger("rdlab")

EXIT_HARD_FAILURE = 1
EXIT_CONFIG = 2
EXIT_CERTIFICATION = 3


def _cmd_run(args) -> int:
    try:
        res, out = experiments.run_experiment(args.config, Path(args.out) / Path(args.config).stem if args.out else None)
    except experiments.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except experiments.MeshCertificationError as exc:
        print(f"mesh certification failed: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATION
    for c in res.checks:
        tag = "PASS" if c.passed else ("FAIL" if c.hard else "fail")
        meas = "n/a" if c.measured is None else f"{c.measured:.6g}"
        print(f"[{tag}] criterion {c.criterion}: {c.name} = {meas} (want {c.threshold})")
    for n in res.notes:
        print(f"  note: {n}")
    print(f"reports written to {out}")
    return EXIT_HARD_FAILURE if res.hard_failures else 0


def _cmd_validate(args) -> int:
    try:
        cfg = experiments.load_config(args.config)
    except experiments.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    eps = experiments.sweep_values(cfg)
    print(f"ok: {cfg['experiment']['name']} over {len(eps)} eps values, mesh n={cfg['mesh']['n']}")
    return 0


def _cmd_list(args) -> int:
    width = max(map(len, experiments.EXPERIMENTS))
    for name in experiments.EXPERIMENTS:
        print(f"{name:<{width}}  {experiments.DESCRIPTIONS[name]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lab", description="Convergence-rate experiments for 1D reaction-diffusion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment described by a config file")
    r.add_argument("config")
    r.add_argument("--out", help="output root (overrides the config and the environment)")
    r.set_defaults(func=_cmd_run)
    v = sub.add_parser("validate", help="check a config file against the schema")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)
    ls = sub.add_parser("list-experiments", help="list the available experiments")
    ls.set_defaults(func=_cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
