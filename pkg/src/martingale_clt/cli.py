"""Command line entry point: one subcommand per experiment plus ``list`` and ``all``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as X

log = logging.getLogger("martingale_clt")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON config file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--threads", type=int, help="worker threads for trajectory chunks")
    p.add_argument("--quick", action="store_true", help="reduced counts and coarser steps")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="martingale-clt", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list experiments")
    p_all = sub.add_parser("all", help="run every experiment, one output subdirectory each")
    _common(p_all)
    for name, binding in X.list_experiments():
        _common(sub.add_parser(name, help=binding))
    return ap


def make_config(name: str, args) -> X.ExperimentConfig:
    over = {"seed": args.seed, "threads": args.threads, "out": None if args.out is None else str(args.out)}
    if args.quick:
        over["quick"] = True
    if args.config is not None:
        return X.ExperimentConfig.load(args.config, experiment=name, **over)
    return X.ExperimentConfig.from_mapping({"experiment": name}, **over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "list":
        for name, binding in X.list_experiments():
            print(f"{name:24s} {binding}")
        return 0
    names = [n for n, _ in X.list_experiments()] if args.command == "all" else [args.command]
    ok = True
    for name in names:
        try:
            cfg = make_config(name, args)
            if args.command == "all" and cfg.out:
                cfg.out = str(Path(cfg.out) / name)
        except (ValueError, OSError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        log.info("running %s", name)
        rep = X.run(cfg)
        print(rep.summary(), flush=True)
        ok = ok and rep.passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
