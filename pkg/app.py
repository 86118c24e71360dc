from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from sinebeta_app.config import load_settings
from sinebeta_app.runner import aggregate_reports, run
from sinebeta_app.suites import SUITES

EXIT_INVALID_CONFIG = 2


def _split(v: Optional[str]) -> Optional[List[str]]:
    if v is None:
        return None
    return [s.strip() for s in v.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--settings", default="settings.json", help="JSON settings file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--replicates", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--workers", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--beta", type=float)
    common.add_argument("--lambdas", help="comma list, e.g. 0,2pi,4pi")
    common.add_argument("--step", type=float, help="Euler step h")
    common.add_argument("--horizon", type=float, help="horizon in rescaled units")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sinebeta", description="Sine-beta simulation and verification runs")
    sub = p.add_subparsers(dest="mode", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate the coupled family and write jumps/counts")
    wt = sub.add_parser("welltime", parents=[common], help="exit-time quadrature or passage sampling")
    wt.add_argument("method", nargs="?", choices=["quadrature", "mc"])
    vf = sub.add_parser("verify", parents=[common], help="run verification suites")
    vf.add_argument("--suites", help=f"comma list from {sorted(SUITES) + ['all']}")
    rp = sub.add_parser("report", parents=[common], help="aggregate report.json files under a directory")
    rp.add_argument("--dir", help="directory to scan (defaults to the output dir)")
    return p


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "run": {
            "mode": args.mode,
            "seed": args.seed,
            "replicates": args.replicates,
            "output_dir": args.output_dir,
            "workers": args.workers,
            "batch_size": args.batch_size,
            "suites": _split(getattr(args, "suites", None)),
        },
        "model": {"beta": args.beta, "lambdas": _split(args.lambdas)},
        "integrator": {"step": args.step, "horizon_rescaled": args.horizon},
        "welltime": {"method": getattr(args, "method", None)},
    }


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.mode == "report" and args.dir:
        return aggregate_reports(Path(args.dir))

    try:
        cfg = load_settings(args.settings, overrides_from_args(args))
    except (ValueError, FileNotFoundError) as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_INVALID_CONFIG

    return run(cfg)


if __name__ == "__main__":
    raise SystemExit(main())
