"""
SPDE Volatility Lab - Command line
Usage: python cli.py <command> [--config FILE] [--out DIR] [--seed N] [--threads N]

Exit codes: 0 success, 1 other failure, 2 invalid configuration,
3 acceptance checks failed.
"""

import argparse
import logging
import sys

from config import setup_logging
from services.artifacts import artifact_writer
from services.errors import ConfigError, LabError
from services.experiment_config import load_config
from services.experiments import COMMANDS, COUNTEREXAMPLE_NAMES, experiment_runner

logger = logging.getLogger("CLI")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_ACCEPTANCE = 3


def _n_grid(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spde-lab", description="Volatility estimation for Hilbert-space SPDEs.")
    ap.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default from LOG_LEVEL).")
    sub = ap.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "counterexample":
            p.add_argument("which", choices=COUNTEREXAMPLE_NAMES)
            p.add_argument("--control", action="store_true", help="Brownian (H=1/2) control run.")
            p.add_argument("--config", default=None, help="Ignored; counterexample models are fixed.")
        else:
            p.add_argument("--config", required=True, help="TOML experiment file.")
        if name == "estimate":
            p.add_argument("--input", default=None, help="Path CSV written by simulate (JSON sidecar alongside).")
        p.add_argument("--out", default=None, help="Run directory (default OUTPUT_DIR/<command>-<hash>).")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--replications", "-R", type=int, default=None)
        p.add_argument("--n-grid", type=_n_grid, default=None, help="e.g. 64,128,256")
    return ap


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level.upper() if args.log_level else None)
    try:
        cfg = load_config(args.config) if args.command != "counterexample" else None
        path = reference = None
        if getattr(args, "input", None):
            path = artifact_writer.read_path(args.input)
            reference = artifact_writer.read_reference(args.input, path.space)
        result = experiment_runner.run(
            args.command,
            cfg,
            threads=args.threads,
            out=args.out,
            path=path,
            which=getattr(args, "which", None),
            replications=args.replications,
            seed=args.seed,
            control=getattr(args, "control", False),
            n_grid=args.n_grid,
            reference=reference,
        )
    except ConfigError as e:
        logger.error(f"invalid configuration: {e}")
        return EXIT_CONFIG
    except LabError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE

    print(result.directory / "report.json")
    if not result.passed:
        failed = [k for k, v in result.report["checks"].items() if not v]
        logger.warning(f"acceptance checks failed: {', '.join(failed)}")
        return EXIT_ACCEPTANCE
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
