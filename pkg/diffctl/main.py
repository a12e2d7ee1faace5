"""Command-line entry point for diffctl.

    python -m diffctl.main run configs/projectile_single_shooting.json
    python -m diffctl.main list
    python -m diffctl.main validate configs/pendulum_collocation.json

Exit codes: 0 on success or convergence, 2 when a solver budget ran out
without convergence, 1 on any validation or runtime error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import LOG_LEVEL, NLP_SOLVERS, OUTPUT_ROOT, TRANSCRIPTION_METHODS
from .errors import ConfigError, DiffCtlError
from .experiments import run_experiment
from .models import IntegratorKind, RunStatus
from .parser import ExperimentConfig, load_config
from .storage import ensure_dirs
from .systems import catalog_entries

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET = 2


def configure_logging(quiet: bool = False):
    level = logging.WARNING if quiet else getattr(logging, LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _yes_no(flag: bool) -> str:
    return "yes" if flag else "no"


def list_catalog() -> str:
    """Environments, transcription methods, solvers and integrators as plain text."""
    lines = ["Environments:"]
    for entry in catalog_entries():
        lines.append(
            f"  {entry['name']:<22} {entry['title']}: D={entry['state_dim']} M={entry['control_dim']}, "
            f"fixed terminal state: {_yes_no(entry['fixed_terminal_state'])}, "
            f"terminal cost: {_yes_no(entry['terminal_cost'])}"
        )
    lines.append("")
    lines.append("Trajectory optimization methods:")
    for name, info in TRANSCRIPTION_METHODS.items():
        lines.append(f"  {name:<28} {info['approach']}, {info['parallelism']} ({info['integration']})")
    lines.append("")
    lines.append("NLP solvers:")
    for name, info in NLP_SOLVERS.items():
        lines.append(f"  {name:<14} {info['name']}: {info['description']}")
    lines.append("")
    lines.append("Integrators:")
    for kind in IntegratorKind:
        lines.append(f"  {kind.value:<10} {kind.label}, order {kind.order}, {kind.stages} stage(s)")
    return "\n".join(lines)


def resolve_output_dir(config: ExperimentConfig, override: Optional[str]) -> Path:
    """--output-dir, then the config's output_dir, then OUTPUT_ROOT/<kind>-<environment>."""
    if override:
        return Path(override)
    if config.output_dir:
        return Path(config.output_dir)
    return Path(OUTPUT_ROOT) / config.label


# ============ Commands ============

def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config, seed=args.seed)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_ERROR

    phase = "output"
    try:
        output_dir = ensure_dirs(resolve_output_dir(config, args.output_dir), overwrite=args.overwrite)
        config = config.model_copy(update={"output_dir": str(output_dir)})
        phase = config.kind
        manifest = run_experiment(config, output_dir)
    except (DiffCtlError, ValueError, OSError, ArithmeticError) as e:
        logger.error("%s: %s: %s", args.config, phase, e)
        return EXIT_ERROR

    print(f"{manifest.status.value}: {output_dir}")
    return EXIT_BUDGET if manifest.status == RunStatus.BUDGET_EXHAUSTED else EXIT_OK


def cmd_list(args: argparse.Namespace) -> int:
    print(list_catalog())
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config, seed=args.seed)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_ERROR
    print(f"{args.config}: valid {config.kind} experiment")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffctl",
        description="Differentiable trajectory optimization, system identification and end-to-end planning",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", parents=[common], help="run an experiment configuration")
    run.add_argument("config", help="path to a JSON experiment configuration")
    run.add_argument("--output-dir", help="run directory (overrides the configuration)")
    run.add_argument("--overwrite", action="store_true", help="replace a non-empty run directory")
    run.add_argument("--seed", type=int, help="override the configuration's seed")
    run.set_defaults(handler=cmd_run)

    listing = commands.add_parser("list", parents=[common], help="list environments, methods, solvers and integrators")
    listing.set_defaults(handler=cmd_list)

    validate = commands.add_parser("validate", parents=[common], help="check a configuration without running it")
    validate.add_argument("config", help="path to a JSON experiment configuration")
    validate.add_argument("--seed", type=int, help="override the configuration's seed")
    validate.set_defaults(handler=cmd_validate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.quiet)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
