import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from agents.recipes import RecipeAgent, RecipeId
from agents.sequencer import GateKind
from utils.config import LOG_FILE, LOG_LEVEL, load_config, parse_override
from utils.error_handling import AddressingError, ConfigError
from utils.geometry import SiteIndex

logger = logging.getLogger(__name__)

COMMANDS: Dict[str, RecipeId] = {
    "simulate": RecipeId.TRAJECTORIES,
    "scan": RecipeId.FIG2_SPECTRUM,
    "echo": RecipeId.FIG3_ECHO,
    "gate": RecipeId.FIG4_GATE,
    "fidelity": RecipeId.TABLE1_FIDELITIES,
    "stabilize": RecipeId.FEEDBACK_DEMO,
    "align": RecipeId.ALIGNMENT_DEMO,
    "report": RecipeId.CROSSTALK_REPORT,
}

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

def configure_logging(output_dir: Optional[str], level: str = LOG_LEVEL) -> None:
    """Log to the console and, when an output directory is known, to a file inside it."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        handlers.insert(0, logging.FileHandler(os.path.join(output_dir, LOG_FILE)))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="addressing",
        description="Simulate microwave addressing of single atoms in a 3D optical lattice",
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="Recipe to run")
    parser.add_argument("--config", help="JSON run configuration (defaults to $ADDRESSING_CONFIG)")
    parser.add_argument("--seed", type=int, help="Override the configured seed")
    parser.add_argument("--shots", type=int, help="Override the configured number of experiments")
    parser.add_argument("--output-dir", help="Override the configured output directory")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override a config key (repeatable, value parsed as JSON)")
    parser.add_argument("--gate", choices=[k.value for k in GateKind if k != GateKind.CUSTOM], default="I",
                        help="Gate for the gate and simulate commands")
    parser.add_argument("--target", action="append", default=[], metavar="I,J,K",
                        help="Target site for simulate (repeatable, at most two)")
    parser.add_argument("--disturbance", help="Disturbance CSV (iteration, dx, dy, dz) for stabilize")
    return parser

def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command and return the process exit code.

    Returns:
        0 when every check passed, 1 on a failed check or a domain error, 2 on usage or config errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        overrides = dict(parse_override(text) for text in args.set)
        for key, value in (("seed", args.seed), ("shots", args.shots), ("output_dir", args.output_dir)):
            if value is not None:
                overrides[key] = value
        config = load_config(args.config, overrides)
        targets = [SiteIndex.parse(text) for text in args.target] or None
    except (ConfigError, AddressingError) as e:
        configure_logging(None)
        logger.error(f"Configuration error: {str(e)}")
        return EXIT_USAGE

    configure_logging(config.output_dir)
    recipe = COMMANDS[args.command]
    logger.info(f"Command {args.command} -> recipe {recipe.value}")

    try:
        result = RecipeAgent(config).run_recipe(recipe, gate=args.gate, targets=targets,
                                                disturbance_path=args.disturbance)
    except ConfigError as e:
        logger.error(f"Configuration error: {str(e)}")
        return EXIT_USAGE
    except AddressingError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return EXIT_CHECK_FAILED

    failed = [c.name for c in result.checks if not c.passed]
    if failed:
        logger.warning(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    logger.info(f"All {len(result.checks)} checks passed; outputs in {os.path.dirname(result.files[-1])}")
    return EXIT_OK

if __name__ == "__main__":
    sys.exit(main())
