from __future__ import annotations

import argparse
import logging
import os
from typing import Callable, Dict, List, Optional

from . import experiment
from .config import ConfigError, ExperimentConfig, load_config, validate_config
from .logging_setup import configure_logging

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2

_logger = logging.getLogger("sml_sim.cli")


def _run_train(config: ExperimentConfig, out_dir: str) -> Dict:
    return experiment.cmd_train(experiment.build_setup(config), out_dir)


def _run_predict(config: ExperimentConfig, out_dir: str) -> Dict:
    return experiment.cmd_predict(experiment.build_setup(config), out_dir)


def _run_montecarlo(config: ExperimentConfig, out_dir: str) -> Dict:
    return experiment.cmd_montecarlo(experiment.build_setup(config), out_dir)


def _run_theory(config: ExperimentConfig, out_dir: str) -> Dict:
    return experiment.cmd_theory(experiment.build_setup(config), out_dir)


COMMANDS: Dict[str, Callable[[ExperimentConfig, str], Dict]] = {
    "train": _run_train,
    "predict": _run_predict,
    "montecarlo": _run_montecarlo,
    "theory": _run_theory,
    "validate-data": experiment.cmd_validate_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sml-sim", description="Social machine learning simulator")
    parser.add_argument("command", choices=sorted(COMMANDS), help="Experiment to run")
    parser.add_argument("--config", required=False, help="Path to JSON experiment config (optional)")
    parser.add_argument("--out", required=False, help="Output directory (overrides output_dir)")
    parser.add_argument("--seed-override", type=int, help="Replace the master seed")
    parser.add_argument("--replications-override", type=int, help="Replace montecarlo.replications")
    parser.add_argument("--threads", type=int, help="Worker threads for Monte Carlo replications")
    return parser


def apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.out is not None:
        config.output_dir = os.path.abspath(args.out)
    if args.seed_override is not None:
        config.seed = args.seed_override
    if args.replications_override is not None:
        config.montecarlo.replications = args.replications_override
    if args.threads is not None:
        config.threads = args.threads
    return config


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging("INFO")
    try:
        config = apply_overrides(load_config(args.config), args)
        validate_config(config)
    except ConfigError as exc:
        _logger.error("Invalid config: %s", exc)
        return EXIT_INVALID
    logging.getLogger().setLevel(config.log_level.upper())

    out_dir = config.resolve(config.output_dir)
    _logger.info(
        "Startup command=%s config=%s out=%s seed=%s engine=%s replications=%s threads=%s",
        args.command,
        args.config,
        out_dir,
        config.seed,
        config.prediction.engine,
        config.montecarlo.replications,
        config.threads,
    )
    try:
        COMMANDS[args.command](config, out_dir)
    except (ConfigError, experiment.DataValidationError) as exc:
        _logger.error("Validation failed command=%s: %s", args.command, exc)
        return EXIT_INVALID
    except Exception:
        _logger.exception("Command failed command=%s", args.command)
        return EXIT_FAILED
    _logger.info("Finished command=%s out=%s", args.command, out_dir)
    return EXIT_OK
