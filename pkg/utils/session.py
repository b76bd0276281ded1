# utils/session.py

import argparse
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

import config
from sampling.core import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunSession:
    """Seed and thread settings shared by every command of one CLI run."""

    seed: int
    threads: int = 1

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def streams(self, count: int) -> List[np.random.Generator]:
        """Independent generators split from the run seed."""
        return self.rng().spawn(count)


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """
    Reads a flat JSON object of flag defaults.

    Raises:
        ConfigurationError: If the file is missing or not a JSON object.
    """
    if path is None:
        return {}
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        logger.exception("Error reading config file %s", path)
        raise ConfigurationError(f"Cannot read config file {path}: {e}") from e
    if not isinstance(values, dict):
        raise ConfigurationError(f"Config file {path} must hold a JSON object")
    # Keys may be written with dashes as on the command line.
    return {key.replace("-", "_"): value for key, value in values.items()}


def _known_dests(parsers: Iterable[argparse.ArgumentParser]) -> set:
    return {action.dest for p in parsers for action in p._actions}


def parse_with_config(
    parser: argparse.ArgumentParser,
    subparsers: Sequence[argparse.ArgumentParser],
    argv: Optional[Sequence[str]] = None,
) -> argparse.Namespace:
    """
    Parses ``argv`` with ``--config`` values merged under explicit flags.

    The config file only replaces argparse defaults, so any flag given on the
    command line wins.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    values = load_config_file(known.config)
    if values:
        dests = _known_dests([parser, *subparsers])
        unknown = sorted(set(values) - dests)
        if unknown:
            logger.warning("Ignoring unknown config keys: %s", ", ".join(unknown))
        # Defaults go only to the parser owning the flag; a subparser default
        # would overwrite a global flag given before the command name.
        for p in (parser, *subparsers):
            own = _known_dests([p]) - {"command", "config", "help"}
            p.set_defaults(**{k: v for k, v in values.items() if k in own})
    return parser.parse_args(argv)


def configure_logging(verbosity: int) -> None:
    """-v gives INFO, -vv gives DEBUG; the default stays at WARNING."""
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1 or config.DEBUG:
        level = logging.DEBUG
    logging.getLogger().setLevel(level)


def session_from_args(args: argparse.Namespace) -> RunSession:
    if args.threads < 1:
        raise ConfigurationError(f"--threads must be at least 1, got {args.threads}")
    return RunSession(seed=args.seed, threads=args.threads)
