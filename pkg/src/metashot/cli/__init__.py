"""Experiment orchestration: configs, checkpoints and the ``metashot`` command."""

from metashot.cli.checkpoint import Checkpoint, decode, encode, load_checkpoint, save_checkpoint
from metashot.cli.config import RunConfig, parse_config, parse_text, resolve
from metashot.cli.runner import SUBCOMMANDS, execute, oracle_checkpoint

__all__ = [
    "Checkpoint",
    "RunConfig",
    "SUBCOMMANDS",
    "decode",
    "encode",
    "execute",
    "load_checkpoint",
    "oracle_checkpoint",
    "parse_config",
    "parse_text",
    "resolve",
    "save_checkpoint",
]
