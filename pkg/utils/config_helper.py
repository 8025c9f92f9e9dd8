from dotenv import load_dotenv
from dataclasses import replace
from pathlib import Path
import json
import os

from engine.errors import InvalidConfigError
from engine.experiment import ExperimentConfig, TASK_AGNOSTIC_BN, TSN
from engine.gating import GateMode

# load environment variables:
load_dotenv()

OUT_DIR = os.getenv("OUT_DIR", "out")
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
SHOW_PROGRESS = os.getenv("SHOW_PROGRESS", "").strip().lower() in ("1", "true", "yes", "on")

EVAL_MODES = ('soft', 'hard', 'oracle')


def add_experiment_arguments(parser, checkpoint_help: str | None = None):
    """Flags shared by every subcommand; --checkpoint only where the command reads one"""
    parser.add_argument('--config', help='JSON experiment config')
    parser.add_argument('--seed', type=int, help='sets the data, filter, training and k-means seeds')
    parser.add_argument('--out', help=f'output directory (default: $OUT_DIR or {OUT_DIR!r})')
    parser.add_argument('--mode', choices=EVAL_MODES, help='evaluation mode')
    parser.add_argument('--baseline', choices=(TASK_AGNOSTIC_BN,), help='train the shared-bank baseline instead')
    if checkpoint_help:
        parser.add_argument('--checkpoint', help=checkpoint_help)


def load_experiment_config(path) -> ExperimentConfig:
    """Reads a JSON config file; a missing path means the default desk config"""
    if not path:
        return ExperimentConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise InvalidConfigError(f'config file {path} does not exist')
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InvalidConfigError(f'config file {path} is not valid JSON: {e}') from None
    return ExperimentConfig.from_dict(data)


def apply_overrides(config: ExperimentConfig, seed=None, mode=None, baseline=None) -> ExperimentConfig:
    """CLI flags win over the config file"""
    if seed is not None:
        if not 0 <= seed < 2 ** 64:
            raise InvalidConfigError('--seed must be an unsigned 64-bit integer')
        config = config.with_seed(seed)
    if mode in (GateMode.SOFT.value, GateMode.HARD.value):
        config = replace(config, gating=replace(config.gating, mode=GateMode(mode)))
    if baseline is not None:
        config = replace(config, baseline=baseline if baseline else TSN)
    return config.validate()


def config_from_args(args) -> ExperimentConfig:
    config = load_experiment_config(args.config)
    return apply_overrides(config, args.seed, args.mode, args.baseline)


def out_dir(args) -> Path:
    return Path(args.out or OUT_DIR)
