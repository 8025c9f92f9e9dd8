# imports:
import argparse
import logging
import sys

from engine.errors import CheckpointError, CorruptedBankError, InvalidConfigError, TsnError
from routes import init_routes
from utils.config_helper import LOG_LEVEL
from utils.report_writer import dumps_json

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID_CONFIG = 2
EXIT_CORRUPTED_CHECKPOINT = 3

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='tsn-iqa',
        description='Continual quality regression with task-specific normalization banks',
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    # set routes:
    init_routes(subparsers)
    return parser


def dispatch(args) -> tuple[dict, int]:
    """Runs the selected handler and maps engine errors to exit codes"""
    try:
        return args.handler(args)
    except InvalidConfigError as e:
        return {'error': str(e)}, EXIT_INVALID_CONFIG
    except CheckpointError as e:
        return {'error': str(e), 'code': e.code}, EXIT_CORRUPTED_CHECKPOINT
    except CorruptedBankError as e:
        return {'error': str(e), 'code': 'corrupted-bank'}, EXIT_CORRUPTED_CHECKPOINT
    except TsnError as e:
        logger.exception('%s failed', args.command)
        return {'error': str(e)}, EXIT_ERROR


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    args = build_parser().parse_args(argv)
    payload, status = dispatch(args)
    print(dumps_json(payload))
    return status


# run all:
if __name__ == "__main__":
    sys.exit(main())
