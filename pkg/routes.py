from controllers import analysis_controller
from controllers import data_controller
from controllers import gating_controller
from controllers import sequence_controller


def init_routes(subparsers):
    data_controller.register_commands(subparsers)
    gating_controller.register_commands(subparsers)
    sequence_controller.register_commands(subparsers)
    analysis_controller.register_commands(subparsers)
