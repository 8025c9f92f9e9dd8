from dataclasses import replace

from engine.checkpoint import load_checkpoint
from engine.errors import CheckpointError, InvalidConfigError, StateError
from engine.experiment import ExperimentConfig, TSN, analyze_kl, build_task_data, run_sequence
from engine.gating import mean_gate_weights
from engine.synthdata import DistortionKind, TaskSpec
from utils.config_helper import SHOW_PROGRESS, add_experiment_arguments, config_from_args, out_dir
from utils.report_writer import write_json, write_matrix_csv


def register_commands(subparsers):
    parser = subparsers.add_parser('analyze-kl', help='KL divergence between task banks vs cross-task SRCC')
    add_experiment_arguments(parser, 'trained checkpoint to analyze instead of running a fresh sequence')
    parser.add_argument('--holdout', choices=[k.value for k in DistortionKind],
                        help='also report mean head weights on an unseen task of this kind')
    parser.set_defaults(handler=analyze)


def _trained_state(args):
    """(config, backbone, registry, store) from --checkpoint, or from a fresh TSN run"""
    if args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        try:
            config = ExperimentConfig.from_dict(checkpoint.experiment)
        except InvalidConfigError as e:
            raise CheckpointError(f'checkpoint carries an invalid experiment config: {e}') from None
        return config, checkpoint.backbone(), checkpoint.registry, checkpoint.store
    config = replace(config_from_args(args), baseline=TSN)
    run = run_sequence(config, show_progress=SHOW_PROGRESS)
    return config, run.backbone, run.registry, run.store


# 1. Divergence analysis
def analyze(args):
    """
    KL between the last-site statistics of every pair of task banks, the
    cross-task SRCC matrix, and the rank correlation between the two
    """
    config, backbone, registry, store = _trained_state(args)
    datasets = [build_task_data(config, spec) for spec in config.ordered_tasks()]
    analysis = analyze_kl(backbone, registry, datasets)

    directory = out_dir(args) / config.label / 'kl'
    write_matrix_csv(directory / 'kl.csv', analysis.task_ids, analysis.kl)
    write_matrix_csv(directory / 'cross_srcc.csv', analysis.task_ids, analysis.cross_srcc)
    payload = analysis.to_dict()

    if args.holdout:
        if store is None:
            raise StateError('holdout weighting needs a gated (TSN) model')
        spec = replace(TaskSpec.single(args.holdout), task_id=f'holdout-{args.holdout}')
        weights = mean_gate_weights(backbone, registry, store, build_task_data(config, spec))
        payload['holdout'] = {'kind': args.holdout, 'weights': dict(zip(registry.task_ids, weights.tolist()))}

    write_json(directory / 'kl.json', payload)
    return payload, 0
