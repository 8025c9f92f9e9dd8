from pathlib import Path
import logging

import numpy as np

from engine.checkpoint import checkpoint_from_run, load_checkpoint, payload_bytes, save_checkpoint
from engine.errors import CheckpointError, InvalidArgumentError, InvalidConfigError, StateError
from engine.experiment import (
    ExperimentConfig, ORDER_LABELS, SHARED_ID, TASK_AGNOSTIC_BN,
    build_task_data, run_ablation_suite, run_order_suite, run_sequence,
)
from engine.metrics import SequenceResults, srcc
from engine.normbank import count_centroid_params, count_params
from engine.predictor import predict_records
from engine.synthdata import mos_array
from results_store_holder import record_run
from utils.config_helper import SHOW_PROGRESS, add_experiment_arguments, config_from_args, out_dir
from utils.report_writer import read_json, write_csv, write_json, write_matrix_csv, write_predictions_csv

logger = logging.getLogger(__name__)

TRAINING_HEADER = ['task_id', 'epoch', 'lr', 'mean_loss']
SCALAR_HEADER = ['mSRCC', 'mPI', 'mSI', 'mPSI']
GATING_CHECKPOINT_HELP = 'gating-bank checkpoint from pretrain-gating to reuse instead of training one'


def register_commands(subparsers):
    parser = subparsers.add_parser('train-seq', help='train and evaluate one task sequence')
    add_experiment_arguments(parser, GATING_CHECKPOINT_HELP)
    parser.set_defaults(handler=train_seq)

    parser = subparsers.add_parser('eval', help='evaluate a saved checkpoint on every test set')
    add_experiment_arguments(parser, 'checkpoint directory to evaluate')
    parser.set_defaults(handler=evaluate_checkpoint)

    parser = subparsers.add_parser('orders', help='run the sequence under several task orders')
    add_experiment_arguments(parser, GATING_CHECKPOINT_HELP)
    parser.add_argument('--orders', default='I,II,III,IV', help='comma-separated order labels')
    parser.set_defaults(handler=orders)

    parser = subparsers.add_parser('ablate', help='TSN variants, baseline and gating ablations')
    add_experiment_arguments(parser, GATING_CHECKPOINT_HELP)
    parser.set_defaults(handler=ablate)

    parser = subparsers.add_parser('report', help='aggregate every result file under --out')
    add_experiment_arguments(parser)
    parser.set_defaults(handler=report)


def headline_mode(config: ExperimentConfig, mode: str | None = None) -> str:
    if config.baseline == TASK_AGNOSTIC_BN:
        return 'shared'
    return mode or config.gating.mode.value


def run_directory(root: Path, config: ExperimentConfig) -> Path:
    return root / config.label / f'{config.baseline}-order-{config.order}'


def write_run_outputs(run, directory: Path, mode: str) -> dict:
    """Checkpoint, result matrices, training log and accounting for one sequence run"""
    config = run.config
    checkpoint_dir = save_checkpoint(checkpoint_from_run(run), directory / 'checkpoint')

    for name, results in run.results.items():
        write_matrix_csv(directory / f'srcc_{name}.csv', results.task_ids, results.srcc_matrix)
        write_matrix_csv(directory / f'srcc_hat_{name}.csv', results.task_ids, results.cross_matrix)
    headline = run.results[mode]
    write_csv(directory / 'length_curve.csv', ['length', 'mPSI'],
              [[t + 1, v] for t, v in enumerate(headline.length_curve())])

    rows = [row for r in run.reports for row in r.epoch_rows()]
    write_csv(directory / 'training.csv', TRAINING_HEADER, rows)
    write_json(directory / 'training.json', {
        r.task_id: {'steps': r.steps, 'val_srcc': r.val_srcc, 'final_loss': r.epoch_losses[-1]}
        for r in run.reports
    })

    backbone = config.backbone
    gating_channels = [backbone.channels[s - 1] for s in config.gating.stages]
    summary = {
        'label': config.label,
        'order': config.order,
        'baseline': config.baseline,
        'tasks': run.task_ids,
        'headline': mode,
        **headline.scalars(),
        'modes': run.results_dict(),
        'params_per_task': count_params(backbone.channels, backbone.feature_dim),
        'centroid_params_per_task': count_centroid_params(config.gating.k, gating_channels),
        'checkpoint': str(checkpoint_dir),
        'checkpoint_payload_bytes': payload_bytes(checkpoint_dir),
        'gating_checkpoint': run.gating_checkpoint,
        'passes': {mode: {'quality': c.quality_passes, 'gating': c.gating_passes} for mode, c in run.counters.items()},
    }
    write_json(directory / 'results.json', summary)
    return summary


# 1. Train one sequence
def train_seq(args):
    """
    Trains the configured sequence, evaluates after every task and writes the
    checkpoint plus every result file under <out>/<label>/<baseline>-order-<order>/
    """
    config = config_from_args(args)
    mode = headline_mode(config, args.mode)
    run = run_sequence(config, show_progress=SHOW_PROGRESS, gating_checkpoint=args.checkpoint)
    directory = run_directory(out_dir(args), config)
    summary = write_run_outputs(run, directory, mode)

    scalars = run.results[mode].scalars()
    record_run('train-seq', config.label, scalars, {'order': config.order, 'baseline': config.baseline})
    return {'out': str(directory), 'mode': mode, 'tasks': run.task_ids, **scalars,
            'params_per_task': summary['params_per_task']}, 0


# 2. Evaluate a checkpoint
def evaluate_checkpoint(args):
    """
    Rebuilds the test sets from the checkpoint's experiment config and scores
    them with the final model in the requested mode
    """
    if not args.checkpoint:
        raise InvalidConfigError('eval needs --checkpoint')
    checkpoint = load_checkpoint(args.checkpoint)
    try:
        config = ExperimentConfig.from_dict(checkpoint.experiment)
    except InvalidConfigError as e:
        raise CheckpointError(f'checkpoint carries an invalid experiment config: {e}') from None

    backbone = checkpoint.backbone()
    registry = checkpoint.registry
    baseline = SHARED_ID in registry
    mode = 'oracle' if baseline else (args.mode or config.gating.mode.value)
    if mode != 'oracle' and checkpoint.store is None:
        raise StateError(f'checkpoint has no centroid store for {mode} gating')

    records, per_task = [], {}
    for spec in config.ordered_tasks():
        dataset = build_task_data(config, spec)
        if not baseline and dataset.task_id not in registry:
            raise InvalidArgumentError(f'task {dataset.task_id!r} is missing from the checkpoint')
        oracle_task = SHARED_ID if baseline else dataset.task_id
        task_records = predict_records(backbone, registry, checkpoint.store, dataset.test, mode, oracle_task)
        records.extend(task_records)
        q_hat = np.array([r.q_hat for r in task_records])
        per_task[dataset.task_id] = srcc(q_hat, mos_array(dataset.test))

    directory = out_dir(args) / config.label / 'eval'
    write_predictions_csv(directory / f'predictions_{mode}.csv', registry.task_ids, records)
    stored_mode = 'shared' if baseline else mode
    stored = checkpoint.results.get(stored_mode)
    payload = {
        'checkpoint': str(args.checkpoint),
        'mode': mode,
        'final_srcc': per_task,
        'mSRCC': float(np.mean(list(per_task.values()))),
        'stored': SequenceResults.from_dict(stored).scalars() if stored else None,
    }
    write_json(directory / f'eval_{mode}.json', payload)
    return payload, 0


# 3. Run the order suite
def orders(args):
    """Same tasks and seeds under several orders; oracle outputs must agree byte for byte"""
    config = config_from_args(args)
    labels = [label.strip() for label in args.orders.split(',') if label.strip()]
    unknown = [label for label in labels if label not in ORDER_LABELS]
    if unknown:
        raise InvalidConfigError(f'unknown order labels {unknown}')
    if len(labels) < 2:
        raise InvalidConfigError('--orders needs at least two labels')

    suite = run_order_suite(config, labels, show_progress=SHOW_PROGRESS, gating_checkpoint=args.checkpoint)
    directory = out_dir(args) / config.label / 'orders'
    write_csv(directory / 'orders.csv', ['order', 'tasks'] + SCALAR_HEADER,
              [[row['order'], row['tasks']] + [row[k] for k in SCALAR_HEADER] for row in suite.rows])

    payload = {'rows': suite.rows, 'mSRCC_spread': suite.msrcc_spread()}
    if config.baseline != TASK_AGNOSTIC_BN:
        payload['oracle_identical'] = oracle_outputs_identical(suite.runs.values())
    write_json(directory / 'orders.json', payload)
    record_run('orders', config.label, {'mSRCC_spread': payload['mSRCC_spread']}, {'orders': labels})
    return payload, 0


def oracle_outputs_identical(runs) -> bool:
    """Final oracle scores of every task compared as raw bytes across runs"""
    runs = list(runs)
    reference = runs[0].final_oracle_scores()
    for run in runs[1:]:
        scores = run.final_oracle_scores()
        if scores.keys() != reference.keys():
            return False
        if any(scores[t].tobytes() != reference[t].tobytes() for t in reference):
            return False
    return True


# 4. Run the ablation suite
def ablate(args):
    config = config_from_args(args)
    rows = run_ablation_suite(config, gating_checkpoint=args.checkpoint)
    directory = out_dir(args) / config.label / 'ablation'
    write_csv(directory / 'ablation.csv', ['variant'] + SCALAR_HEADER,
              [[row['variant']] + [row[k] for k in SCALAR_HEADER] for row in rows])
    write_json(directory / 'ablation.json', {'rows': rows})
    return {'rows': rows}, 0


# 5. Aggregate everything written so far
def report(args):
    """
    Collects results.json, orders.json, ablation.json and kl.json files under
    --out into report.json and a flat report.csv
    """
    root = out_dir(args)
    if not root.is_dir():
        raise InvalidArgumentError(f'output directory {root} does not exist')

    runs, order_suites, ablations, kl = [], [], [], []
    rows = []
    for path in sorted(root.rglob('*.json')):
        source = path.relative_to(root).as_posix()
        if path.name == 'results.json':
            data = read_json(path)
            runs.append({'source': source, **{k: data.get(k) for k in
                        ('label', 'order', 'baseline', 'headline', 'params_per_task', *SCALAR_HEADER)}})
            rows.append([source, f'{data["baseline"]}:{data["headline"]}'] + [data.get(k) for k in SCALAR_HEADER])
        elif path.name == 'orders.json':
            data = read_json(path)
            order_suites.append({'source': source, **data})
            rows.extend([source, f'order-{r["order"]}'] + [r.get(k) for k in SCALAR_HEADER] for r in data['rows'])
        elif path.name == 'ablation.json':
            data = read_json(path)
            ablations.append({'source': source, **data})
            rows.extend([source, r['variant']] + [r.get(k) for k in SCALAR_HEADER] for r in data['rows'])
        elif path.name == 'kl.json':
            kl.append({'source': source, **read_json(path)})

    if not (runs or order_suites or ablations or kl):
        raise InvalidArgumentError(f'no result files found under {root}')

    summary = {'runs': runs, 'orders': order_suites, 'ablations': ablations, 'kl': kl}
    write_json(root / 'report.json', summary)
    write_csv(root / 'report.csv', ['source', 'variant'] + SCALAR_HEADER, rows)
    label = args.config or 'report'
    record_run('report', str(label), {'runs': len(runs)})
    return {'out': str(root), 'runs': len(runs), 'orders': len(order_suites),
            'ablations': len(ablations), 'kl': len(kl)}, 0
