from engine.experiment import build_task_data
from engine.synthdata import export_task_dataset
from utils.config_helper import add_experiment_arguments, config_from_args, out_dir


def register_commands(subparsers):
    parser = subparsers.add_parser('gen-data', help='emit the synthetic task datasets')
    add_experiment_arguments(parser)
    parser.set_defaults(handler=gen_data)


# 1. Generate and export every task dataset
def gen_data(args):
    """
    Renders each configured task and writes it to <out>/data/<task_id>/
    (manifest.json plus one tensor file per image)
    """
    config = config_from_args(args)
    root = out_dir(args) / 'data'

    tasks = []
    for spec in config.tasks:
        dataset = build_task_data(config, spec)
        export_task_dataset(dataset, root / spec.task_id)
        tasks.append({
            'task_id': spec.task_id,
            'family': spec.family,
            'train': len(dataset.train),
            'val': len(dataset.val),
            'test': len(dataset.test),
        })

    return {'out': str(root), 'tasks': tasks}, 0
