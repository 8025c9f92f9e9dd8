from engine.backbone import build_backbone
from engine.checkpoint import Checkpoint, save_checkpoint
from engine.experiment import install_gating_bank
from engine.normbank import BankRegistry
from utils.config_helper import add_experiment_arguments, config_from_args, out_dir
from utils.report_writer import write_csv, write_json

TRAINING_HEADER = ['task_id', 'epoch', 'lr', 'mean_loss']


def register_commands(subparsers):
    parser = subparsers.add_parser('pretrain-gating', help='train the distortion-aware gating bank')
    add_experiment_arguments(parser)
    parser.set_defaults(handler=pretrain_gating)


# 1. Pretrain the distortion-aware bank on the mixed-distortion corpus
def pretrain_gating(args):
    """
    Trains the gating bank and saves it as a task-free checkpoint under
    <out>/gating/checkpoint, with its per-epoch log next to it. train-seq,
    orders and ablate take that directory as --checkpoint
    """
    config = config_from_args(args)
    root = out_dir(args) / 'gating'

    backbone = build_backbone(config.backbone_config())
    registry = BankRegistry()
    report = install_gating_bank(config, backbone, registry)

    checkpoint = Checkpoint(backbone.config, registry, None, config.to_dict(), {})
    path = save_checkpoint(checkpoint, root / 'checkpoint')

    summary = {
        'checkpoint': str(path),
        'bank': config.gating.bank,
        'fingerprint': registry.distortion_bank.fingerprint(),
    }
    if report is not None:
        write_csv(root / 'training.csv', TRAINING_HEADER, report.epoch_rows())
        summary.update(steps=report.steps, val_srcc=report.val_srcc)
    write_json(root / 'gating.json', summary)
    return summary, 0
