"""
Checkpoint persistence: a directory holding manifest.json and one tensor file
per payload (every bank, every head and the centroid store).

The backbone is stored as its config; filters are rebuilt from the seed.
"""
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path

import numpy as np

from engine.backbone import BackboneConfig, FrozenBackbone, PredictionHead, build_backbone
from engine.errors import (
    CheckpointError, CheckpointTruncatedError, CheckpointVersionError, InvalidArgumentError,
)
from engine.gating import CentroidStore, DistanceMetric
from engine.normbank import BankRegistry, TaskNormBank, DISTORTION_BANK_ID, freeze_bank
from engine.numerics import NormSite
from utils.report_writer import write_json
from utils.tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = 'manifest.json'
SITE_ARRAYS = ('mean', 'var', 'gamma', 'beta')


@dataclass
class Checkpoint:
    backbone_config: BackboneConfig
    registry: BankRegistry
    store: CentroidStore | None = None
    experiment: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    def backbone(self) -> FrozenBackbone:
        return build_backbone(self.backbone_config)


def checkpoint_from_run(run) -> Checkpoint:
    return Checkpoint(
        backbone_config=run.backbone.config,
        registry=run.registry,
        store=run.store,
        experiment=run.config.to_dict(),
        results=run.results_dict(),
    )


def _bank_payloads(prefix: str, bank: TaskNormBank):
    for s, site in enumerate(bank.sites):
        for name, array in site.arrays().items():
            yield f'{prefix}/{s}/{name}', array


def _payloads(checkpoint: Checkpoint):
    registry = checkpoint.registry
    for task_id in registry.task_ids:
        yield from _bank_payloads(f'bank/{task_id}', registry.banks[task_id])
        yield f'head/{task_id}/weight', registry.heads[task_id].weight
        yield f'head/{task_id}/bias', registry.heads[task_id].bias
    if registry.distortion_bank is not None:
        yield from _bank_payloads('gating-bank', registry.distortion_bank)
    if checkpoint.store is not None:
        for task_id in checkpoint.store.task_ids:
            for stage in checkpoint.store.stages:
                key = (task_id, stage)
                if key in checkpoint.store.centroids:
                    yield f'centroids/{task_id}/{stage}', checkpoint.store.centroids[key]


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    """Writes the payload files first and the manifest last"""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    for i, (name, array) in enumerate(_payloads(checkpoint)):
        ref = write_tensor(directory / f'p{i:04d}.tensor', array)
        entries.append({'name': name, **ref})

    store = checkpoint.store
    manifest = {
        'format_version': FORMAT_VERSION,
        'backbone': checkpoint.backbone_config.to_dict(),
        'tasks': checkpoint.registry.task_ids,
        'layout': list(checkpoint.backbone_config.channels),
        'gating_bank': checkpoint.registry.distortion_bank is not None,
        'store': None if store is None else {
            'k': store.k, 'stages': list(store.stages), 'tau': store.tau, 'metric': store.metric.value,
        },
        'experiment': checkpoint.experiment,
        'results': checkpoint.results,
        'payload': entries,
    }
    write_json(directory / MANIFEST, manifest)
    logger.info('checkpoint saved to %s: %d tasks, %d payloads', directory, len(checkpoint.registry), len(entries))
    return directory


def _read_manifest(directory: Path) -> dict:
    path = directory / MANIFEST
    if not path.is_file():
        raise CheckpointTruncatedError(f'{path} is missing')
    try:
        manifest = json.loads(path.read_text(encoding='utf-8'))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointTruncatedError(f'{path} is not valid JSON: {e}') from None
    if not isinstance(manifest, dict):
        raise CheckpointError(f'{path} is not a checkpoint manifest')
    version = manifest.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f'checkpoint format {version!r}, this build reads {FORMAT_VERSION}')
    return manifest


def _load_arrays(directory: Path, entries: list[dict]) -> dict[str, np.ndarray]:
    arrays = {}
    for entry in entries:
        file = directory / entry['file']
        if not file.is_file():
            raise CheckpointTruncatedError(f'payload {entry["name"]} ({entry["file"]}) is missing')
        array = read_tensor(file, entry['sha256'], entry['bytes'])
        if list(array.shape) != list(entry['shape']):
            raise CheckpointError(f'payload {entry["name"]} has shape {array.shape}, manifest says {entry["shape"]}')
        arrays[entry['name']] = array
    return arrays


def _restore_bank(task_id: str, prefix: str, layout, arrays: dict) -> TaskNormBank:
    sites = []
    for s, channels in enumerate(layout):
        try:
            values = {name: arrays[f'{prefix}/{s}/{name}'] for name in SITE_ARRAYS}
        except KeyError as e:
            raise CheckpointTruncatedError(f'payload {e.args[0]} is not in the manifest') from None
        if any(v.shape != (channels,) for v in values.values()):
            raise CheckpointError(f'{prefix}/{s} does not have {channels} channels')
        sites.append(NormSite(**values))
    return freeze_bank(TaskNormBank(task_id, tuple(sites)))


def load_checkpoint(path) -> Checkpoint:
    directory = Path(path)
    manifest = _read_manifest(directory)
    try:
        config = BackboneConfig.from_dict(manifest['backbone'])
        layout = tuple(manifest['layout'])
        arrays = _load_arrays(directory, manifest['payload'])

        registry = BankRegistry()
        if manifest['gating_bank']:
            registry.install_distortion_bank(_restore_bank(DISTORTION_BANK_ID, 'gating-bank', layout, arrays))
        for task_id in manifest['tasks']:
            head = PredictionHead(task_id, arrays[f'head/{task_id}/weight'], arrays[f'head/{task_id}/bias'])
            head.freeze()
            registry.register(_restore_bank(task_id, f'bank/{task_id}', layout, arrays), head)

        store = None
        if manifest['store'] is not None:
            meta = manifest['store']
            store = CentroidStore(int(meta['k']), tuple(meta['stages']), float(meta['tau']),
                                  DistanceMetric(meta['metric']))
            for name, array in arrays.items():
                if name.startswith('centroids/'):
                    task_id, stage = name[len('centroids/'):].rsplit('/', 1)
                    store.centroids[(task_id, int(stage))] = array
    except CheckpointError:
        raise
    except KeyError as e:
        raise CheckpointTruncatedError(f'checkpoint misses entry {e.args[0]!r}') from None
    except (InvalidArgumentError, TypeError, ValueError) as e:
        raise CheckpointError(f'malformed checkpoint: {e}') from None

    logger.info('checkpoint loaded from %s: %d tasks', directory, len(registry))
    return Checkpoint(config, registry, store, manifest.get('experiment', {}), manifest.get('results', {}))


def payload_bytes(path) -> int:
    """Bytes of the tensor payloads listed in the manifest, excluding the manifest itself"""
    return sum(entry['bytes'] for entry in _read_manifest(Path(path))['payload'])
