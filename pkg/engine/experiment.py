"""
Experiment orchestration: sequence runs, order and length robustness,
ablations and the divergence analysis.

Every seed is bound to a task id, never to a sequence position, so a task's
bank and head come out the same whatever order it is trained in.
"""
from dataclasses import dataclass, field, replace
import logging

import numpy as np
from tqdm import tqdm

from engine.backbone import BackboneConfig, FrozenBackbone, PredictionHead, build_backbone, forward_quality
from engine.checkpoint import load_checkpoint
from engine.errors import CheckpointError, InvalidArgumentError, InvalidConfigError, UndefinedCorrelationError
from engine.gating import CentroidStore, GateMode, GatingConfig, mean_gate_weights, summarize_task
from engine.metrics import SequenceResults, BankGaussian, kl_matrix, kl_vs_srcc_correlation, srcc
from engine.normbank import BankRegistry, DISTORTION_BANK_ID, TaskNormBank, init_bank, freeze_bank
from engine.numerics import Mode
from engine.predictor import PassCounter, predict_gated_batch, predict_oracle
from engine.synthdata import (
    DistortionKind, TaskDataset, TaskSpec,
    build_pairs, make_gating_corpus, make_task_dataset, mos_array, stack_images,
)
from engine.trainer import TrainConfig, TrainReport, fine_tune_shared, pretrain_gating_bank, train_task
from utils.seed_helper import derive_seed

logger = logging.getLogger(__name__)

TSN = 'tsn'
TASK_AGNOSTIC_BN = 'task-agnostic-bn'
SHARED_ID = 'task-agnostic'
ORDER_LABELS = ('I', 'II', 'III', 'IV', 'V', 'VI', 'VII', 'VIII')
TSN_MODES = ('soft', 'hard', 'oracle')
SHARED_MODES = ('shared',)


def default_tasks() -> tuple[TaskSpec, ...]:
    return tuple(TaskSpec.single(k) for k in (
        DistortionKind.BLUR, DistortionKind.CONTRAST, DistortionKind.WHITE_NOISE, DistortionKind.SALT_PEPPER,
    ))


@dataclass(frozen=True)
class SeedConfig:
    data: int = 0
    filters: int = 0
    training: int = 0
    kmeans: int = 0

    def validate(self) -> 'SeedConfig':
        for name in ('data', 'filters', 'training', 'kmeans'):
            value = getattr(self, name)
            if not isinstance(value, int) or not 0 <= value < 2 ** 64:
                raise InvalidConfigError(f'seed {name!r} must be an unsigned 64-bit integer')
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple[TaskSpec, ...] = field(default_factory=default_tasks)
    order: str = 'I'
    seeds: SeedConfig = field(default_factory=SeedConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gating: GatingConfig = field(default_factory=GatingConfig)
    baseline: str = TSN
    images_per_task: int = 100
    pairs_per_image: int = 10
    gating_corpus_images: int = 120
    label: str = 'default'

    def validate(self) -> 'ExperimentConfig':
        if not self.tasks:
            raise InvalidConfigError('experiment needs at least one task')
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise InvalidConfigError(f'task ids must be unique: {ids}')
        if DISTORTION_BANK_ID in ids or SHARED_ID in ids:
            raise InvalidConfigError('task ids collide with a reserved bank id')
        if self.order not in ORDER_LABELS:
            raise InvalidConfigError(f'unknown order {self.order!r}, expected one of {ORDER_LABELS}')
        if self.baseline not in (TSN, TASK_AGNOSTIC_BN):
            raise InvalidConfigError(f'unknown baseline {self.baseline!r}')
        if self.images_per_task < 20 or self.pairs_per_image < 1 or self.gating_corpus_images < 20:
            raise InvalidConfigError('image and pair counts are too small')
        for task in self.tasks:
            try:
                task.validate()
            except InvalidArgumentError as e:
                raise InvalidConfigError(str(e)) from None
        self.seeds.validate()
        self.backbone_config().validate()
        self.train.validate()
        self.gating.validate(self.backbone.stage_count)
        return self

    def backbone_config(self) -> BackboneConfig:
        return replace(self.backbone, filter_seed=self.seeds.filters)

    def with_seed(self, seed: int) -> 'ExperimentConfig':
        return replace(self, seeds=SeedConfig(seed, seed, seed, seed))

    def ordered_tasks(self) -> list[TaskSpec]:
        return order_tasks(self.tasks, self.order)

    def to_dict(self) -> dict:
        return {
            'label': self.label,
            'tasks': [t.to_dict() for t in self.tasks],
            'order': self.order,
            'seeds': vars(self.seeds).copy(),
            'backbone': self.backbone.to_dict(),
            'train': self.train.to_dict(),
            'gating': self.gating.to_dict(),
            'baseline': self.baseline,
            'images_per_task': self.images_per_task,
            'pairs_per_image': self.pairs_per_image,
            'gating_corpus_images': self.gating_corpus_images,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ExperimentConfig':
        if not isinstance(data, dict):
            raise InvalidConfigError('experiment config must be a JSON object')
        known = {'label', 'tasks', 'order', 'seeds', 'backbone', 'train', 'gating', 'baseline',
                 'images_per_task', 'pairs_per_image', 'gating_corpus_images'}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfigError(f'unknown config keys: {sorted(unknown)}')
        try:
            kwargs = {k: data[k] for k in ('label', 'order', 'baseline', 'images_per_task',
                                           'pairs_per_image', 'gating_corpus_images') if k in data}
            if 'tasks' in data:
                kwargs['tasks'] = tuple(TaskSpec.from_dict(t) for t in data['tasks'])
            if 'seeds' in data:
                kwargs['seeds'] = SeedConfig(**data['seeds'])
            if 'backbone' in data:
                kwargs['backbone'] = BackboneConfig.from_dict(data['backbone'])
            if 'train' in data:
                kwargs['train'] = TrainConfig.from_dict(data['train'])
            if 'gating' in data:
                kwargs['gating'] = GatingConfig.from_dict(data['gating'])
            return cls(**kwargs).validate()
        except InvalidConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise InvalidConfigError(f'bad experiment config: {e}') from None


def order_tasks(tasks, label: str) -> list[TaskSpec]:
    """I: as given; II: alternating, realistic first; III/IV: family-blocked; V-VIII: reverses"""
    if label not in ORDER_LABELS:
        raise InvalidArgumentError(f'unknown order {label!r}')
    tasks = list(tasks)
    synthetic = [t for t in tasks if t.family == 'synthetic']
    realistic = [t for t in tasks if t.family == 'realistic']
    base = ORDER_LABELS.index(label) % 4
    if base == 0:
        ordered = tasks
    elif base == 1:
        ordered = []
        for i in range(max(len(synthetic), len(realistic))):
            ordered += realistic[i:i + 1] + synthetic[i:i + 1]
    elif base == 2:
        ordered = synthetic + realistic
    else:
        ordered = realistic + synthetic
    return ordered[::-1] if ORDER_LABELS.index(label) >= 4 else ordered


# ---------------------------------------------------------------------------
# seeds and data
# ---------------------------------------------------------------------------

def task_train_config(config: ExperimentConfig, task_id: str) -> TrainConfig:
    return replace(config.train, seed=derive_seed(config.seeds.training, 'train', task_id))


def build_task_data(config: ExperimentConfig, spec: TaskSpec) -> TaskDataset:
    return make_task_dataset(spec, config.images_per_task, derive_seed(config.seeds.data, 'data', spec.task_id),
                             side=config.backbone.input_side)


def build_task_pairs(config: ExperimentConfig, dataset: TaskDataset):
    n_pairs = min(config.pairs_per_image * len(dataset.train), len(dataset.train) * (len(dataset.train) - 1) // 2)
    return build_pairs(dataset, n_pairs, derive_seed(config.seeds.data, 'pairs', dataset.task_id))


def load_gating_bank(path, backbone: FrozenBackbone) -> TaskNormBank:
    """Distortion-aware bank of a saved checkpoint, checked against the run's backbone"""
    checkpoint = load_checkpoint(path)
    if checkpoint.backbone_config != backbone.config:
        raise InvalidConfigError(f'gating checkpoint {path} was built for backbone {checkpoint.backbone_config}, '
                                 f'this run uses {backbone.config}')
    if checkpoint.registry.distortion_bank is None:
        raise CheckpointError(f'{path} holds no gating bank')
    return checkpoint.registry.distortion_bank


def install_gating_bank(config: ExperimentConfig, backbone: FrozenBackbone, registry: BankRegistry,
                        gating_checkpoint=None):
    """Trains the distortion-aware bank, reuses a saved one, or installs an untrained identity bank"""
    if gating_checkpoint is not None:
        if config.gating.bank == 'identity':
            raise InvalidConfigError('a gating checkpoint cannot stand in for the identity gating bank')
        registry.install_distortion_bank(load_gating_bank(gating_checkpoint, backbone))
        logger.info('gating bank loaded from %s', gating_checkpoint)
        return None
    if config.gating.bank == 'identity':
        registry.install_distortion_bank(freeze_bank(init_bank(backbone.config, DISTORTION_BANK_ID)))
        return None
    corpus = make_gating_corpus(config.gating_corpus_images, config.backbone.input_side,
                                derive_seed(config.seeds.data, 'gating-corpus'))
    train_config = replace(config.train, seed=derive_seed(config.seeds.training, 'gating'))
    _, report = pretrain_gating_bank(backbone, registry, corpus, train_config)
    return report


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_step(backbone: FrozenBackbone, registry: BankRegistry, store: CentroidStore,
                  datasets: list[TaskDataset], modes=TSN_MODES, counters: dict | None = None) -> dict:
    """
    Predictions of the current model on every seen test set: {mode: [scores per test set]}.
    Passes are tallied into counters[mode] when a counter is given for that mode.
    """
    counters = counters or {}
    out = {}
    for mode in modes:
        counter = counters.get(mode)
        per_set = []
        for dataset in datasets:
            images = stack_images(dataset.test)
            if mode == 'oracle':
                per_set.append(predict_oracle(backbone, registry, images, dataset.task_id, counter))
            else:
                per_set.append(predict_gated_batch(backbone, registry, store, images, mode, counter)[2])
        out[mode] = per_set
    return out


def _shared_step(backbone, bank, head, datasets, counter: PassCounter) -> dict:
    per_set = []
    for dataset in datasets:
        images = stack_images(dataset.test)
        counter.quality_passes += images.shape[0]
        per_set.append(forward_quality(backbone, bank, head, images, Mode.EVAL).scores)
    return {'shared': per_set}


def _safe_srcc(a, b) -> float:
    try:
        return srcc(a, b)
    except UndefinedCorrelationError:
        logger.warning('undefined correlation on constant predictions, recorded as 0')
        return 0.0


def results_from_predictions(task_ids, predictions: dict, mos: list) -> SequenceResults:
    """predictions[(t, k)] are model t's scores on test set k (k ≤ t)"""
    n = len(task_ids)
    srcc_matrix = np.full((n, n), np.nan)
    cross = np.full((n, n), np.nan)
    for t in range(n):
        for k in range(t + 1):
            srcc_matrix[t, k] = _safe_srcc(predictions[(t, k)], mos[k])
            if k < t:
                cross[t, k] = _safe_srcc(predictions[(t, k)], predictions[(k, k)])
    return SequenceResults.from_matrices(task_ids, srcc_matrix, cross)


@dataclass
class SequenceRun:
    config: ExperimentConfig
    backbone: FrozenBackbone
    registry: BankRegistry
    store: CentroidStore | None
    datasets: list[TaskDataset]
    reports: list[TrainReport] = field(default_factory=list)
    gating_report: TrainReport | None = None
    predictions: dict = field(default_factory=dict)   # mode -> {(t, k): scores}
    results: dict = field(default_factory=dict)       # mode -> SequenceResults
    counters: dict = field(default_factory=dict)      # mode -> PassCounter
    gating_checkpoint: str | None = None

    @property
    def task_ids(self) -> list[str]:
        return [d.task_id for d in self.datasets]

    @property
    def headline(self) -> SequenceResults:
        if self.config.baseline == TASK_AGNOSTIC_BN:
            return self.results['shared']
        return self.results[self.config.gating.mode.value]

    def final_oracle_scores(self) -> dict[str, np.ndarray]:
        last = len(self.datasets) - 1
        return {d.task_id: self.predictions['oracle'][(last, k)] for k, d in enumerate(self.datasets)}

    def results_dict(self) -> dict:
        return {mode: r.to_dict() for mode, r in self.results.items()}


def run_sequence(config: ExperimentConfig, show_progress: bool = False, gating_checkpoint=None) -> SequenceRun:
    """
    Trains the configured sequence task by task, evaluating every seen test set
    after each one. With `gating_checkpoint` the distortion-aware bank comes
    from that saved checkpoint instead of being trained.
    """
    config.validate()
    if gating_checkpoint is not None and config.baseline == TASK_AGNOSTIC_BN:
        raise InvalidConfigError('the task-agnostic-bn baseline has no gating bank to load')
    backbone = build_backbone(config.backbone_config())
    registry = BankRegistry()
    specs = config.ordered_tasks()
    datasets = [build_task_data(config, spec) for spec in specs]
    run = SequenceRun(config, backbone, registry, None, datasets)
    baseline = config.baseline == TASK_AGNOSTIC_BN
    modes = SHARED_MODES if baseline else TSN_MODES
    run.predictions = {mode: {} for mode in modes}
    run.counters = {mode: PassCounter() for mode in modes}

    if baseline:
        shared_bank = init_bank(backbone.config, SHARED_ID)
        shared_head = PredictionHead.seeded(SHARED_ID, backbone.config.feature_dim,
                                            derive_seed(config.seeds.training, 'train', SHARED_ID))
    else:
        run.gating_report = install_gating_bank(config, backbone, registry, gating_checkpoint)
        run.gating_checkpoint = None if gating_checkpoint is None else str(gating_checkpoint)
        run.store = CentroidStore.from_config(config.gating)

    steps = tqdm(enumerate(datasets), total=len(datasets), desc=f'sequence {config.order}',
                 disable=not show_progress)
    for t, dataset in steps:
        pairs = build_task_pairs(config, dataset)
        train_config = task_train_config(config, dataset.task_id)
        if baseline:
            run.reports.append(fine_tune_shared(backbone, shared_bank, shared_head, dataset, pairs, train_config))
            step = _shared_step(backbone, shared_bank, shared_head, datasets[:t + 1], run.counters['shared'])
        else:
            _, _, report = train_task(backbone, registry, dataset, pairs, train_config)
            run.reports.append(report)
            summarize_task(backbone, registry, dataset, run.store,
                           derive_seed(config.seeds.kmeans, 'kmeans', dataset.task_id))
            step = evaluate_step(backbone, registry, run.store, datasets[:t + 1], modes, run.counters)
        for mode, per_set in step.items():
            for k, scores in enumerate(per_set):
                run.predictions[mode][(t, k)] = scores
        logger.info('order %s: task %d/%d (%s) done', config.order, t + 1, len(datasets), dataset.task_id)

    if baseline:
        registry.register(freeze_bank(shared_bank), shared_head)
        shared_head.freeze()

    mos = [mos_array(d.test) for d in datasets]
    run.results = {mode: results_from_predictions(run.task_ids, run.predictions[mode], mos) for mode in modes}
    logger.info('run %s order %s: %s', config.label, config.order, run.headline.scalars())
    return run


# ---------------------------------------------------------------------------
# robustness suites and ablations
# ---------------------------------------------------------------------------

@dataclass
class OrderSuite:
    rows: list[dict]
    runs: dict[str, SequenceRun]

    def msrcc_spread(self) -> float:
        values = [row['mSRCC'] for row in self.rows]
        return float(max(values) - min(values))


def run_order_suite(config: ExperimentConfig, labels=ORDER_LABELS[:4], show_progress: bool = False,
                    gating_checkpoint=None) -> OrderSuite:
    labels = list(labels)
    if len(labels) < 2:
        raise InvalidArgumentError('an order suite needs at least two orders')
    rows, runs = [], {}
    for label in labels:
        run = run_sequence(replace(config, order=label), show_progress=show_progress,
                           gating_checkpoint=gating_checkpoint)
        runs[label] = run
        rows.append({'order': label, 'tasks': ' '.join(run.task_ids), **run.headline.scalars()})
    return OrderSuite(rows, runs)


def run_length_curve(config_or_run) -> list[float]:
    """mPSI_t for every prefix length t = 1..T"""
    run = config_or_run if isinstance(config_or_run, SequenceRun) else run_sequence(config_or_run)
    return run.headline.length_curve()


def reevaluate(run: SequenceRun, gating: GatingConfig) -> dict[str, SequenceResults]:
    """Replays the per-task evaluations of a trained TSN run under another gating setup"""
    config = replace(run.config, gating=gating)
    registry = BankRegistry(dict(run.registry.banks), dict(run.registry.heads), run.registry.distortion_bank)
    if gating.bank != run.config.gating.bank:
        registry.distortion_bank = None
        install_gating_bank(config, run.backbone, registry)
    store = CentroidStore.from_config(gating)
    for dataset in run.datasets:
        summarize_task(run.backbone, registry, dataset, store,
                       derive_seed(config.seeds.kmeans, 'kmeans', dataset.task_id))

    modes = ('soft', 'hard')
    predictions = {mode: {} for mode in modes}
    for t in range(len(run.datasets)):
        step = evaluate_step(run.backbone, registry.prefix(t + 1), store, run.datasets[:t + 1], modes)
        for mode, per_set in step.items():
            for k, scores in enumerate(per_set):
                predictions[mode][(t, k)] = scores
    mos = [mos_array(d.test) for d in run.datasets]
    return {mode: results_from_predictions(run.task_ids, predictions[mode], mos) for mode in modes}


STAGE_SETS = ((4,), (3, 4), (2, 3, 4), (1, 2, 3, 4))


def run_ablation_suite(config: ExperimentConfig, run: SequenceRun | None = None, gating_checkpoint=None) -> list[dict]:
    """TSN soft/hard, task-agnostic BN, identity gating bank and every gating stage set"""
    run = run or run_sequence(replace(config, baseline=TSN), gating_checkpoint=gating_checkpoint)
    rows = [
        {'variant': 'tsn-soft', **run.results['soft'].scalars()},
        {'variant': 'tsn-hard', **run.results['hard'].scalars()},
        {'variant': 'tsn-oracle', **run.results['oracle'].scalars()},
    ]
    baseline = run_sequence(replace(run.config, baseline=TASK_AGNOSTIC_BN))
    rows.append({'variant': TASK_AGNOSTIC_BN, **baseline.headline.scalars()})

    identity = reevaluate(run, replace(run.config.gating, bank='identity'))
    rows.append({'variant': 'identity-gating-bank', **identity['soft'].scalars()})
    stage_count = run.config.backbone.stage_count
    for stages in STAGE_SETS:
        if max(stages) > stage_count:
            continue
        results = reevaluate(run, replace(run.config.gating, stages=stages))
        rows.append({'variant': 'stages-' + '+'.join(map(str, stages)), **results['soft'].scalars()})
    return rows


# ---------------------------------------------------------------------------
# divergence analysis
# ---------------------------------------------------------------------------

def cross_task_srcc(backbone: FrozenBackbone, registry: BankRegistry, datasets: list[TaskDataset]) -> np.ndarray:
    """[i, j] = SRCC of bank+head i on test set j"""
    ids = registry.task_ids
    out = np.zeros((len(ids), len(datasets)))
    for i, task_id in enumerate(ids):
        for j, dataset in enumerate(datasets):
            scores = predict_oracle(backbone, registry, stack_images(dataset.test), task_id)
            out[i, j] = _safe_srcc(scores, mos_array(dataset.test))
    return out


@dataclass
class KlAnalysis:
    task_ids: list[str]
    kl: np.ndarray
    cross_srcc: np.ndarray
    correlation: float
    within_family_kl: float
    cross_family_kl: float

    def to_dict(self) -> dict:
        return {
            'task_ids': self.task_ids,
            'kl': self.kl.tolist(),
            'cross_srcc': self.cross_srcc.tolist(),
            'kl_vs_srcc': self.correlation,
            'within_family_kl': self.within_family_kl,
            'cross_family_kl': self.cross_family_kl,
        }


def analyze_kl(backbone: FrozenBackbone, registry: BankRegistry, datasets: list[TaskDataset]) -> KlAnalysis:
    by_id = {d.task_id: d for d in datasets}
    ids = [t for t in registry.task_ids if t in by_id]
    if len(ids) < 2:
        raise InvalidArgumentError('divergence analysis needs at least two tasks')
    ordered = [by_id[t] for t in ids]
    kl = kl_matrix([BankGaussian.from_bank(registry.banks[t]) for t in ids])
    view = BankRegistry({t: registry.banks[t] for t in ids}, {t: registry.heads[t] for t in ids})
    cross = cross_task_srcc(backbone, view, ordered)
    families = [d.spec.family for d in ordered]
    within = [kl[i, j] for i in range(len(ids)) for j in range(len(ids)) if i != j and families[i] == families[j]]
    across = [kl[i, j] for i in range(len(ids)) for j in range(len(ids)) if families[i] != families[j]]
    return KlAnalysis(
        task_ids=ids,
        kl=kl,
        cross_srcc=cross,
        correlation=kl_vs_srcc_correlation(kl, cross),
        within_family_kl=float(np.mean(within)) if within else float('nan'),
        cross_family_kl=float(np.mean(across)) if across else float('nan'),
    )


def generalization_weights(run: SequenceRun, spec: TaskSpec) -> np.ndarray:
    """Mean soft head weights on an unseen task built from `spec`"""
    dataset = build_task_data(run.config, spec)
    return mean_gate_weights(run.backbone, run.registry, run.store, dataset)
