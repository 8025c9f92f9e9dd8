"""
Pairwise training of one normalization bank and one linear head over the frozen backbone.

Pairs are scored under Thurstone Case V with unit variance and trained with
the fidelity loss; only γ/β of the fresh bank and the head are optimized.
"""
from dataclasses import dataclass, field, asdict, replace
import logging
import math
import time

import numpy as np
from tqdm import tqdm

from engine.backbone import FrozenBackbone, PredictionHead, forward_quality, backward_to_params
from engine.errors import InvalidArgumentError, InvalidConfigError, StateError, UndefinedCorrelationError
from engine.metrics import srcc
from engine.normbank import BankRegistry, TaskNormBank, DISTORTION_BANK_ID, init_bank, freeze_bank
from engine.numerics import AdamState, Mode, adam_step, normal_cdf
from engine.synthdata import (
    DistortionKind, PairSet, TaskDataset, PAIRS_PER_IMAGE,
    build_pairs, mos_array, stack_images,
)

logger = logging.getLogger(__name__)

P_CLAMP = 1e-6
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_decay_factor: float = 10.0
    lr_decay_epoch: int = 8
    max_epochs: int = 12
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0
    show_progress: bool = False

    def validate(self) -> 'TrainConfig':
        if self.lr <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise InvalidConfigError('lr, batch size and epochs must be positive')
        if not 1 <= self.lr_decay_epoch <= self.max_epochs:
            raise InvalidConfigError(f'decay epoch {self.lr_decay_epoch} outside 1..{self.max_epochs}')
        if self.lr_decay_factor <= 0:
            raise InvalidConfigError('lr decay factor must be positive')
        return self

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch; decayed from `lr_decay_epoch` on"""
        return self.lr / self.lr_decay_factor if epoch >= self.lr_decay_epoch else self.lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainConfig':
        try:
            return cls(**data).validate()
        except TypeError as e:
            raise InvalidConfigError(f'bad train config: {e}') from None


@dataclass
class TrainReport:
    task_id: str
    epoch_losses: list[float] = field(default_factory=list)
    epoch_lrs: list[float] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    val_srcc: float = float('nan')
    seconds: float = 0.0
    steps: int = 0

    def epoch_rows(self) -> list[list]:
        return [[self.task_id, i + 1, lr, loss]
                for i, (lr, loss) in enumerate(zip(self.epoch_lrs, self.epoch_losses))]


# ---------------------------------------------------------------------------
# probability model and loss
# ---------------------------------------------------------------------------

def thurstone_prob(score_x, score_y):
    """p̂ = Φ((s_x − s_y)/√2)"""
    return normal_cdf((np.asarray(score_x, dtype=np.float64) - np.asarray(score_y, dtype=np.float64)) / SQRT2)


def fidelity_loss(r, p_hat):
    """ℓ = 1 − √(r·p̂) − √((1−r)(1−p̂))"""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if np.any(p_hat < 0.0) or np.any(p_hat > 1.0) or not np.all(np.isfinite(p_hat)):
        raise InvalidArgumentError('predicted probability must lie in [0, 1]')
    r = np.asarray(r, dtype=np.float64)
    return 1.0 - np.sqrt(r * p_hat) - np.sqrt((1.0 - r) * (1.0 - p_hat))


def fidelity_loss_grad(r, p_hat):
    """dℓ/dp̂; p̂ is clamped to [1e-6, 1 − 1e-6] so the square roots stay finite"""
    p = np.clip(np.asarray(p_hat, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    r = np.asarray(r, dtype=np.float64)
    # r is binary, so the inactive branch vanishes
    positive = np.where(r > 0, -r / (2.0 * np.sqrt(np.maximum(r * p, P_CLAMP))), 0.0)
    negative = np.where(r < 1, (1.0 - r) / (2.0 * np.sqrt(np.maximum((1.0 - r) * (1.0 - p), P_CLAMP))), 0.0)
    return positive + negative


def _thurstone_density(u):
    """dp̂/ds_x at the normalized difference u = (s_x − s_y)/√2"""
    return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi) / SQRT2


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _validation_srcc(backbone, bank, head, samples, config: TrainConfig) -> float:
    if len(samples) < 2:
        return float('nan')
    scores = forward_quality(backbone, bank, head, stack_images(samples), Mode.EVAL, eps=config.bn_eps).scores
    try:
        return srcc(scores, mos_array(samples))
    except UndefinedCorrelationError:
        return float('nan')


def train_on_pairs(backbone: FrozenBackbone, bank: TaskNormBank, head: PredictionHead,
                   dataset: TaskDataset, pairs: PairSet, config: TrainConfig) -> TrainReport:
    """Optimizes bank γ/β and the head in place with Adam on the fidelity loss"""
    config.validate()
    if bank.frozen:
        raise StateError(f'bank {bank.task_id!r} is frozen')
    if pairs.count and max(pairs.index_x.max(), pairs.index_y.max()) >= len(dataset.train):
        raise InvalidArgumentError('pair indices exceed the training split')

    images = stack_images(dataset.train)
    labels = pairs.labels
    rng = np.random.default_rng(config.seed)
    hyper = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    gamma_states = [AdamState.for_param(site.gamma, **hyper) for site in bank.sites]
    beta_states = [AdamState.for_param(site.beta, **hyper) for site in bank.sites]
    weight_state = AdamState.for_param(head.weight, **hyper)
    bias_state = AdamState.for_param(head.bias, **hyper)

    report = TrainReport(bank.task_id)
    started = time.perf_counter()
    epochs = tqdm(range(1, config.max_epochs + 1), desc=f'train {bank.task_id}',
                  disable=not config.show_progress, leave=False)
    for epoch in epochs:
        lr = config.lr_at(epoch)
        order = rng.permutation(pairs.count)
        losses = []
        for start in range(0, pairs.count, config.batch_size):
            batch = order[start:start + config.batch_size]
            b = batch.shape[0]
            batch_images = np.concatenate([images[pairs.index_x[batch]], images[pairs.index_y[batch]]])
            result = forward_quality(backbone, bank, head, batch_images, Mode.TRAIN,
                                     momentum=config.bn_momentum, eps=config.bn_eps)
            scores = result.scores.astype(np.float64)
            diff = (scores[:b] - scores[b:]) / SQRT2
            p_hat = normal_cdf(diff)
            loss = fidelity_loss(labels[batch], p_hat)
            losses.append(float(loss.mean()))

            # d mean(ℓ) / d score
            grad_diff = fidelity_loss_grad(labels[batch], p_hat) * _thurstone_density(diff) / b
            grad_scores = np.concatenate([grad_diff, -grad_diff]).astype(result.scores.dtype)
            grads = backward_to_params(backbone, grad_scores, result, head)

            for s, site in enumerate(bank.sites):
                site.gamma[...], gamma_states[s] = adam_step(site.gamma, grads.gamma[s],
                                                             _with_lr(gamma_states[s], lr))
                site.beta[...], beta_states[s] = adam_step(site.beta, grads.beta[s],
                                                           _with_lr(beta_states[s], lr))
            head.weight[...], weight_state = adam_step(head.weight, grads.head_weight, _with_lr(weight_state, lr))
            head.bias[...], bias_state = adam_step(head.bias, grads.head_bias, _with_lr(bias_state, lr))
            report.steps += 1

        report.batch_losses.extend(losses)
        report.epoch_losses.append(float(np.mean(losses)))
        report.epoch_lrs.append(lr)
        logger.info('task %s epoch %d/%d lr %.1e loss %.4f', bank.task_id, epoch, config.max_epochs,
                    lr, report.epoch_losses[-1])

    report.val_srcc = _validation_srcc(backbone, bank, head, dataset.val, config)
    report.seconds = time.perf_counter() - started
    logger.info('task %s trained: %d steps, val SRCC %.3f, %.1fs', bank.task_id, report.steps,
                report.val_srcc, report.seconds)
    return report


def _with_lr(state: AdamState, lr: float) -> AdamState:
    return state if state.lr == lr else replace(state, lr=lr)


def default_pair_count(dataset: TaskDataset) -> int:
    n = len(dataset.train)
    return min(PAIRS_PER_IMAGE * n, math.comb(n, 2))


def train_task(backbone: FrozenBackbone, registry: BankRegistry, dataset: TaskDataset, pairs: PairSet,
               config: TrainConfig) -> tuple[TaskNormBank, PredictionHead, TrainReport]:
    """Learns a fresh bank + head for one task, freezes them and registers them"""
    if dataset.task_id in registry:
        raise StateError(f'task {dataset.task_id!r} is already registered')
    if pairs.task_id != dataset.task_id:
        raise InvalidArgumentError(f'pairs of {pairs.task_id!r} do not belong to {dataset.task_id!r}')

    bank = init_bank(backbone.config, dataset.task_id)
    head = PredictionHead.seeded(dataset.task_id, backbone.config.feature_dim, config.seed)
    report = train_on_pairs(backbone, bank, head, dataset, pairs, config)
    freeze_bank(bank)
    head.freeze()
    registry.register(bank, head)
    return bank, head, report


def pretrain_gating_bank(backbone: FrozenBackbone, registry: BankRegistry, corpus: TaskDataset,
                         config: TrainConfig, n_pairs: int | None = None) -> tuple[TaskNormBank, TrainReport]:
    """Trains the distortion-aware bank on a mixed corpus; the head is thrown away"""
    covered = {s.distortion_kind for s in corpus.train}
    missing = [k.value for k in DistortionKind if k not in covered]
    if missing:
        raise InvalidArgumentError(f'gating corpus is missing distortion kinds: {missing}')

    pairs = build_pairs(corpus, n_pairs or default_pair_count(corpus), config.seed)
    bank = init_bank(backbone.config, DISTORTION_BANK_ID)
    throwaway = PredictionHead.seeded(DISTORTION_BANK_ID, backbone.config.feature_dim, config.seed)
    report = train_on_pairs(backbone, bank, throwaway, corpus, pairs, config)
    freeze_bank(bank)
    registry.install_distortion_bank(bank)
    return bank, report


def fine_tune_shared(backbone: FrozenBackbone, bank: TaskNormBank, head: PredictionHead, dataset: TaskDataset,
                     pairs: PairSet, config: TrainConfig) -> TrainReport:
    """Task-agnostic baseline: keeps training one shared bank and head on the next task"""
    report = train_on_pairs(backbone, bank, head, dataset, pairs, config)
    report.task_id = dataset.task_id
    return report
