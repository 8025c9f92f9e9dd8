"""
Per-task normalization banks, the registry that holds them, and parameter accounting.
"""
from dataclasses import dataclass, field
import hashlib
import logging
import threading

import numpy as np

from engine.backbone import BackboneConfig, PredictionHead
from engine.errors import InvalidArgumentError, StateError
from engine.numerics import DTYPE, NormSite

logger = logging.getLogger(__name__)

DISTORTION_BANK_ID = 'distortion-aware'

# BN channel list of the method's ResNet-18 variant: stem, then four stages of
# two basic blocks (two BN each) with a downsample BN in stages 2-4
RESNET18_BN_SITES = (64,) + (64,) * 4 + (128,) * 5 + (256,) * 5 + (512,) * 5
RESNET18_HEAD_INPUTS = 512


@dataclass
class TaskNormBank:
    task_id: str
    sites: tuple[NormSite, ...]
    frozen: bool = False

    @property
    def layout(self) -> tuple[int, ...]:
        return tuple(site.channels for site in self.sites)

    def trainable_params(self) -> int:
        return 2 * sum(self.layout)

    def copy(self, task_id: str | None = None, dtype=None) -> 'TaskNormBank':
        return TaskNormBank(task_id or self.task_id, tuple(site.copy(dtype) for site in self.sites))

    def fingerprint(self) -> str:
        """SHA-256 over every stored array, for byte-level comparisons"""
        digest = hashlib.sha256(self.task_id.encode('utf-8'))
        for site in self.sites:
            for name, array in site.arrays().items():
                digest.update(name.encode('utf-8'))
                digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()


def init_bank(config: BackboneConfig, task_id: str) -> TaskNormBank:
    """Identity normalization at every site: γ=1, β=0, μ=0, var=1"""
    return TaskNormBank(task_id, tuple(NormSite.identity(c, DTYPE) for c in config.channels))


def freeze_bank(bank: TaskNormBank) -> TaskNormBank:
    if bank.frozen:
        raise StateError(f'bank {bank.task_id!r} is already frozen')
    for site in bank.sites:
        site.freeze()
    bank.frozen = True
    return bank


def head_fingerprint(head: PredictionHead) -> str:
    digest = hashlib.sha256(head.task_id.encode('utf-8'))
    digest.update(np.ascontiguousarray(head.weight).tobytes())
    digest.update(np.ascontiguousarray(head.bias).tobytes())
    return digest.hexdigest()


@dataclass
class BankRegistry:
    """Ordered task banks and heads plus the single distortion-aware gating bank"""
    banks: dict[str, TaskNormBank] = field(default_factory=dict)
    heads: dict[str, PredictionHead] = field(default_factory=dict)
    distortion_bank: TaskNormBank | None = None
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    @property
    def task_ids(self) -> list[str]:
        return list(self.banks)

    def __len__(self) -> int:
        return len(self.banks)

    def __contains__(self, task_id) -> bool:
        return task_id in self.banks

    def _check_layout(self, bank: TaskNormBank):
        reference = next(iter(self.banks.values()), None) or self.distortion_bank
        if reference is not None and reference.layout != bank.layout:
            raise InvalidArgumentError(f'bank layout {bank.layout} differs from registry layout {reference.layout}')

    def register(self, bank: TaskNormBank, head: PredictionHead):
        with self._lock:
            if bank.task_id in self.banks:
                raise StateError(f'task {bank.task_id!r} is already registered')
            if bank.task_id == DISTORTION_BANK_ID:
                raise StateError(f'{DISTORTION_BANK_ID!r} is reserved for the gating bank')
            if not bank.frozen:
                raise StateError(f'bank {bank.task_id!r} must be frozen before registration')
            if head.task_id != bank.task_id:
                raise InvalidArgumentError(f'head {head.task_id!r} does not belong to bank {bank.task_id!r}')
            self._check_layout(bank)
            self.banks[bank.task_id] = bank
            self.heads[bank.task_id] = head
            logger.info('registered task %s (%d tasks)', bank.task_id, len(self.banks))

    def install_distortion_bank(self, bank: TaskNormBank):
        with self._lock:
            if not bank.frozen:
                raise StateError('the distortion-aware bank must be frozen before installation')
            self._check_layout(bank)
            self.distortion_bank = bank

    def prefix(self, count: int) -> 'BankRegistry':
        """Read-only view of the first `count` tasks (shares the frozen arrays)"""
        ids = self.task_ids[:count]
        return BankRegistry(
            banks={t: self.banks[t] for t in ids},
            heads={t: self.heads[t] for t in ids},
            distortion_bank=self.distortion_bank,
        )

    def fingerprints(self) -> dict[str, tuple[str, str]]:
        return {t: (self.banks[t].fingerprint(), head_fingerprint(self.heads[t])) for t in self.banks}


def count_params(site_channels, head_inputs: int, head_bias: bool = True) -> int:
    """Trainable parameters added per task: γ and β at every site plus the FC head"""
    return 2 * sum(site_channels) + head_inputs + (1 if head_bias else 0)


def count_task_params(registry: BankRegistry, config: BackboneConfig) -> int:
    if not registry.banks:
        raise StateError('no bank registered yet')
    return count_params(config.channels, config.feature_dim)


def count_centroid_params(k: int, stage_channels) -> int:
    """Memory spent on one task's gating centroids"""
    return k * sum(stage_channels)
