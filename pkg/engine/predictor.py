"""
Inference over the registry: oracle head selection, all-head scoring and gated
weighted summation.
"""
from dataclasses import dataclass
import logging

import numpy as np

from engine.backbone import FrozenBackbone, forward_quality
from engine.errors import InvalidArgumentError, StateError
from engine.gating import CentroidStore, GateMode, gating_features, task_distances, weights_from_distances
from engine.normbank import BankRegistry
from engine.numerics import Mode, Tensor

logger = logging.getLogger(__name__)


@dataclass
class PassCounter:
    """Counts images pushed through quality (bank + head) and gating passes"""
    quality_passes: int = 0
    gating_passes: int = 0


def count_quality_passes(counter: PassCounter) -> int:
    return counter.quality_passes


@dataclass
class PredictionRecord:
    image_id: str
    scores: np.ndarray   # NaN marks heads skipped in hard mode
    weights: np.ndarray
    q_hat: float
    mode: str            # 'oracle:<task>' | 'soft' | 'hard'


def _as_batch(images: Tensor) -> tuple[Tensor, bool]:
    if images.ndim == 3:
        return images[None], True
    if images.ndim == 4:
        return images, False
    raise InvalidArgumentError(f'expected [C,H,W] or [N,C,H,W], got {images.shape}')


def _score(backbone, registry, task_id, batch, counter: PassCounter | None) -> np.ndarray:
    bank, head = registry.banks[task_id], registry.heads[task_id]
    if counter is not None:
        counter.quality_passes += batch.shape[0]
    return forward_quality(backbone, bank, head, batch, Mode.EVAL).scores


def predict_oracle(backbone: FrozenBackbone, registry: BankRegistry, images: Tensor, task_id: str,
                   counter: PassCounter | None = None):
    """Score with the known task's bank and head"""
    if task_id not in registry:
        raise InvalidArgumentError(f'unknown task {task_id!r}')
    if not registry.banks[task_id].frozen:
        raise StateError(f'task {task_id!r} is not frozen')
    batch, single = _as_batch(images)
    scores = _score(backbone, registry, task_id, batch, counter)
    return scores[0] if single else scores


def predict_all_heads(backbone: FrozenBackbone, registry: BankRegistry, images: Tensor,
                      counter: PassCounter | None = None) -> np.ndarray:
    """Scores of every head: [T] for one image, [N, T] for a batch"""
    if not len(registry):
        raise StateError('registry is empty')
    batch, single = _as_batch(images)
    scores = np.stack([_score(backbone, registry, t, batch, counter) for t in registry.task_ids], axis=1)
    return scores[0] if single else scores


def _combine(weights: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # fixed left-to-right summation over heads
    total = np.zeros(weights.shape[0], dtype=np.float64)
    for t in range(weights.shape[1]):
        if np.any(weights[:, t] != 0):
            total += weights[:, t] * np.nan_to_num(scores[:, t].astype(np.float64))
    return total


def predict_gated_batch(backbone: FrozenBackbone, registry: BankRegistry, store: CentroidStore, images: Tensor,
                        mode=GateMode.SOFT, counter: PassCounter | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (scores [N,T], weights [N,T], q_hat [N]); hard mode runs one head per image"""
    mode = GateMode(mode)
    task_ids = registry.task_ids
    if not task_ids:
        raise StateError('registry is empty')
    if not store.covers(task_ids):
        raise StateError('centroid store does not cover every registered task')
    batch, _ = _as_batch(images)

    features = gating_features(backbone, registry, batch)
    if counter is not None:
        counter.gating_passes += batch.shape[0]
    weights = weights_from_distances(task_distances(features, store, task_ids), store.tau, mode)

    if mode is GateMode.SOFT:
        scores = np.stack([_score(backbone, registry, t, batch, counter) for t in task_ids], axis=1)
    else:
        scores = np.full((batch.shape[0], len(task_ids)), np.nan, dtype=np.float32)
        chosen = weights.argmax(axis=1)
        for j, task_id in enumerate(task_ids):
            rows = np.flatnonzero(chosen == j)
            if rows.size:
                scores[rows, j] = _score(backbone, registry, task_id, batch[rows], counter)
    return scores, weights, _combine(weights, scores)


def predict_gated(backbone: FrozenBackbone, registry: BankRegistry, store: CentroidStore, image: Tensor,
                  mode=GateMode.SOFT, image_id: str = '', counter: PassCounter | None = None) -> PredictionRecord:
    scores, weights, q_hat = predict_gated_batch(backbone, registry, store, image, mode, counter)
    return PredictionRecord(image_id, scores[0], weights[0], float(q_hat[0]), GateMode(mode).value)


def oracle_record(backbone: FrozenBackbone, registry: BankRegistry, image: Tensor, task_id: str,
                  image_id: str = '') -> PredictionRecord:
    """Oracle prediction in record form: one-hot weight on the known task"""
    score = float(predict_oracle(backbone, registry, image, task_id))
    scores = np.full(len(registry), np.nan)
    weights = np.zeros(len(registry))
    index = registry.task_ids.index(task_id)
    scores[index] = score
    weights[index] = 1.0
    return PredictionRecord(image_id, scores, weights, score, f'oracle:{task_id}')


def predict_records(backbone: FrozenBackbone, registry: BankRegistry, store: CentroidStore | None, samples,
                    mode: str, oracle_task: str | None = None) -> list[PredictionRecord]:
    """One record per sample; mode 'oracle' scores every sample with `oracle_task`"""
    images = np.stack([s.image for s in samples])
    n, task_ids = len(samples), registry.task_ids
    if mode == 'oracle':
        if oracle_task is None:
            raise InvalidArgumentError('oracle mode needs the task id of the samples')
        q_hat = np.asarray(predict_oracle(backbone, registry, images, oracle_task), dtype=np.float64)
        index = task_ids.index(oracle_task)
        scores = np.full((n, len(task_ids)), np.nan)
        weights = np.zeros((n, len(task_ids)))
        scores[:, index] = q_hat
        weights[:, index] = 1.0
        label = f'oracle:{oracle_task}'
    else:
        scores, weights, q_hat = predict_gated_batch(backbone, registry, store, images, mode)
        label = GateMode(mode).value
    return [PredictionRecord(s.sample_id, scores[i], weights[i], float(q_hat[i]), label)
            for i, s in enumerate(samples)]
