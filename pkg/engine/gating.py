"""
K-means gating: per-task centroid summaries of pooled features under the
distortion-aware bank, min-distance relevance, softmin weights averaged over
stages, and the hard (argmin) variant.
"""
from dataclasses import dataclass, field, asdict
from enum import Enum
import logging

import numpy as np

from engine.backbone import FrozenBackbone, forward_features
from engine.errors import InvalidArgumentError, InvalidConfigError, StateError
from engine.normbank import BankRegistry
from engine.numerics import DTYPE, Mode, Tensor
from engine.synthdata import TaskDataset, stack_images

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 100


class GateMode(str, Enum):
    SOFT = 'soft'
    HARD = 'hard'


class DistanceMetric(str, Enum):
    EUCLIDEAN = 'euclidean'
    CHEBYSHEV = 'chebyshev'


@dataclass(frozen=True)
class GatingConfig:
    k: int = 8
    tau: float = 32.0
    stages: tuple[int, ...] = (3, 4)
    mode: GateMode = GateMode.SOFT
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN
    bank: str = 'distortion-aware'  # or 'identity'

    def validate(self, stage_count: int | None = None) -> 'GatingConfig':
        if self.k < 1:
            raise InvalidConfigError('K must be at least 1')
        if self.tau < 0:
            raise InvalidConfigError('temperature must be non-negative')
        if not self.stages or len(set(self.stages)) != len(self.stages):
            raise InvalidConfigError(f'gating stages {self.stages} must be distinct and non-empty')
        if stage_count is not None and any(not 1 <= s <= stage_count for s in self.stages):
            raise InvalidConfigError(f'gating stages {self.stages} outside 1..{stage_count}')
        if self.bank not in ('distortion-aware', 'identity'):
            raise InvalidConfigError(f'unknown gating bank {self.bank!r}')
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data.update(stages=list(self.stages), mode=self.mode.value, metric=self.metric.value)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'GatingConfig':
        try:
            data = dict(data)
            if 'stages' in data:
                data['stages'] = tuple(int(s) for s in data['stages'])
            if 'mode' in data:
                data['mode'] = GateMode(data['mode'])
            if 'metric' in data:
                data['metric'] = DistanceMetric(data['metric'])
            return cls(**data).validate()
        except (TypeError, ValueError) as e:
            raise InvalidConfigError(f'bad gating config: {e}') from None


@dataclass
class CentroidStore:
    k: int
    stages: tuple[int, ...] = (3, 4)
    tau: float = 32.0
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN
    centroids: dict[tuple[str, int], Tensor] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: GatingConfig) -> 'CentroidStore':
        return cls(config.k, tuple(config.stages), config.tau, config.metric)

    @property
    def task_ids(self) -> list[str]:
        seen = []
        for task_id, _ in self.centroids:
            if task_id not in seen:
                seen.append(task_id)
        return seen

    def covers(self, task_ids) -> bool:
        return all((t, s) in self.centroids for t in task_ids for s in self.stages)

    def with_stages(self, stages) -> 'CentroidStore':
        """Same centroids, restricted to another gating stage set"""
        stages = tuple(stages)
        kept = {key: c for key, c in self.centroids.items() if key[1] in stages}
        return CentroidStore(self.k, stages, self.tau, self.metric, kept)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list[float]
    iterations: int


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=-1)


def _greedy_kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; each step keeps the best of 2 + log(k) sampled candidates"""
    n = points.shape[0]
    trials = 2 + int(np.log(k))
    centers = [points[rng.integers(n)]]
    closest = _squared_distances(points, np.array(centers))[:, 0]
    for _ in range(1, k):
        potential = closest.sum()
        if potential <= 0:
            candidates = rng.integers(n, size=trials)
        else:
            cumulative = np.cumsum(closest)
            candidates = np.searchsorted(cumulative, rng.random(trials) * potential, side='right')
            candidates = np.minimum(candidates, n - 1)
        candidate_closest = np.minimum(closest[None, :], _squared_distances(points, points[candidates]).T)
        best = int(np.argmin(candidate_closest.sum(axis=1)))
        centers.append(points[candidates[best]])
        closest = candidate_closest[best]
    return np.array(centers)


def lloyd(points, k: int, seed: int, max_iterations: int = MAX_ITERATIONS) -> KMeansResult:
    """Lloyd iterations from greedy k-means++; stops once assignments settle"""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise InvalidArgumentError(f'k-means needs an N×C matrix with N ≥ 1, got {points.shape}')
    if k < 1:
        raise InvalidArgumentError('K must be at least 1')
    if not np.all(np.isfinite(points)):
        raise InvalidArgumentError('k-means points must be finite')
    n = points.shape[0]
    if k > n:
        logger.debug('K=%d exceeds %d points, reducing K', k, n)
        k = n

    rng = np.random.default_rng(seed)
    centroids = _greedy_kmeans_plusplus(points, k, rng)
    labels = None
    history = []
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        distances = _squared_distances(points, centroids)
        new_labels = distances.argmin(axis=1)
        history.append(float(distances[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
            else:
                # empty cluster: re-seed on the point farthest from its centroid
                far = int(distances[np.arange(n), labels].argmax())
                centroids[c] = points[far]
                labels[far] = c
                distances[far] = 0.0
    return KMeansResult(centroids, labels, history, iterations)


def kmeans(points, k: int, seed: int) -> np.ndarray:
    return lloyd(points, k, seed).centroids


# ---------------------------------------------------------------------------
# gating
# ---------------------------------------------------------------------------

def gating_bank(registry: BankRegistry):
    if registry.distortion_bank is None:
        raise StateError('no distortion-aware bank installed')
    return registry.distortion_bank


def gating_features(backbone: FrozenBackbone, registry: BankRegistry, images: Tensor) -> list[Tensor]:
    """Pooled features per stage (index 0 = stage 1) under the gating bank, eval mode"""
    return forward_features(backbone, gating_bank(registry), images, Mode.EVAL).pooled


def summarize_task(backbone: FrozenBackbone, registry: BankRegistry, dataset: TaskDataset,
                   store: CentroidStore, seed: int) -> CentroidStore:
    """Clusters the task's training features at every gating stage into the store"""
    pooled = gating_features(backbone, registry, stack_images(dataset.train))
    for stage in store.stages:
        centroids = kmeans(pooled[stage - 1], store.k, seed + stage)
        store.centroids[(dataset.task_id, stage)] = centroids.astype(DTYPE)
    logger.info('summarized task %s at stages %s', dataset.task_id, list(store.stages))
    return store


def min_distance(feature, centroids, metric=DistanceMetric.EUCLIDEAN) -> float:
    feature = np.asarray(feature, dtype=np.float64)
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if feature.ndim != 1 or centroids.shape[1] != feature.shape[0]:
        raise InvalidArgumentError(f'feature {feature.shape} does not match centroids {centroids.shape}')
    return float(_min_distances(feature[None, :], centroids, metric)[0])


def _min_distances(features: np.ndarray, centroids: np.ndarray, metric) -> np.ndarray:
    diff = np.abs(features[:, None, :] - centroids[None, :, :])
    if DistanceMetric(metric) is DistanceMetric.CHEBYSHEV:
        per_centroid = diff.max(axis=-1)
    else:
        per_centroid = np.sqrt((diff * diff).sum(axis=-1))
    return per_centroid.min(axis=1)


def softmin_weights(distances, tau: float) -> np.ndarray:
    """exp(−τ·d_t) / Σ_u exp(−τ·d_u), shifted by the max logit"""
    if tau < 0:
        raise InvalidArgumentError('temperature must be non-negative')
    logits = -float(tau) * np.asarray(distances, dtype=np.float64)
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=-1, keepdims=True)


def stage_average(stage_weights) -> np.ndarray:
    stacked = np.asarray(stage_weights, dtype=np.float64)
    return stacked.mean(axis=0)


def task_distances(features: list[Tensor], store: CentroidStore, task_ids) -> np.ndarray:
    """Distances [stage, image, task] for the store's gating stages"""
    out = np.empty((len(store.stages), features[0].shape[0], len(task_ids)))
    for i, stage in enumerate(store.stages):
        stage_features = np.asarray(features[stage - 1], dtype=np.float64)
        for j, task_id in enumerate(task_ids):
            centroids = np.asarray(store.centroids[(task_id, stage)], dtype=np.float64)
            out[i, :, j] = _min_distances(stage_features, centroids, store.metric)
    return out


def weights_from_distances(distances: np.ndarray, tau: float, mode=GateMode.SOFT) -> np.ndarray:
    """distances [stage, image, task] → weights [image, task]"""
    if GateMode(mode) is GateMode.HARD:
        chosen = stage_average(distances).argmin(axis=-1)  # first minimum: lower task index wins ties
        weights = np.zeros(distances.shape[1:])
        weights[np.arange(weights.shape[0]), chosen] = 1.0
        return weights
    return stage_average([softmin_weights(d, tau) for d in distances])


def gate(backbone: FrozenBackbone, registry: BankRegistry, store: CentroidStore, images: Tensor,
         mode=GateMode.SOFT) -> np.ndarray:
    """Head weights a_t(x) for a batch [N, C, H, W] (or one image [C, H, W])"""
    task_ids = registry.task_ids
    if not task_ids:
        raise StateError('no task registered')
    if not store.covers(task_ids):
        raise StateError('centroid store does not cover every registered task')
    single = images.ndim == 3
    batch = images[None] if single else images
    distances = task_distances(gating_features(backbone, registry, batch), store, task_ids)
    weights = weights_from_distances(distances, store.tau, mode)
    return weights[0] if single else weights


def mean_gate_weights(backbone: FrozenBackbone, registry: BankRegistry, store: CentroidStore,
                      dataset: TaskDataset, partition: str = 'test') -> np.ndarray:
    """Average soft weight per head over a dataset partition"""
    return gate(backbone, registry, store, stack_images(dataset.partition(partition))).mean(axis=0)
