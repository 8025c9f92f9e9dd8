"""
Procedural quality-regression tasks: smoothed-noise textures, six distortion
families, MOS assignment, content-grouped 70/10/20 splits and labelled pairs.
"""
from dataclasses import dataclass, field
from enum import Enum
import logging
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from engine.errors import InvalidArgumentError
from engine.numerics import DTYPE, Tensor
from utils.report_writer import write_json, read_json
from utils.tensor_io import write_tensor, read_tensor

logger = logging.getLogger(__name__)

MOS_MAX = 5.0
MOS_NOISE_STD = 0.05
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
PAIRS_PER_IMAGE = 10


class DistortionKind(str, Enum):
    BLUR = 'blur'
    WHITE_NOISE = 'white-noise'
    BLOCK_AVERAGE = 'block-average'
    CONTRAST = 'contrast'
    SALT_PEPPER = 'salt-pepper'
    RESAMPLE = 'resample'


SYNTHETIC_FAMILY = (DistortionKind.BLUR, DistortionKind.WHITE_NOISE, DistortionKind.BLOCK_AVERAGE)
REALISTIC_FAMILY = (DistortionKind.CONTRAST, DistortionKind.SALT_PEPPER, DistortionKind.RESAMPLE)


def as_kind(kind) -> DistortionKind:
    try:
        return DistortionKind(kind)
    except ValueError:
        raise InvalidArgumentError(f'unknown distortion kind {kind!r}') from None


def family_of(kind) -> str:
    return 'synthetic' if as_kind(kind) in SYNTHETIC_FAMILY else 'realistic'


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kinds: tuple[DistortionKind, ...]
    level_range: tuple[float, float] = (0.0, 1.0)

    @property
    def family(self) -> str:
        return family_of(self.kinds[0])

    def validate(self) -> 'TaskSpec':
        if not self.task_id:
            raise InvalidArgumentError('task id must be non-empty')
        if not self.kinds:
            raise InvalidArgumentError(f'task {self.task_id!r} has no distortion kinds')
        lo, hi = self.level_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise InvalidArgumentError(f'level range {self.level_range} must lie in [0, 1]')
        return self

    def to_dict(self) -> dict:
        return {'task_id': self.task_id, 'kinds': [k.value for k in self.kinds],
                'level_range': list(self.level_range)}

    @classmethod
    def from_dict(cls, data: dict) -> 'TaskSpec':
        kinds = tuple(as_kind(k) for k in data.get('kinds', ()))
        level_range = tuple(float(v) for v in data.get('level_range', (0.0, 1.0)))
        return cls(str(data.get('task_id', '')), kinds, level_range).validate()

    @classmethod
    def single(cls, kind) -> 'TaskSpec':
        kind = as_kind(kind)
        return cls(kind.value, (kind,))


@dataclass
class ImageSample:
    image: Tensor  # [1, H, W]
    mos: float
    distortion_kind: DistortionKind
    level: float
    source_id: int
    sample_id: str = ''


@dataclass
class TaskDataset:
    task_id: str
    spec: TaskSpec
    train: list[ImageSample] = field(default_factory=list)
    val: list[ImageSample] = field(default_factory=list)
    test: list[ImageSample] = field(default_factory=list)

    def partition(self, name: str) -> list[ImageSample]:
        if name not in ('train', 'val', 'test'):
            raise InvalidArgumentError(f'unknown partition {name!r}')
        return getattr(self, name)


@dataclass(frozen=True)
class PairSet:
    task_id: str
    index_x: np.ndarray
    index_y: np.ndarray
    labels: np.ndarray

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])


def stack_images(samples: list[ImageSample]) -> Tensor:
    return np.stack([s.image for s in samples]).astype(DTYPE, copy=False)


def mos_array(samples: list[ImageSample]) -> np.ndarray:
    return np.array([s.mos for s in samples], dtype=np.float64)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _rescale(image: np.ndarray) -> np.ndarray:
    lo, hi = image.min(), image.max()
    if hi - lo <= 0:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def generate_base_images(count: int, side: int, seed: int, smoothing: float = 1.0) -> list[Tensor]:
    """Seeded smoothed-noise textures in [0, 1], shape [1, side, side]"""
    if count < 1 or side < 1:
        raise InvalidArgumentError('need at least one image of positive side')
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(count):
        noise = rng.standard_normal((side, side))
        smooth = ndimage.gaussian_filter(noise, sigma=smoothing, mode='wrap')
        images.append(_rescale(smooth).astype(DTYPE)[None])
    return images


def noise_sigma(level: float) -> float:
    return 0.3 * level


def _block_average(plane: np.ndarray, block: int) -> np.ndarray:
    out = np.empty_like(plane)
    h, w = plane.shape
    for i in range(0, h, block):
        for j in range(0, w, block):
            out[i:i + block, j:j + block] = plane[i:i + block, j:j + block].mean()
    return out


def _resample(plane: np.ndarray, factor: float) -> np.ndarray:
    h, w = plane.shape
    small_h, small_w = max(1, round(h / factor)), max(1, round(w / factor))
    small = ndimage.zoom(plane, (small_h / h, small_w / w), order=1, mode='nearest')
    return ndimage.zoom(small, (h / small.shape[0], w / small.shape[1]), order=1, mode='nearest')


def apply_distortion(image: Tensor, kind, level: float, seed: int = 0) -> Tensor:
    """Degrades `image`; level 0 is the identity and severity grows with level"""
    kind = as_kind(kind)
    if not 0.0 <= level <= 1.0:
        raise InvalidArgumentError(f'level {level} outside [0, 1]')
    if level == 0.0:
        return image.copy()

    rng = np.random.default_rng(seed)
    planes = image.astype(np.float64)
    out = np.empty_like(planes)
    for c, plane in enumerate(planes):
        if kind is DistortionKind.BLUR:
            out[c] = ndimage.gaussian_filter(plane, sigma=3.0 * level, mode='reflect')
        elif kind is DistortionKind.WHITE_NOISE:
            out[c] = plane + rng.normal(0.0, noise_sigma(level), plane.shape)
        elif kind is DistortionKind.BLOCK_AVERAGE:
            out[c] = _block_average(plane, 1 + round(7 * level))
        elif kind is DistortionKind.CONTRAST:
            mean = plane.mean()
            out[c] = mean + (plane - mean) * (1.0 - 0.8 * level)
        elif kind is DistortionKind.SALT_PEPPER:
            hits = rng.random(plane.shape) < 0.3 * level
            salt = rng.random(plane.shape) < 0.5
            out[c] = np.where(hits, salt.astype(np.float64), plane)
        else:
            out[c] = _resample(plane, 1.0 + 3.0 * level)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def _split_counts(n: int) -> tuple[int, int, int]:
    n_train = round(SPLIT_FRACTIONS[0] * n)
    n_val = round(SPLIT_FRACTIONS[1] * n)
    return n_train, n_val, n - n_train - n_val


def _stratified_order(spec: TaskSpec, n_sources: int, distortions_per_source: int,
                      rng: np.random.Generator) -> list[int]:
    """Shuffles sources within each kind, then deals them out one kind at a time.

    Any prefix of the result holds every kind once it is at least as long as
    the kind count, so the train split sees all of them.
    """
    by_kind = {kind: [] for kind in spec.kinds}
    for source in range(n_sources):
        # a source is filed under the kind of its first rendering
        by_kind[spec.kinds[(source * distortions_per_source) % len(spec.kinds)]].append(source)
    shuffled = [list(rng.permutation(sources)) for sources in by_kind.values() if sources]
    order = []
    for rank in range(max(len(sources) for sources in shuffled)):
        order.extend(int(sources[rank]) for sources in shuffled if rank < len(sources))
    return order


def make_task_dataset(spec: TaskSpec, image_count: int, seed: int, side: int = 32,
                      distortions_per_source: int = 1) -> TaskDataset:
    """Renders `image_count` distorted images and splits them by base content"""
    spec.validate()
    if image_count < 20:
        raise InvalidArgumentError(f'a task needs at least 20 images, got {image_count}')
    if distortions_per_source < 1 or image_count % distortions_per_source:
        raise InvalidArgumentError('image count must be a multiple of distortions per source')

    rng = np.random.default_rng(seed)
    n_sources = image_count // distortions_per_source
    bases = generate_base_images(n_sources, side, int(rng.integers(2 ** 63)))
    lo, hi = spec.level_range

    samples = []
    for i in range(image_count):
        source = i // distortions_per_source
        kind = spec.kinds[i % len(spec.kinds)]
        level = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        image = apply_distortion(bases[source], kind, level, seed=int(rng.integers(2 ** 63)))
        mos = MOS_MAX * (1.0 - level) + float(rng.normal(0.0, MOS_NOISE_STD))
        samples.append(ImageSample(
            image=image,
            mos=min(max(mos, 0.0), MOS_MAX),
            distortion_kind=kind,
            level=level,
            source_id=source,
            sample_id=f'{spec.task_id}-{i:05d}',
        ))

    order = _stratified_order(spec, n_sources, distortions_per_source, rng)
    n_train, n_val, _ = _split_counts(n_sources)
    partition_of = {}
    for rank, source in enumerate(order):
        partition_of[int(source)] = 'train' if rank < n_train else 'val' if rank < n_train + n_val else 'test'

    dataset = TaskDataset(spec.task_id, spec)
    for sample in samples:
        dataset.partition(partition_of[sample.source_id]).append(sample)
    logger.debug('task %s: %d/%d/%d images', spec.task_id, len(dataset.train), len(dataset.val), len(dataset.test))
    return dataset


def build_pairs(dataset: TaskDataset, n_pairs: int, seed: int) -> PairSet:
    """Uniform unordered pairs without replacement; r = 1 iff mos_x >= mos_y"""
    n = len(dataset.train)
    total = math.comb(n, 2)
    if n_pairs < 1 or n_pairs > total:
        raise InvalidArgumentError(f'{n_pairs} pairs requested, only {total} exist for {n} images')
    rng = np.random.default_rng(seed)
    rows, cols = np.triu_indices(n, k=1)
    chosen = rng.choice(total, size=n_pairs, replace=False)
    first, second = rows[chosen], cols[chosen]
    # random orientation so labels are not tied to index order
    swap = rng.random(n_pairs) < 0.5
    index_x = np.where(swap, second, first)
    index_y = np.where(swap, first, second)
    mos = mos_array(dataset.train)
    labels = (mos[index_x] >= mos[index_y]).astype(np.float64)
    return PairSet(dataset.task_id, index_x, index_y, labels)


def make_gating_corpus(image_count: int, side: int, seed: int) -> TaskDataset:
    """Mixed corpus over every distortion kind, used to train the gating bank"""
    spec = TaskSpec('gating-corpus', tuple(DistortionKind))
    return make_task_dataset(spec, image_count, seed, side=side)


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------

def export_task_dataset(dataset: TaskDataset, directory) -> Path:
    """One directory per task: manifest.json plus one tensor file per image"""
    directory = Path(directory)
    (directory / 'images').mkdir(parents=True, exist_ok=True)
    entries = []
    for partition in ('train', 'val', 'test'):
        for sample in dataset.partition(partition):
            ref = write_tensor(directory / 'images' / f'{sample.sample_id}.tensor', sample.image)
            entries.append({
                'sample_id': sample.sample_id,
                'partition': partition,
                'mos': sample.mos,
                'kind': sample.distortion_kind.value,
                'level': sample.level,
                'source_id': sample.source_id,
                'file': f'images/{ref["file"]}',
                'bytes': ref['bytes'],
                'sha256': ref['sha256'],
            })
    return write_json(directory / 'manifest.json', {'task': dataset.spec.to_dict(), 'samples': entries})


def load_task_dataset(directory) -> TaskDataset:
    directory = Path(directory)
    manifest = read_json(directory / 'manifest.json')
    spec = TaskSpec.from_dict(manifest['task'])
    dataset = TaskDataset(spec.task_id, spec)
    for entry in manifest['samples']:
        image = read_tensor(directory / entry['file'], entry['sha256'], entry['bytes'])
        dataset.partition(entry['partition']).append(ImageSample(
            image=image,
            mos=float(entry['mos']),
            distortion_kind=as_kind(entry['kind']),
            level=float(entry['level']),
            source_id=int(entry['source_id']),
            sample_id=entry['sample_id'],
        ))
    return dataset
