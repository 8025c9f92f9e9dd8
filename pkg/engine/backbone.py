"""
Frozen multi-stage feature extractor: conv → BN → ReLU → 2x2 max-pool per stage.

Filters are seeded He-style Gaussians and never change; only the normalization
bank handed to a forward pass and the prediction head carry task state.
"""
from dataclasses import dataclass, field, asdict
import logging

import numpy as np

from engine.errors import InvalidArgumentError, InvalidConfigError
from engine.numerics import (
    DTYPE, Mode, Tensor, as_mode, BN_EPS, BN_MOMENTUM,
    conv2d_forward, conv2d_backward_input,
    batchnorm_forward, batchnorm_backward,
    relu_forward, relu_backward,
    maxpool2x2_forward, maxpool2x2_backward,
    global_avg_pool_forward, global_avg_pool_backward,
    linear_forward, linear_backward,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64)
    kernel_size: int = 3
    input_channels: int = 1
    input_side: int = 32
    filter_seed: int = 0

    @property
    def stage_count(self) -> int:
        return len(self.channels)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def validate(self) -> 'BackboneConfig':
        if self.stage_count < 2:
            raise InvalidConfigError('backbone needs at least two stages')
        if any(c <= 0 for c in self.channels) or self.input_channels <= 0:
            raise InvalidConfigError(f'channels must be positive, got {self.channels}')
        if self.kernel_size < 1 or self.kernel_size > self.input_side:
            raise InvalidConfigError(f'kernel size {self.kernel_size} does not fit side {self.input_side}')
        if self.input_side <= 0 or self.input_side % (2 ** self.stage_count):
            raise InvalidConfigError(
                f'input side {self.input_side} must be divisible by 2^{self.stage_count}'
            )
        if self.input_side // 2 ** (self.stage_count - 1) < self.kernel_size:
            raise InvalidConfigError(f'last stage input is smaller than the {self.kernel_size}x{self.kernel_size} kernel')
        if not 0 <= self.filter_seed < 2 ** 64:
            raise InvalidConfigError('filter seed must be an unsigned 64-bit integer')
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data['channels'] = list(self.channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'BackboneConfig':
        try:
            data = dict(data)
            if 'channels' in data:
                data['channels'] = tuple(int(c) for c in data['channels'])
            return cls(**data).validate()
        except TypeError as e:
            raise InvalidConfigError(f'bad backbone config: {e}') from None


@dataclass(frozen=True)
class FrozenBackbone:
    config: BackboneConfig
    filters: tuple[Tensor, ...]

    @property
    def stage_count(self) -> int:
        return self.config.stage_count


@dataclass
class PredictionHead:
    """Linear head h(f) = weight · f + bias on the pooled last-stage feature"""
    task_id: str
    weight: Tensor
    bias: Tensor  # shape (1,)

    @classmethod
    def zeros(cls, task_id: str, features: int) -> 'PredictionHead':
        return cls(task_id, np.zeros(features, dtype=DTYPE), np.zeros(1, dtype=DTYPE))

    @classmethod
    def seeded(cls, task_id: str, features: int, seed: int, std: float = 0.01) -> 'PredictionHead':
        rng = np.random.default_rng(seed)
        return cls(task_id, (rng.standard_normal(features) * std).astype(DTYPE), np.zeros(1, dtype=DTYPE))

    def freeze(self):
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)

    def copy(self, dtype=None) -> 'PredictionHead':
        return PredictionHead(
            self.task_id,
            np.array(self.weight, dtype=dtype or self.weight.dtype, copy=True),
            np.array(self.bias, dtype=dtype or self.bias.dtype, copy=True),
        )


@dataclass
class ForwardPass:
    activations: list[Tensor]
    pooled: list[Tensor]
    caches: list[dict] = field(repr=False)
    mode: Mode = Mode.EVAL
    scores: Tensor | None = None
    head_cache: object = field(default=None, repr=False)


@dataclass
class ParamGrads:
    gamma: list[Tensor]
    beta: list[Tensor]
    head_weight: Tensor
    head_bias: Tensor


def build_backbone(config: BackboneConfig) -> FrozenBackbone:
    config.validate()
    rng = np.random.default_rng(config.filter_seed)
    filters = []
    c_in = config.input_channels
    k = config.kernel_size
    for c_out in config.channels:
        std = np.sqrt(2.0 / (c_in * k * k))
        stage_filters = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(DTYPE)
        stage_filters.setflags(write=False)
        filters.append(stage_filters)
        c_in = c_out
    logger.debug('built backbone with %d stages, seed %d', config.stage_count, config.filter_seed)
    return FrozenBackbone(config, tuple(filters))


def _check_compatible(backbone: FrozenBackbone, bank, batch: Tensor):
    if len(bank.sites) != backbone.stage_count:
        raise InvalidArgumentError(
            f'bank has {len(bank.sites)} sites, backbone has {backbone.stage_count} stages'
        )
    for site, c in zip(bank.sites, backbone.config.channels):
        if site.channels != c:
            raise InvalidArgumentError(f'bank site has {site.channels} channels, stage expects {c}')
    if batch.ndim != 4 or batch.shape[1] != backbone.config.input_channels:
        raise InvalidArgumentError(f'batch {batch.shape} does not match the backbone input')
    side = 2 ** backbone.stage_count
    if batch.shape[2] % side or batch.shape[3] % side:
        raise InvalidArgumentError(f'spatial size {batch.shape[2:]} must be divisible by {side}')


def forward_features(backbone: FrozenBackbone, bank, batch: Tensor, mode=Mode.EVAL,
                     momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> ForwardPass:
    mode = as_mode(mode)
    _check_compatible(backbone, bank, batch)
    activations, pooled, caches = [], [], []
    x = batch
    for filters, site in zip(backbone.filters, bank.sites):
        z, conv_cache = conv2d_forward(x, filters, stride=1)
        z, norm_cache = batchnorm_forward(z, site, mode, momentum=momentum, eps=eps)
        z, relu_cache = relu_forward(z)
        x, pool_cache = maxpool2x2_forward(z)
        feature, avg_cache = global_avg_pool_forward(x)
        activations.append(x)
        pooled.append(feature)
        caches.append({'conv': conv_cache, 'norm': norm_cache, 'relu': relu_cache,
                       'pool': pool_cache, 'avg': avg_cache})
    return ForwardPass(activations, pooled, caches, mode)


def forward_quality(backbone: FrozenBackbone, bank, head: PredictionHead, batch: Tensor, mode=Mode.EVAL,
                    momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> ForwardPass:
    """Runs the stack and scores every image with `head`; scores land on `.scores`"""
    if head.weight.shape != (backbone.config.feature_dim,):
        raise InvalidArgumentError(f'head of size {head.weight.shape} does not fit the last stage')
    result = forward_features(backbone, bank, batch, mode, momentum=momentum, eps=eps)
    scores, head_cache = linear_forward(result.pooled[-1], head.weight[None, :], head.bias)
    result.scores = scores[:, 0]
    result.head_cache = head_cache
    return result


def backward_to_params(backbone: FrozenBackbone, grad_scores: Tensor, result: ForwardPass,
                       head: PredictionHead) -> ParamGrads:
    """Chains d loss/d score back to every BN γ/β and the head parameters"""
    if result.mode is not Mode.TRAIN or result.head_cache is None:
        raise InvalidArgumentError('backward_to_params needs a train-mode forward_quality result')
    if grad_scores.shape != result.scores.shape:
        raise InvalidArgumentError(f'grad {grad_scores.shape} does not match {result.scores.shape} scores')

    grad_w, grad_b, grad = linear_backward(grad_scores[:, None], result.head_cache)
    gammas, betas = [], []
    grad_act = None
    for stage in reversed(range(backbone.stage_count)):
        cache = result.caches[stage]
        if stage == backbone.stage_count - 1:
            grad_act = global_avg_pool_backward(grad, cache['avg'])
        grad_z = maxpool2x2_backward(grad_act, cache['pool'])
        grad_z = relu_backward(grad_z, cache['relu'])
        grad_z, grad_gamma, grad_beta = batchnorm_backward(grad_z, cache['norm'])
        gammas.append(grad_gamma)
        betas.append(grad_beta)
        if stage > 0:
            grad_act = conv2d_backward_input(grad_z, backbone.filters[stage], cache['conv'])
    gammas.reverse()
    betas.reverse()
    return ParamGrads(gammas, betas, grad_w[0], grad_b)
