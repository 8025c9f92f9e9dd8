from dataclasses import replace

import numpy as np
import pytest

from engine.backbone import BackboneConfig, build_backbone
from engine.experiment import ExperimentConfig, SeedConfig, run_sequence
from engine.gating import GatingConfig
from engine.synthdata import DistortionKind, TaskSpec
from engine.trainer import TrainConfig

TINY_BACKBONE = BackboneConfig(channels=(4, 4, 8, 8), input_side=32)
TINY_TRAIN = TrainConfig(max_epochs=2, lr_decay_epoch=2, batch_size=8, lr=5e-3)


def tiny_config(**overrides) -> ExperimentConfig:
    """Four default tasks on a narrow four-stage backbone with two short epochs"""
    config = ExperimentConfig(
        backbone=TINY_BACKBONE,
        train=TINY_TRAIN,
        gating=GatingConfig(k=4),
        seeds=SeedConfig(1, 2, 3, 4),
        images_per_task=20,
        pairs_per_image=3,
        gating_corpus_images=60,
        label='tiny',
    )
    return replace(config, **overrides).validate()


def task_specs(*kinds) -> tuple[TaskSpec, ...]:
    return tuple(TaskSpec.single(kind) for kind in kinds)


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture(scope='session')
def tiny_run():
    return run_sequence(tiny_config())


@pytest.fixture(scope='session')
def two_task_run():
    """Blur vs salt-and-pepper: disjoint distortions for the gating checks"""
    config = tiny_config(
        tasks=task_specs(DistortionKind.BLUR, DistortionKind.SALT_PEPPER),
        images_per_task=40,
        label='two-task',
    )
    return run_sequence(config)


@pytest.fixture
def tiny_backbone():
    return build_backbone(TINY_BACKBONE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class FakeCollection:
    def __init__(self):
        self.documents = []

    def insert_one(self, document):
        self.documents.append(dict(document))


class FakeDb(dict):
    def __missing__(self, name):
        collection = self[name] = FakeCollection()
        return collection


@pytest.fixture
def fake_db():
    return FakeDb()
