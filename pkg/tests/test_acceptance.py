"""
End-to-end runs on the default desk configuration. These take minutes;
deselect them with `-m "not slow"`.
"""
from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest

from engine.experiment import (
    ExperimentConfig, TASK_AGNOSTIC_BN, analyze_kl, run_order_suite, run_sequence,
)
from engine.normbank import count_task_params
from engine.synthdata import DistortionKind, TaskSpec

pytestmark = pytest.mark.slow


@pytest.fixture(scope='module')
def default_run():
    return run_sequence(ExperimentConfig().validate())


def test_default_backbone_adds_305_parameters_per_task(default_run):
    assert count_task_params(default_run.registry, default_run.config.backbone) == 305


def test_oracle_learns_each_task(default_run):
    assert min(default_run.results['oracle'].pi) >= 0.8


def test_oracle_never_forgets(default_run):
    assert default_run.results['oracle'].msi == 1.0


def test_soft_gating_beats_the_shared_bank(default_run):
    baseline = run_sequence(replace(default_run.config, baseline=TASK_AGNOSTIC_BN))
    assert default_run.results['soft'].mpsi > baseline.headline.mpsi


def test_oracle_scores_do_not_depend_on_the_order(default_run):
    labels = ('I', 'II', 'III', 'IV')
    suite = run_order_suite(default_run.config, labels=labels)
    scores = {label: suite.runs[label].final_oracle_scores() for label in labels}
    for first, second in combinations(labels, 2):
        assert scores[first].keys() == scores[second].keys()
        for task_id in scores[first]:
            assert scores[first][task_id].tobytes() == scores[second][task_id].tobytes()
    assert suite.msrcc_spread() < 0.05


def test_banks_of_one_family_are_closer_than_across_families():
    tasks = (
        TaskSpec('blur-a', (DistortionKind.BLUR,)),
        TaskSpec('blur-b', (DistortionKind.BLUR,)),
        TaskSpec('salt-a', (DistortionKind.SALT_PEPPER,)),
        TaskSpec('salt-b', (DistortionKind.SALT_PEPPER,)),
    )
    run = run_sequence(ExperimentConfig(tasks=tasks, label='families').validate())
    analysis = analyze_kl(run.backbone, run.registry, run.datasets)
    assert analysis.within_family_kl < analysis.cross_family_kl
    assert analysis.correlation < 0
    assert np.isfinite(analysis.kl).all()
