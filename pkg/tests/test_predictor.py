import numpy as np
import pytest

from engine.backbone import forward_quality
from engine.errors import InvalidArgumentError, StateError
from engine.gating import CentroidStore, GateMode
from engine.numerics import Mode
from engine.predictor import (
    PassCounter, count_quality_passes, oracle_record,
    predict_all_heads, predict_gated, predict_gated_batch, predict_oracle, predict_records,
)


@pytest.fixture
def test_images(tiny_run):
    return np.stack([s.image for s in tiny_run.datasets[0].test[:5]])


def test_soft_mode_runs_every_head_and_one_gating_pass(tiny_run, test_images):
    counter = PassCounter()
    predict_gated_batch(tiny_run.backbone, tiny_run.registry, tiny_run.store, test_images, GateMode.SOFT, counter)
    assert count_quality_passes(counter) == len(tiny_run.registry) * len(test_images)
    assert counter.gating_passes == len(test_images)


def test_hard_mode_runs_one_head_per_image(tiny_run, test_images):
    counter = PassCounter()
    scores, weights, _ = predict_gated_batch(tiny_run.backbone, tiny_run.registry, tiny_run.store, test_images,
                                             GateMode.HARD, counter)
    assert counter.quality_passes == len(test_images)
    assert counter.gating_passes == len(test_images)
    # heads that were not chosen stay unscored
    assert np.array_equal(np.isnan(scores), weights == 0)


def test_soft_prediction_is_the_weighted_sum(tiny_run, test_images):
    scores, weights, q_hat = predict_gated_batch(tiny_run.backbone, tiny_run.registry, tiny_run.store, test_images)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(q_hat, (weights * scores.astype(np.float64)).sum(axis=1), rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(scores, predict_all_heads(tiny_run.backbone, tiny_run.registry, test_images))


def test_oracle_uses_the_known_task_bank_and_head(tiny_run, test_images):
    task_id = tiny_run.task_ids[1]
    expected = forward_quality(tiny_run.backbone, tiny_run.registry.banks[task_id],
                               tiny_run.registry.heads[task_id], test_images, Mode.EVAL).scores
    actual = predict_oracle(tiny_run.backbone, tiny_run.registry, test_images, task_id)
    assert actual.tobytes() == expected.tobytes()


def test_single_image_prediction(tiny_run, test_images):
    record = predict_gated(tiny_run.backbone, tiny_run.registry, tiny_run.store, test_images[0], image_id='x')
    assert record.image_id == 'x' and record.mode == 'soft'
    assert record.scores.shape == (len(tiny_run.registry),)
    assert record.weights.sum() == pytest.approx(1.0)


def test_oracle_record_is_one_hot(tiny_run, test_images):
    task_id = tiny_run.task_ids[2]
    record = oracle_record(tiny_run.backbone, tiny_run.registry, test_images[0], task_id)
    assert record.mode == f'oracle:{task_id}'
    assert record.weights.tolist() == [0.0, 0.0, 1.0, 0.0]
    assert record.q_hat == pytest.approx(float(record.scores[2]))
    assert np.isnan(record.scores[[0, 1, 3]]).all()


def test_records_for_every_sample(tiny_run):
    samples = tiny_run.datasets[0].test
    records = predict_records(tiny_run.backbone, tiny_run.registry, tiny_run.store, samples, 'oracle',
                              oracle_task=tiny_run.task_ids[0])
    assert [r.image_id for r in records] == [s.sample_id for s in samples]
    assert all(r.weights[0] == 1.0 for r in records)

    hard = predict_records(tiny_run.backbone, tiny_run.registry, tiny_run.store, samples, 'hard')
    assert all(r.mode == 'hard' and r.weights.sum() == 1.0 for r in hard)


def test_oracle_records_need_a_task(tiny_run):
    with pytest.raises(InvalidArgumentError):
        predict_records(tiny_run.backbone, tiny_run.registry, tiny_run.store, tiny_run.datasets[0].test, 'oracle')


def test_unknown_task_is_rejected(tiny_run, test_images):
    with pytest.raises(InvalidArgumentError):
        predict_oracle(tiny_run.backbone, tiny_run.registry, test_images, 'jpeg')


def test_store_must_cover_the_registry(tiny_run, test_images):
    with pytest.raises(StateError):
        predict_gated_batch(tiny_run.backbone, tiny_run.registry, CentroidStore(4), test_images)


def test_images_must_be_three_or_four_dimensional(tiny_run):
    with pytest.raises(InvalidArgumentError):
        predict_oracle(tiny_run.backbone, tiny_run.registry, np.zeros((32, 32), dtype=np.float32),
                       tiny_run.task_ids[0])
