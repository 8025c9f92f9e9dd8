import numpy as np
import pytest

from engine.errors import InvalidArgumentError, InvalidConfigError, StateError
from engine.gating import (
    CentroidStore, DistanceMetric, GateMode, GatingConfig,
    gate, gating_features, lloyd, mean_gate_weights, min_distance, softmin_weights, summarize_task,
    weights_from_distances,
)
from engine.normbank import BankRegistry
from engine.synthdata import stack_images


def test_softmin_weights_form_a_distribution():
    weights = softmin_weights(np.array([0.5, 2.0, 0.1, 7.0]), tau=3.0)
    assert np.all(weights >= 0)
    assert weights.sum() == pytest.approx(1.0)
    assert weights.argmax() == 2


@pytest.mark.parametrize('tau', [0.5, 4.0, 32.0])
def test_closer_head_gets_strictly_more_weight(tau):
    distances = np.array([0.8, 0.3, 1.1, 0.5])
    for head in range(len(distances)):
        closer = distances.copy()
        closer[head] -= 0.05
        assert softmin_weights(closer, tau)[head] > softmin_weights(distances, tau)[head]


def test_zero_temperature_gives_uniform_weights():
    np.testing.assert_allclose(softmin_weights(np.array([0.1, 5.0, 9.0]), tau=0.0), 1 / 3)


def test_softmin_survives_huge_distances():
    weights = softmin_weights(np.array([1e6, 1e6 + 1.0]), tau=32.0)
    assert np.all(np.isfinite(weights))
    assert weights[0] == pytest.approx(1.0)


def test_negative_temperature_is_rejected():
    with pytest.raises(InvalidArgumentError):
        softmin_weights(np.array([1.0, 2.0]), tau=-1.0)


def test_soft_weights_average_over_stages():
    distances = np.array([
        [[0.0, 1.0]],
        [[1.0, 0.0]],
    ])
    np.testing.assert_allclose(weights_from_distances(distances, tau=2.0), [[0.5, 0.5]])


def test_hard_mode_is_one_hot():
    distances = np.array([[[0.3, 0.1, 0.9], [0.5, 0.6, 0.2]]])
    weights = weights_from_distances(distances, tau=32.0, mode=GateMode.HARD)
    np.testing.assert_array_equal(weights, [[0, 1, 0], [0, 0, 1]])


def test_hard_mode_ties_go_to_the_earlier_task():
    distances = np.array([[[0.4, 0.4, 0.4]]])
    weights = weights_from_distances(distances, tau=32.0, mode=GateMode.HARD)
    np.testing.assert_array_equal(weights, [[1, 0, 0]])


@pytest.mark.parametrize('transform', [np.exp, lambda d: d ** 3 + d, lambda d: 5.0 * d + 2.0])
def test_hard_choice_survives_increasing_transforms(rng, transform):
    distances = rng.uniform(0.0, 3.0, size=(1, 12, 5))
    expected = weights_from_distances(distances, tau=32.0, mode=GateMode.HARD)
    transformed = weights_from_distances(transform(distances), tau=32.0, mode=GateMode.HARD)
    np.testing.assert_array_equal(transformed, expected)


def test_lloyd_splits_two_obvious_clusters():
    points = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    for seed in range(5):
        result = lloyd(points, 2, seed=seed)
        centroids = result.centroids[np.argsort(result.centroids[:, 0])]
        np.testing.assert_allclose(centroids, [[0.0, 0.5], [10.0, 0.5]])


def test_lloyd_inertia_never_increases(rng):
    points = np.concatenate([rng.normal(c, 0.3, size=(30, 2)) for c in (-3.0, 0.0, 3.0)])
    result = lloyd(points, 3, seed=0)
    assert all(b <= a + 1e-9 for a, b in zip(result.inertia_history, result.inertia_history[1:]))
    assert result.centroids.shape == (3, 2)
    assert sorted(np.round(np.sort(result.centroids[:, 0]))) == [-3.0, 0.0, 3.0]


def test_lloyd_is_deterministic_in_seed(rng):
    points = rng.standard_normal((40, 3))
    a = lloyd(points, 4, seed=9)
    b = lloyd(points, 4, seed=9)
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_lloyd_reduces_k_to_the_point_count(rng):
    points = rng.standard_normal((3, 2))
    result = lloyd(points, 8, seed=0)
    assert result.centroids.shape == (3, 2)
    assert result.inertia_history[-1] == pytest.approx(0.0)


def test_lloyd_rejects_non_finite_points():
    with pytest.raises(InvalidArgumentError):
        lloyd(np.array([[0.0, np.nan], [1.0, 1.0]]), 1, seed=0)


def test_min_distance_metrics():
    centroids = np.array([[0.0, 0.0], [10.0, 10.0]])
    assert min_distance([3.0, 4.0], centroids) == pytest.approx(5.0)
    assert min_distance([3.0, 4.0], centroids, DistanceMetric.CHEBYSHEV) == pytest.approx(4.0)


def test_min_distance_rejects_width_mismatch():
    with pytest.raises(InvalidArgumentError):
        min_distance([1.0, 2.0, 3.0], np.zeros((2, 2)))


def test_store_restricted_to_other_stages():
    store = CentroidStore(2, (3, 4), centroids={('a', 3): np.zeros((2, 4)), ('a', 4): np.ones((2, 8))})
    restricted = store.with_stages((4,))
    assert restricted.stages == (4,)
    assert list(restricted.centroids) == [('a', 4)]
    assert restricted.covers(['a'])
    assert not store.with_stages((2, 4)).covers(['a'])


@pytest.mark.parametrize('data', [
    {'k': 0},
    {'tau': -1.0},
    {'stages': []},
    {'stages': [3, 3]},
    {'mode': 'argmax'},
    {'bank': 'random'},
])
def test_invalid_gating_configs_are_rejected(data):
    with pytest.raises(InvalidConfigError):
        GatingConfig.from_dict(data)


def test_gating_stages_must_exist_in_the_backbone():
    with pytest.raises(InvalidConfigError):
        GatingConfig(stages=(5,)).validate(stage_count=4)


def test_gating_config_round_trips_through_dict():
    config = GatingConfig(k=4, tau=8.0, stages=(4,), mode=GateMode.HARD, metric=DistanceMetric.CHEBYSHEV)
    assert GatingConfig.from_dict(config.to_dict()) == config


def test_gate_needs_registered_tasks(tiny_backbone):
    with pytest.raises(StateError):
        gate(tiny_backbone, BankRegistry(), CentroidStore(4), np.zeros((1, 1, 32, 32), dtype=np.float32))


def test_gate_needs_a_covering_store(two_task_run):
    run = two_task_run
    partial = CentroidStore(4, run.store.stages, run.store.tau,
                            centroids={k: v for k, v in run.store.centroids.items() if k[0] == run.task_ids[0]})
    images = np.stack([s.image for s in run.datasets[0].test[:2]])
    with pytest.raises(StateError):
        gate(run.backbone, run.registry, partial, images)


def test_gate_weights_sum_to_one_per_image(two_task_run):
    run = two_task_run
    images = np.stack([s.image for s in run.datasets[1].test])
    weights = gate(run.backbone, run.registry, run.store, images)
    assert weights.shape == (len(images), 2)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
    single = gate(run.backbone, run.registry, run.store, images[0])
    np.testing.assert_allclose(single, weights[0])


def test_gate_favours_the_matching_task(two_task_run):
    run = two_task_run
    for index, dataset in enumerate(run.datasets):
        weights = mean_gate_weights(run.backbone, run.registry, run.store, dataset)
        assert weights[index] > 0.5


def summarized(run, seed):
    store = CentroidStore.from_config(run.config.gating)
    return summarize_task(run.backbone, run.registry, run.datasets[0], store, seed)


def test_summary_has_one_centroid_set_per_stage(two_task_run):
    store = summarized(two_task_run, seed=11)
    task_id = two_task_run.datasets[0].task_id
    assert sorted(store.centroids) == [(task_id, stage) for stage in sorted(store.stages)]
    for centroids in store.centroids.values():
        assert centroids.shape[0] <= store.k


def test_summary_is_reproducible_from_its_seed(two_task_run):
    first, second = summarized(two_task_run, seed=11), summarized(two_task_run, seed=11)
    for key, centroids in first.centroids.items():
        assert centroids.tobytes() == second.centroids[key].tobytes()


def test_centroids_stay_inside_the_feature_box(two_task_run):
    run = two_task_run
    store = summarized(run, seed=11)
    pooled = gating_features(run.backbone, run.registry, stack_images(run.datasets[0].train))
    for (_, stage), centroids in store.centroids.items():
        features = pooled[stage - 1]
        assert centroids.shape[1] == features.shape[1]
        assert np.all(centroids >= features.min(axis=0) - 1e-6)
        assert np.all(centroids <= features.max(axis=0) + 1e-6)
