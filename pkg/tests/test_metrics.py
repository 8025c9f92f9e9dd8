import math

import numpy as np
import pytest

from engine.errors import InvalidArgumentError, UndefinedCorrelationError
from engine.metrics import (
    BankGaussian, SequenceResults,
    bank_kl, kl_matrix, kl_vs_srcc_correlation, length_curve, mpsi, msi, srcc,
)


def gaussian(mean, var) -> BankGaussian:
    return BankGaussian(np.asarray(mean, dtype=np.float64), np.asarray(var, dtype=np.float64))


def test_srcc_uses_average_ranks_for_ties():
    # ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4): 4.5 / sqrt(4.5 * 5)
    assert srcc([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(3 / math.sqrt(10), abs=1e-12)
    assert srcc([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(0.9487, abs=1e-4)


def test_srcc_of_monotone_sequences():
    x = np.array([0.3, 1.2, 5.0, 7.5])
    assert srcc(x, x ** 3) == pytest.approx(1.0)
    assert srcc(x, -x) == pytest.approx(-1.0)


def test_srcc_is_undefined_for_constant_input():
    with pytest.raises(UndefinedCorrelationError):
        srcc([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])


def test_srcc_needs_two_samples():
    with pytest.raises(UndefinedCorrelationError):
        srcc([1.0], [2.0])


def test_srcc_rejects_different_lengths():
    with pytest.raises(InvalidArgumentError):
        srcc([1.0, 2.0], [1.0, 2.0, 3.0])


def test_first_stability_index_is_one():
    si, mean = msi(np.array([[1.0]]))
    assert si == [1.0] and mean == 1.0


def test_stability_averages_earlier_models():
    cross = np.array([
        [1.0, np.nan, np.nan],
        [0.8, 1.0, np.nan],
        [0.6, 0.9, 1.0],
    ])
    si, mean = msi(cross)
    assert si == pytest.approx([1.0, 0.8, 0.75])
    assert mean == pytest.approx(2.55 / 3)


def test_stability_needs_earlier_entries():
    with pytest.raises(InvalidArgumentError):
        msi(np.array([[1.0, np.nan], [np.nan, 1.0]]))


def test_mpsi_of_published_scalars():
    _, mean = mpsi([0.853], [0.979])
    assert mean == pytest.approx(0.916, abs=5e-4)


def test_mpsi_rejects_mismatched_vectors():
    with pytest.raises(InvalidArgumentError):
        mpsi([0.9, 0.8], [1.0])


def test_length_curve_is_running_mean():
    assert length_curve([1.0, 0.5, 0.9]) == pytest.approx([1.0, 0.75, 0.8])


def test_single_task_sequence():
    results = SequenceResults.from_matrices(['blur'], [[0.7]], [[1.0]])
    assert results.msi == 1.0
    assert results.msrcc == pytest.approx(0.7)
    assert results.mpsi == pytest.approx((0.7 + 1.0) / 2)
    assert results.length_curve() == pytest.approx([0.85])


def test_sequence_results_survive_a_dict_trip():
    nan = float('nan')
    results = SequenceResults.from_matrices(
        ['a', 'b'],
        [[0.9, nan], [0.8, 0.7]],
        [[1.0, nan], [0.95, 1.0]],
    )
    data = results.to_dict()
    restored = SequenceResults.from_dict({
        **data,
        'srcc': [[None if isinstance(v, float) and math.isnan(v) else v for v in row] for row in data['srcc']],
    })
    assert restored.scalars() == pytest.approx(results.scalars())
    assert restored.pi == pytest.approx([0.9, 0.7])
    assert data['mPSI_curve'] == pytest.approx(results.length_curve())


def test_kl_of_identical_gaussians_is_zero():
    p = gaussian([0.2, -1.0], [1.5, 0.3])
    assert bank_kl(p, p) == 0.0


def test_kl_of_unit_shift():
    assert bank_kl(gaussian([0.0], [1.0]), gaussian([1.0], [1.0])) == pytest.approx(0.5)


def test_kl_is_asymmetric():
    p = gaussian([0.0, 0.0], [1.0, 1.0])
    q = gaussian([0.5, 0.0], [4.0, 0.5])
    assert bank_kl(p, q) != pytest.approx(bank_kl(q, p))


def test_kl_rejects_non_positive_variance():
    with pytest.raises(InvalidArgumentError):
        bank_kl(gaussian([0.0], [0.0]), gaussian([0.0], [1.0]))


def test_kl_matrix_has_zero_diagonal():
    matrix = kl_matrix([gaussian([0.0], [1.0]), gaussian([1.0], [2.0]), gaussian([-1.0], [0.5])])
    np.testing.assert_array_equal(np.diag(matrix), 0.0)
    assert np.all(matrix[~np.eye(3, dtype=bool)] > 0)


def test_kl_vs_srcc_ignores_the_diagonal():
    rng = np.random.default_rng(0)
    kl = rng.random((4, 4))
    cross = -kl.copy()
    np.fill_diagonal(cross, 1.0)
    assert kl_vs_srcc_correlation(kl, cross) == pytest.approx(-1.0)


def test_kl_vs_srcc_rejects_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        kl_vs_srcc_correlation(np.zeros((3, 3)), np.zeros((2, 2)))
