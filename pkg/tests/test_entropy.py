import math

import numpy as np
import pytest

from entropy import (
    EstimatorConfig,
    KernelConfig,
    LogBase,
    estimate,
    gram_matrix,
    kde_entropy,
    kde_entropy_truncated,
    kernel_sum_gap,
    knn_entropy,
    renyi2_truncated,
    renyi_matrix_entropy,
    subsample_evenly,
    symmetric_eigenvalues,
    threshold_separated_states,
)
from errors import DegenerateDistance, EmptyInput, InvalidArgument

UNIT = KernelConfig(1.0)


def test_kernel_uses_two_sigma_not_squared():
    gram = gram_matrix(np.array([[0.0], [1.0]]), KernelConfig(2.0)).entries
    assert gram[0, 1] == pytest.approx(math.exp(-1.0 / 4.0), abs=1e-15)
    assert np.all(np.diag(gram) == 1.0)


def test_kde_identical_states_is_zero():
    assert float(kde_entropy(np.zeros((5, 2)), UNIT)) == pytest.approx(0.0, abs=1e-15)


def test_kde_two_far_points_is_log_two():
    value = kde_entropy(np.array([[0.0], [1000.0]]), UNIT)
    assert value.log_base is LogBase.NATURAL
    assert float(value) == pytest.approx(math.log(2.0), abs=1e-12)


def test_kde_rejects_empty():
    with pytest.raises(EmptyInput):
        kde_entropy(np.empty((0, 2)), UNIT)


def test_knn_two_points_closed_form():
    assert float(knn_entropy(np.array([[0.0], [1.0]]), 1)) == pytest.approx(1.9635101, abs=1e-7)


def test_knn_identical_states_degenerate():
    with pytest.raises(DegenerateDistance):
        knn_entropy(np.zeros((4, 2)), 1)


def test_knn_needs_more_than_k_states():
    with pytest.raises(InvalidArgument):
        knn_entropy(np.array([[0.0], [1.0]]), 2)


def test_renyi_identical_states_is_zero():
    assert float(renyi_matrix_entropy(np.zeros((6, 2)), 1.001, UNIT)) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("alpha", [1.001, 2.0, 3.0, 0.5])
def test_renyi_separated_states_is_log2_n(alpha):
    states = np.arange(8.0).reshape(-1, 1) * 100.0
    value = renyi_matrix_entropy(states, alpha, UNIT)
    assert value.log_base is LogBase.BASE2
    assert float(value) == pytest.approx(3.0, abs=1e-9)


def test_renyi_order_two_matches_trace_formula(rng):
    states = rng.normal(size=(30, 2))
    gram = gram_matrix(states, UNIT).normalized().entries
    expected = -math.log2(np.trace(gram @ gram))
    assert float(renyi_matrix_entropy(states, 2.0, UNIT)) == pytest.approx(expected, abs=1e-12)


def test_renyi_within_range(rng):
    states = rng.normal(size=(40, 3))
    for alpha in (0.5, 1.001, 2.0, 3.0):
        value = float(renyi_matrix_entropy(states, alpha, UNIT))
        assert 0.0 <= value <= math.log2(40)


def test_renyi_rejects_alpha_one():
    with pytest.raises(InvalidArgument):
        renyi_matrix_entropy(np.zeros((2, 1)), 1.0, UNIT)


def test_jacobi_matches_lapack(rng):
    m = rng.normal(size=(20, 20))
    m = m + m.T
    ours = symmetric_eigenvalues(m)
    assert np.allclose(ours, np.sort(np.linalg.eigvalsh(m))[::-1], atol=1e-9)


def test_jacobi_rejects_asymmetric():
    with pytest.raises(InvalidArgument):
        symmetric_eigenvalues(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_base_conversion_is_exact():
    value = kde_entropy(np.array([[0.0], [0.5], [3.0]]), UNIT)
    assert value.to_base2().value == value.value / math.log(2.0)
    assert value.to_base2().to_natural().value == pytest.approx(value.value, abs=1e-15)


def test_gap_is_zero_with_k_plus_one_states(rng):
    gap, _ = kernel_sum_gap(rng.normal(size=(4, 2)), 3, UNIT)
    assert gap == 0.0


def test_gap_bounded_when_threshold_met():
    states = np.arange(10.0).reshape(-1, 1) * 20.0
    gap, ok = kernel_sum_gap(states, 2, UNIT, epsilon=1e-6)
    assert ok
    assert gap <= 1e-6
    diff = abs(float(kde_entropy(states, UNIT)) - float(kde_entropy_truncated(states, 2, UNIT)))
    assert diff <= gap + 1e-15


def test_gap_threshold_fails_for_dense_states(rng):
    _, ok = kernel_sum_gap(rng.normal(scale=0.1, size=(50, 2)), 3, UNIT)
    assert not ok


def test_truncated_kde_close_to_full(rng):
    states = rng.normal(scale=0.5, size=(60, 2))
    gap, _ = kernel_sum_gap(states, 5, UNIT)
    diff = abs(float(kde_entropy(states, UNIT)) - float(kde_entropy_truncated(states, 5, UNIT)))
    assert diff <= gap + 1e-12


def test_renyi2_truncated_with_all_links_matches_full(rng):
    states = rng.normal(size=(12, 2))
    full = float(renyi_matrix_entropy(states, 2.0, UNIT))
    assert float(renyi2_truncated(states, 11, UNIT)) == pytest.approx(full, abs=1e-12)


def test_subsample_is_deterministic_and_bounded():
    states = np.arange(1000.0).reshape(-1, 1)
    a = subsample_evenly(states, 256)
    assert a.shape == (256, 1)
    assert a[0, 0] == 0.0 and a[-1, 0] == 999.0
    assert np.array_equal(a, subsample_evenly(states, 256))
    assert subsample_evenly(states[:10], 256).shape == (10, 1)


def test_estimate_dispatches():
    states = np.array([[0.0], [1.0]])
    assert float(estimate(states, EstimatorConfig(name="knn", k=1))) == pytest.approx(1.9635101, abs=1e-7)
    assert float(estimate(states, EstimatorConfig(name="kde"))) == float(kde_entropy(states, UNIT))


@pytest.mark.parametrize(
    "kwargs, field",
    [({"name": "bogus"}, "name"), ({"sigma": 0.0}, "sigma"), ({"k": 0}, "k"), ({"alpha": 1.0}, "alpha")],
)
def test_estimator_config_validation(kwargs, field):
    with pytest.raises(InvalidArgument) as exc:
        EstimatorConfig(**kwargs)
    assert exc.value.field == field


HALF = KernelConfig(0.5)
PAIR = np.array([[0.0], [1.0]])


def test_two_point_closed_forms():
    assert gram_matrix(PAIR, HALF).entries[0, 1] == pytest.approx(math.exp(-1.0), abs=1e-15)
    assert float(kde_entropy(PAIR, HALF)) == pytest.approx(0.379885, abs=1e-6)
    assert float(renyi_matrix_entropy(PAIR, 2.0, HALF)) == pytest.approx(0.8169, abs=1e-4)
    assert float(renyi_matrix_entropy(PAIR, 2.0, HALF)) == pytest.approx(
        -math.log2((1.0 + math.exp(-2.0)) / 2.0), abs=1e-12
    )


def test_knn_matches_gaussian_entropy():
    # (d/2) ln(2 pi e) for a standard 2-D Gaussian
    expected = math.log(2.0 * math.pi * math.e)
    close = 0
    for seed in range(10):
        samples = np.random.default_rng(seed).standard_normal((5000, 2))
        close += abs(float(knn_entropy(samples, 5)) - expected) <= 0.15
    assert close >= 9


def test_estimators_ignore_order(rng):
    states = rng.normal(size=(40, 3))
    shuffled = states[rng.permutation(40)]
    assert float(kde_entropy(shuffled, UNIT)) == pytest.approx(float(kde_entropy(states, UNIT)), abs=1e-12)
    assert float(knn_entropy(shuffled, 3)) == pytest.approx(float(knn_entropy(states, 3)), abs=1e-12)
    assert float(renyi_matrix_entropy(shuffled, 1.5, UNIT)) == pytest.approx(
        float(renyi_matrix_entropy(states, 1.5, UNIT)), abs=1e-9
    )


def test_estimators_ignore_translation(rng):
    states = rng.normal(size=(40, 3))
    moved = states + np.array([5.0, -2.0, 0.25])
    assert float(kde_entropy(moved, UNIT)) == pytest.approx(float(kde_entropy(states, UNIT)), abs=1e-10)
    assert float(knn_entropy(moved, 3)) == pytest.approx(float(knn_entropy(states, 3)), abs=1e-10)
    assert float(renyi_matrix_entropy(moved, 2.0, UNIT)) == pytest.approx(
        float(renyi_matrix_entropy(states, 2.0, UNIT)), abs=1e-10
    )


@pytest.mark.parametrize("c", [0.1, 2.0, 37.0])
def test_knn_scaling_adds_d_log_c(rng, c):
    states = rng.normal(size=(200, 3))
    shift = 3 * math.log(c)
    assert float(knn_entropy(c * states, 4)) == pytest.approx(float(knn_entropy(states, 4)) + shift, abs=1e-10)


def test_renyi_non_increasing_in_alpha(rng):
    states = rng.normal(scale=0.8, size=(50, 2))
    values = [float(renyi_matrix_entropy(states, alpha, UNIT)) for alpha in (0.5, 0.9, 1.001, 1.5, 2.0, 3.0, 4.5)]
    assert all(a >= b - 1e-10 for a, b in zip(values, values[1:]))


def test_renyi_trace_path_matches_eigenvalues(rng):
    for _ in range(5):
        states = rng.normal(size=(25, 2))
        lam = np.clip(symmetric_eigenvalues(gram_matrix(states, UNIT).normalized().entries), 0.0, None)
        expected = math.log2(float(np.sum(lam ** 3))) / (1.0 - 3.0)
        assert float(renyi_matrix_entropy(states, 3.0, UNIT)) == pytest.approx(expected, abs=1e-10)


def test_gap_within_epsilon_whenever_threshold_holds(rng):
    for _ in range(100):
        states, k, kernel = threshold_separated_states(rng, epsilon=1e-6)
        gap, ok = kernel_sum_gap(states, k, kernel, epsilon=1e-6)
        assert ok
        assert gap <= 1e-6
        full = float(renyi_matrix_entropy(states, 2.0, kernel))
        assert abs(full - float(renyi2_truncated(states, k, kernel))) <= -math.log2(1.0 - gap) + 1e-12
