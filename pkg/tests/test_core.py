import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bilqr.core import (BeliefError, DimensionError, GaussianBelief, ProblemDims, flatten,
                        marginal_param_cov, param_cov_indices, repair_psd, unflatten)

from oracles import random_psd


def _belief(seed, n):
    rng = np.random.default_rng(seed)
    return GaussianBelief(rng.standard_normal(n), random_psd(rng, n))


def test_flatten_scalar():
    np.testing.assert_array_equal(flatten(GaussianBelief([0.0], [[4.0]])), [0.0, 4.0])


def test_flatten_identity_cov():
    b = GaussianBelief([1.0, 2.0], np.eye(2))
    np.testing.assert_array_equal(flatten(b), [1, 2, 1, 0, 0, 1])


def test_flatten_is_column_major():
    cov = np.array([[2.0, 0.5], [0.5, 3.0]])
    b = GaussianBelief([0.0, 0.0], cov)
    # off-diagonal appears after the full first column
    np.testing.assert_array_equal(flatten(b)[2:], [2.0, 0.5, 0.5, 3.0])


def test_unflatten_scalar():
    b = unflatten([0.0, 4.0], 1)
    np.testing.assert_array_equal(b.mean, [0.0])
    np.testing.assert_array_equal(b.cov, [[4.0]])


def test_unflatten_symmetrizes():
    coords = np.array([0.0, 0.0, 1.0, 0.2, 0.2 + 1e-12, 1.0])
    b = unflatten(coords, 2)
    assert np.array_equal(b.cov, b.cov.T)
    assert b.cov[0, 1] == pytest.approx(0.2 + 0.5e-12, abs=1e-15)


@pytest.mark.parametrize("length", [0, 5, 7])
def test_unflatten_rejects_bad_length(length):
    with pytest.raises(DimensionError):
        unflatten(np.zeros(length), ProblemDims(1, 1, 1, 1))


@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_round_trip_is_bit_exact(n, seed):
    b = _belief(seed, n)
    back = unflatten(flatten(b), n)
    assert np.array_equal(back.mean, b.mean)
    assert np.array_equal(back.cov, b.cov)
    assert np.array_equal(flatten(back), flatten(b))


def test_round_trip_3d():
    b = _belief(3, 3)
    back = unflatten(flatten(b), ProblemDims(2, 1, 1, 1))
    assert np.array_equal(back.cov, b.cov) and np.array_equal(back.mean, b.mean)


def test_marginal_block_diag():
    b = GaussianBelief(np.zeros(3), np.diag([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(marginal_param_cov(b, ProblemDims(2, 1, 1, 1)), [[3.0]])


def test_marginal_identity():
    b = GaussianBelief(np.zeros(4), np.eye(4))
    np.testing.assert_array_equal(marginal_param_cov(b, ProblemDims(2, 2, 1, 1)), np.eye(2))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_marginal_matches_slicing_and_is_psd(nx, nt, seed):
    dims = ProblemDims(nx, nt, 1, 1)
    b = _belief(seed, dims.n)
    block = marginal_param_cov(b, dims)
    oracle = np.array([[b.cov[i, j] for j in range(nx, nx + nt)] for i in range(nx, nx + nt)])
    assert np.array_equal(block, oracle)
    assert np.linalg.eigvalsh(block)[0] >= -1e-9


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_param_cov_indices_select_block(nx, nt, seed):
    dims = ProblemDims(nx, nt, 1, 1)
    b = _belief(seed, dims.n)
    picked = flatten(b)[param_cov_indices(dims)]
    np.testing.assert_array_equal(picked, marginal_param_cov(b, dims).reshape(-1, order="F"))


def test_dims_validation():
    with pytest.raises(ValueError):
        ProblemDims(0, 1, 1, 1)
    d = ProblemDims(4, 8, 2, 3)
    assert (d.n, d.n_belief) == (12, 12 + 144)


def test_belief_shape_mismatch():
    with pytest.raises(DimensionError):
        GaussianBelief(np.zeros(2), np.eye(3))


def test_belief_non_finite():
    with pytest.raises(BeliefError):
        GaussianBelief([np.nan], [[1.0]])


def test_belief_is_immutable():
    b = GaussianBelief([0.0], [[1.0]])
    with pytest.raises(ValueError):
        b.mean[0] = 1.0


def test_roundoff_negative_eigenvalue_is_clamped():
    v = np.array([[1.0], [1.0]]) / np.sqrt(2)
    cov = v @ v.T - 5e-11 * np.eye(2)
    fixed = repair_psd(cov)
    assert np.linalg.eigvalsh(fixed)[0] >= -1e-15


def test_indefinite_cov_raises():
    with pytest.raises(BeliefError):
        GaussianBelief([0.0, 0.0], [[1.0, 0.0], [0.0, -1e-6]])


@given(arrays(np.float64, (3, 3), elements=st.floats(-10, 10)))
def test_constructed_beliefs_satisfy_invariants(G):
    b = GaussianBelief(np.zeros(3), G @ G.T)
    assert np.max(np.abs(b.cov - b.cov.T)) <= 1e-10
    assert np.linalg.eigvalsh(b.cov)[0] >= -1e-9 * max(1.0, np.abs(b.cov).max())
