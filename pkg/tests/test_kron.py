import itertools
from math import comb

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cmsid.excitation import build_S, example_frequencies
from cmsid.kron import (SizeLimitError, conversion_pair, expand_right, full_power, kron_power,
                        kron_sum, merge_left, merge_right, monomial_table, reduced_kron_sum,
                        reduced_length, reduced_power)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_full_power_examples():
    np.testing.assert_array_equal(full_power([1, 2], 1), [1, 2])
    np.testing.assert_array_equal(full_power([1, 2], 2), [1, 2, 2, 4])
    np.testing.assert_array_equal(full_power([3], 3), [27])


def test_reduced_power_examples():
    np.testing.assert_array_equal(reduced_power([1, 2], 2), [1, 2, 4])
    np.testing.assert_array_equal(reduced_power([1, 2], 1), [1, 2])
    np.testing.assert_array_equal(reduced_power([1, 1, 1], 2), np.ones(6))


def test_reduced_power_matches_brute_force_monomials():
    # independent oracle: exponent tuples of total degree i, graded lexicographic
    v = np.array([1.5, -2.0, 0.5])
    for i in range(1, 5):
        exps = sorted((e for e in itertools.product(range(i + 1), repeat=3) if sum(e) == i),
                      reverse=True)
        expected = [np.prod(v ** np.array(e)) for e in exps]
        np.testing.assert_allclose(reduced_power(v, i), expected, rtol=1e-14)


def test_reduced_power_batched():
    V = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(reduced_power(V, 3)[2], reduced_power(V[2], 3))
    np.testing.assert_array_equal(reduced_power(V, 0), np.ones((4, 1)))


def test_monomial_table_invariants():
    for n, i in [(2, 2), (3, 3), (11, 2), (4, 4)]:
        t = monomial_table(n, i)
        assert t.reduced_length == comb(n + i - 1, i)
        assert t.full_length == n**i
        assert np.all(t.exponents.sum(axis=1) == i)
        assert set(t.position.tolist()) == set(range(t.reduced_length))


def test_size_cap():
    with pytest.raises(SizeLimitError):
        full_power(np.ones(11), 8)
    with pytest.raises(ValueError):
        full_power([1.0], 0)


def test_conversion_pair_examples():
    p = conversion_pair(2, 1)
    np.testing.assert_array_equal(p.M, np.eye(2))
    np.testing.assert_array_equal(p.N, np.eye(2))
    p = conversion_pair(2, 2)
    np.testing.assert_array_equal(p.N, [[1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1]])
    np.testing.assert_array_equal(p.M, [[1, 0, 0, 0], [0, 0.5, 0.5, 0], [0, 0, 0, 1]])
    p = conversion_pair(1, 4)
    np.testing.assert_array_equal(p.M, [[1.0]])
    np.testing.assert_array_equal(p.N, [[1.0]])


@pytest.mark.parametrize("n,i", [(1, 1), (2, 3), (3, 2), (3, 4), (4, 3)])
def test_conversion_pair_structure(n, i):
    p = conversion_pair(n, i)
    np.testing.assert_allclose(p.M @ p.N, np.eye(reduced_length(n, i)), atol=1e-14)
    assert np.all(p.N.sum(axis=1) == 1) and set(np.unique(p.N)) <= {0.0, 1.0}
    assert np.all(p.M >= 0)
    np.testing.assert_allclose(p.M.sum(axis=1), 1.0, atol=1e-14)


def test_conversion_pair_is_read_only():
    with pytest.raises(ValueError):
        conversion_pair(2, 2).M[0, 0] = 3.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4).flatmap(lambda n: arrays(float, n, elements=finite)), st.integers(1, 4))
def test_power_identities(v, i):
    p = conversion_pair(v.size, i)
    np.testing.assert_allclose(p.M @ full_power(v, i), reduced_power(v, i), atol=1e-12)
    np.testing.assert_allclose(p.N @ reduced_power(v, i), full_power(v, i), atol=1e-12)


def test_sparse_helpers_match_dense():
    rng = np.random.default_rng(0)
    for n, i in [(2, 2), (3, 3)]:
        p = conversion_pair(n, i)
        W_full = rng.standard_normal((4, n**i))
        W_red = rng.standard_normal((4, reduced_length(n, i)))
        W_left = rng.standard_normal((n**i, 2))
        np.testing.assert_allclose(expand_right(W_full, n, i), W_full @ p.N, atol=1e-14)
        np.testing.assert_allclose(merge_right(W_red, n, i), W_red @ p.M, atol=1e-14)
        np.testing.assert_allclose(merge_left(W_left, n, i), p.M @ W_left, atol=1e-14)


def test_kron_power():
    X = np.array([[1.0, 2.0], [0.0, 1.0]])
    np.testing.assert_array_equal(kron_power(X, 2), np.kron(X, X))
    np.testing.assert_array_equal(kron_power(X, 1), X)


def test_kron_sum_examples():
    A = np.diag([-1.0, -2.0])
    np.testing.assert_array_equal(kron_sum(A, 1), A)
    np.testing.assert_array_equal(kron_sum(A, 2), np.diag([-2.0, -3.0, -3.0, -4.0]))
    np.testing.assert_array_equal(kron_sum(np.zeros((1, 1)), 3), [[0.0]])
    with pytest.raises(ValueError):
        kron_sum(np.ones((2, 3)), 2)


def test_reduced_kron_sum_examples():
    A = np.diag([-1.0, -2.0])
    np.testing.assert_array_equal(reduced_kron_sum(A, 2), np.diag([-2.0, -3.0, -4.0]))
    B = np.random.default_rng(3).standard_normal((3, 3))
    np.testing.assert_array_equal(reduced_kron_sum(B, 1), B)
    with pytest.raises(ValueError):
        reduced_kron_sum(np.ones((2, 3)), 2)


@pytest.mark.parametrize("n,i", [(2, 2), (3, 3), (2, 4)])
def test_reduced_kron_sum_equals_sandwich(n, i):
    A = np.random.default_rng(n * 10 + i).standard_normal((n, n))
    p = conversion_pair(n, i)
    np.testing.assert_allclose(reduced_kron_sum(A, i), p.M @ kron_sum(A, i) @ p.N, atol=1e-12)


def test_oscillator_square_spectrum():
    S = build_S(example_frequencies())
    lam = np.linalg.eigvals(S)
    pair_sums = np.array([lam[a] + lam[b] for a in range(11) for b in range(a, 11)])
    got = np.linalg.eigvals(reduced_kron_sum(S, 2))
    assert np.sum(np.abs(got) < 1e-9) == 6
    np.testing.assert_allclose(np.sort_complex(np.round(got, 9)),
                               np.sort_complex(np.round(pair_sums, 9)), atol=1e-8)


@pytest.mark.parametrize("i", [1, 2, 3, 4])
def test_flow_property(i):
    rng = np.random.default_rng(i)
    A = rng.standard_normal((3, 3)) - 2 * np.eye(3)
    v0 = rng.standard_normal(3)
    v1 = sla.expm(0.1 * A) @ v0
    np.testing.assert_allclose(reduced_power(v1, i),
                               sla.expm(0.1 * reduced_kron_sum(A, i)) @ reduced_power(v0, i),
                               atol=1e-8)


def test_flow_property_with_integrator():
    # same check with v(0.1) from the package's RK4 integrator
    from cmsid.model import PolynomialSystem, simulate
    rng = np.random.default_rng(5)
    A = rng.standard_normal((2, 2)) - 1.5 * np.eye(2)
    lin = PolynomialSystem(2, 1, 2, 1, {(1, 0): A}, {(1, 0): np.eye(2)})
    v0 = np.array([0.7, -0.4])
    traj = simulate(lin, lambda t: np.zeros(1), v0, 0.1, 1e-3, 0.1)
    np.testing.assert_allclose(reduced_power(traj.x[-1], 3),
                               sla.expm(0.1 * reduced_kron_sum(A, 3)) @ reduced_power(v0, 3),
                               atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_eigenvalue_sum_property(n, i, seed):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(-3, 3, n)
    V = rng.standard_normal((n, n)) + 3 * np.eye(n)
    A = V @ np.diag(lam) @ np.linalg.inv(V)
    sums = np.sort([sum(c) for c in itertools.combinations_with_replacement(lam, i)])
    got = np.sort(np.linalg.eigvals(reduced_kron_sum(A, i)).real)
    np.testing.assert_allclose(got, sums, atol=1e-9 * max(1.0, np.abs(sums).max()))
