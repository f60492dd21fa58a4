import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mapvae.errors import SizeError
from mapvae.transport import (chamfer, emd_bruteforce, emd_exact, emd_per_point,
                              emd_subgradient, hungarian, matching_cost)

SOLVERS = ["scipy", "hungarian"]


def clouds(seed, n):
    r = np.random.default_rng(seed)
    return r.normal(size=(n, 3)), r.normal(size=(n, 3))


@pytest.mark.parametrize("solver", SOLVERS)
def test_identity(solver):
    A = np.random.default_rng(0).normal(size=(10, 3))
    res = emd_exact(A, A, solver)
    assert res.cost == 0 and res.matching.tolist() == list(range(10))


@pytest.mark.parametrize("solver", SOLVERS)
def test_single_pair(solver):
    assert emd_exact([[0, 0, 0]], [[3, 4, 0]], solver).cost == pytest.approx(5.0, abs=1e-12)


@pytest.mark.parametrize("solver", SOLVERS)
def test_two_points(solver):
    res = emd_exact([[0, 0, 0], [2, 0, 0]], [[1, 1, 0], [1, -1, 0]], solver)
    assert res.cost == pytest.approx(2 * math.sqrt(2), abs=1e-12)


def test_size_mismatch_names_sizes():
    with pytest.raises(SizeError, match="3.*2"):
        emd_exact(np.zeros((3, 3)), np.zeros((2, 3)))


def test_bruteforce_guard_and_trivial():
    assert emd_bruteforce([[1, 2, 3]], [[1, 2, 4]]).cost == pytest.approx(1.0)
    with pytest.raises(SizeError):
        emd_bruteforce(np.zeros((9, 3)), np.zeros((9, 3)))


def test_oracle_equivalence_200_pairs():
    r = np.random.default_rng(7)
    for _ in range(200):
        n = int(r.integers(2, 9))
        A, B = r.normal(size=(n, 3)), r.normal(size=(n, 3))
        truth = emd_bruteforce(A, B).cost
        for solver in SOLVERS:
            assert abs(emd_exact(A, B, solver).cost - truth) <= 1e-9


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_symmetry(seed, n):
    A, B = clouds(seed, n)
    assert abs(emd_exact(A, B).cost - emd_exact(B, A).cost) <= 1e-9


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_permutation_invariance(seed, n):
    A, B = clouds(seed, n)
    r = np.random.default_rng(seed + 1)
    base = emd_exact(A, B).cost
    assert abs(emd_exact(A[r.permutation(n)], B).cost - base) <= 1e-9
    assert abs(emd_exact(A, B[r.permutation(n)]).cost - base) <= 1e-9


@given(st.integers(0, 10_000), st.integers(1, 30))
def test_matching_is_permutation_and_recomputes_cost(seed, n):
    A, B = clouds(seed, n)
    res = emd_exact(A, B)
    assert sorted(res.matching.tolist()) == list(range(n))
    assert abs(matching_cost(A, B, res.matching) - res.cost) <= 1e-9
    assert res.cost >= 0


def test_zero_iff_permutation():
    A = np.random.default_rng(3).normal(size=(12, 3))
    assert emd_exact(A, A[::-1]).cost == pytest.approx(0.0, abs=1e-12)
    B = A.copy()
    B[0, 0] += 1e-3
    assert emd_exact(A, B).cost > 0


@given(st.integers(0, 10_000), st.integers(2, 60))
def test_own_hungarian_matches_scipy(seed, n):
    A, B = clouds(seed, n)
    assert abs(emd_exact(A, B, "hungarian").cost - emd_exact(A, B, "scipy").cost) <= 1e-9


def test_hungarian_on_integer_ties():
    C = np.ones((5, 5))
    m = hungarian(C)
    assert sorted(m.tolist()) == list(range(5))


# ---------------------------------------------------------------- subgradient

def test_subgradient_coincident_is_zero():
    np.testing.assert_array_equal(emd_subgradient([[1, 1, 1]], [[1, 1, 1]], [0]), [[0, 0, 0]])


def test_subgradient_unit_direction():
    np.testing.assert_allclose(emd_subgradient([[1, 0, 0]], [[0, 0, 0]], [0]), [[1, 0, 0]])


def test_subgradient_matches_finite_difference():
    A, B = clouds(11, 16)
    res = emd_exact(A, B)
    grad = emd_subgradient(A, B, res.matching)
    h = 1e-6
    checked = 0
    for i in range(16):
        for k in range(3):
            Ap, Am = A.copy(), A.copy()
            Ap[i, k] += h
            Am[i, k] -= h
            rp, rm = emd_exact(Ap, B), emd_exact(Am, B)
            # only where the optimal matching is locally stable
            if not (np.array_equal(rp.matching, res.matching)
                    and np.array_equal(rm.matching, res.matching)):
                continue
            fd = (rp.cost - rm.cost) / (2 * h)
            assert abs(fd - grad[i, k]) <= 1e-3 * max(abs(fd), abs(grad[i, k]), 1e-8)
            checked += 1
    assert checked > 40


# ---------------------------------------------------------------- chamfer

def test_chamfer_examples():
    A = np.random.default_rng(0).normal(size=(8, 3))
    assert chamfer(A, A) == 0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(2.0)


def test_chamfer_bruteforce_oracle():
    r = np.random.default_rng(5)
    A, B = r.normal(size=(7, 3)), r.normal(size=(4, 3))
    ab = np.mean([min(np.sum((a - b) ** 2) for b in B) for a in A])
    ba = np.mean([min(np.sum((a - b) ** 2) for a in A) for b in B])
    assert chamfer(A, B) == pytest.approx(ab + ba, rel=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 20))
def test_chamfer_symmetry(seed, n, m):
    r = np.random.default_rng(seed)
    A, B = r.normal(size=(n, 3)), r.normal(size=(m, 3))
    assert chamfer(A, B) == pytest.approx(chamfer(B, A), rel=1e-12)


def test_chamfer_empty():
    with pytest.raises(SizeError):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


def test_emd_per_point():
    assert emd_per_point([[0, 0, 0], [0, 0, 0]], [[3, 4, 0], [3, 4, 0]]) == pytest.approx(5.0)
