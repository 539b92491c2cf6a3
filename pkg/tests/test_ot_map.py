"""1D rearrangement and projection-pursuit transport."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otgeo.errors import InvalidInputError
from otgeo.ot_map import informative_direction, ot_1d, ppmm


def brute_force_assignment_cost(x, y):
    """Minimal squared-cost pairing over all permutations."""
    best = np.inf
    for perm in itertools.permutations(range(len(y))):
        c = float(((x - y[list(perm)]) ** 2).sum())
        best = min(best, c)
    return best


def replay(X0, Y, result):
    """Re-apply the recorded 1D steps; the last direction may be unexecuted."""
    X = np.array(X0, dtype=np.float64)
    for e in result.directions[:result.iterations]:
        px = X @ e
        X = X + np.outer(ot_1d(px, Y @ e) - px, e)
    return X


# ------------------------------------------------------------------ ot_1d

def test_ot_1d_identity():
    x = np.array([3.0, -1.0, 2.0])
    assert np.array_equal(ot_1d(x, x), x)


def test_ot_1d_matches_brute_force_assignment(rng):
    for _ in range(100):
        x = rng.standard_normal(6)
        y = rng.standard_normal(6)
        t = ot_1d(x, y)
        cost = float(((x - t) ** 2).sum())
        assert cost == pytest.approx(brute_force_assignment_cost(x, y),
                                     abs=1e-12)


def test_ot_1d_is_monotone_rearrangement(rng):
    x = rng.standard_normal(50)
    y = rng.standard_normal(50)
    t = ot_1d(x, y)
    # ranks are preserved and the value multiset is exactly y's
    assert np.array_equal(np.argsort(x, kind="stable"),
                          np.argsort(t, kind="stable"))
    assert np.array_equal(np.sort(t), np.sort(y))


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=40),
       st.integers(min_value=0, max_value=2**31 - 1))
def test_ot_1d_transfers_value_multiset(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = rng.standard_normal(n)
    assert np.array_equal(np.sort(ot_1d(x, y)), np.sort(y))


def test_ot_1d_rejects_size_mismatch():
    with pytest.raises(InvalidInputError):
        ot_1d(np.zeros(3), np.zeros(4))


# -------------------------------------------------------------- directions

def test_direction_mean_shift_dominates(rng):
    X = rng.standard_normal((500, 3))
    Y = X + np.array([5.0, 0.0, 0.0])
    # Cov(X) == Cov(Y) under translation, so the rule's matrix is the
    # rank-one dm dm^T whose eigenvector is exactly +-e_x
    d, fell_back = informative_direction(X, Y, rule="cov-eig")
    assert not fell_back
    ex = np.array([1.0, 0.0, 0.0])
    assert min(np.linalg.norm(d - ex), np.linalg.norm(d + ex)) < 1e-6


def test_direction_sliced_max_finds_stretched_axis(rng):
    X = rng.standard_normal((800, 3))
    Y = rng.standard_normal((800, 3))
    Y[:, 2] *= 3.0
    d, _ = informative_direction(X, Y, rule="sliced-max", slices=64,
                                 rng=np.random.default_rng(1))
    assert abs(d[2]) > 0.9


def test_direction_random_unit_norm(rng):
    X = rng.standard_normal((10, 3))
    d, _ = informative_direction(X, X + 1.0, rule="random",
                                 rng=np.random.default_rng(2))
    assert abs(np.linalg.norm(d) - 1.0) < 1e-12


def test_direction_unknown_rule(rng):
    X = rng.standard_normal((10, 3))
    with pytest.raises(InvalidInputError):
        informative_direction(X, X, rule="pca")


# -------------------------------------------------------------------- ppmm

def test_ppmm_identical_sets_stop_without_update(rng):
    X0 = rng.standard_normal((40, 3))
    res = ppmm(X0, X0, K=10)
    assert res.iterations == 0
    assert np.array_equal(res.transported, X0)
    assert len(res.per_iter_disc) == 1


def test_ppmm_each_step_matches_projections(rng):
    for trial in range(3):
        X0 = rng.standard_normal((64, 3))
        Y = rng.standard_normal((64, 3)) + 1.0
        res = ppmm(X0, Y, K=10, tol=0.0)
        X = np.array(X0)
        for e in res.directions[:res.iterations]:
            px = X @ e
            X = X + np.outer(ot_1d(px, Y @ e) - px, e)
            # after the step the projections match Y's order statistics
            assert np.max(np.abs(np.sort(X @ e) - np.sort(Y @ e))) < 1e-12


def test_ppmm_replay_reproduces_transported(rng):
    X0 = rng.standard_normal((32, 3))
    Y = rng.standard_normal((32, 3)) * 1.5
    res = ppmm(X0, Y, K=15)
    assert np.allclose(replay(X0, Y, res), res.transported, atol=1e-12)


def test_ppmm_gaussian_moments(rng):
    n = 1024
    X0 = rng.standard_normal((n, 3))
    Y = rng.standard_normal((n, 3)) * np.array([1.0, 2.0, 0.5]) \
        + np.array([3.0, 0.0, 0.0])
    res = ppmm(X0, Y, K=200)
    mu_err = np.linalg.norm(res.transported.mean(axis=0) - Y.mean(axis=0))
    cov_err = np.linalg.norm(np.cov(res.transported.T) - np.cov(Y.T))
    assert mu_err < 0.05
    assert cov_err < 0.1


def test_ppmm_discrepancy_trend(rng):
    X0 = rng.standard_normal((128, 3))
    Y = rng.standard_normal((128, 3)) + 2.0
    res = ppmm(X0, Y, K=60)
    d = res.per_iter_disc
    # not monotone per step, but the tail should sit far below the start
    assert min(d) < 0.05 * d[0]


def test_ppmm_rejects_mismatched_sets(rng):
    with pytest.raises(InvalidInputError):
        ppmm(rng.standard_normal((8, 3)), rng.standard_normal((9, 3)))
    with pytest.raises(InvalidInputError):
        ppmm(rng.standard_normal((8, 2)), rng.standard_normal((8, 2)))


def test_ppmm_seed_reproducible(rng):
    X0 = rng.standard_normal((64, 3))
    Y = rng.standard_normal((64, 3))
    a = ppmm(X0, Y, K=20, rule="random", seed=7)
    b = ppmm(X0, Y, K=20, rule="random", seed=7)
    assert np.array_equal(a.transported, b.transported)
