"""Entropic and exact transport plans against independent oracles."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from otgeo.errors import InvalidConfigError, InvalidInputError
from otgeo.geometry import PointCloud, uniform_weights
from otgeo.latent_mesh import generate_grid
from otgeo.ot_plan import (
    SinkhornConfig,
    cost_matrix,
    exact_plan_lp,
    plan_strategy,
    sinkhorn,
    solve_plan_streaming,
    transported_mesh,
)
from conftest import make_cloud


def scalar_fixed_point_2x2(M, a, b, beta, iters=200):
    """Textbook diagonal-scaling iteration, no shared code with sinkhorn."""
    K = np.exp(-beta * M)
    u = np.ones(2)
    v = np.ones(2)
    for _ in range(iters):
        u = a / (K @ v)
        v = b / (K.T @ u)
    P = u[:, None] * K * v[None, :]
    return P, float((P * M).sum())


def lp_2x2_by_vertex_enumeration(M, a, b):
    """The 2x2 transport polytope is a segment; check both endpoints."""
    t_lo = max(0.0, a[0] - b[1])
    t_hi = min(a[0], b[0])
    best = None
    for t in (t_lo, t_hi):
        P = np.array([[t, a[0] - t], [b[0] - t, a[1] - (b[0] - t)]])
        c = float((P * M).sum())
        if best is None or c < best[1]:
            best = (P, c)
    return best


def colinear_cloud(vals):
    pts = np.column_stack([vals, np.zeros(len(vals)), np.zeros(len(vals))])
    return PointCloud(points=pts, weights=uniform_weights(len(vals)))


# ----------------------------------------------------------- cost matrix

def test_cost_entry_is_squared_distance():
    g = colinear_cloud([0.0])
    c = colinear_cloud([1.0])
    M = cost_matrix(g, c)
    assert M.entries.shape == (1, 1)
    assert M.entries[0, 0] == 1.0


def test_cost_diagonal_zero_on_identical_sets(rng):
    cloud = make_cloud(rng, 30)
    M = cost_matrix(cloud, cloud)
    assert np.all(np.diag(M.entries) == 0.0)
    assert np.all(M.entries >= 0.0)


def test_cost_matrix_rejects_empty():
    with pytest.raises(InvalidInputError):
        cost_matrix(colinear_cloud([]), colinear_cloud([0.0]))


# -------------------------------------------------------------- sinkhorn

def test_sinkhorn_2x2_matches_scalar_fixed_point():
    M = np.array([[0.0, 1.0], [1.0, 0.0]])
    a = b = np.array([0.5, 0.5])
    beta = 10.0
    plan = sinkhorn(M, a, b, SinkhornConfig(beta=beta, marginal_tol=1e-14))
    P_ref, cost_ref = scalar_fixed_point_2x2(M, a, b, beta)
    assert abs(plan.cost - cost_ref) < 1e-6
    assert np.allclose(plan.coupling, P_ref, atol=1e-8)
    # closed form: diagonal mass 0.5 * sigmoid(beta)
    sig = 1.0 / (1.0 + np.exp(-beta))
    assert abs(plan.coupling[0, 0] - 0.5 * sig) < 1e-8


def test_sinkhorn_beta_sweep_monotone_and_above_lp(rng):
    n = 8
    M = rng.uniform(0.0, 1.0, (n, n))
    a = uniform_weights(n)
    b = uniform_weights(n)
    lp = exact_plan_lp(M, a, b)
    costs = []
    for beta in (1.0, 10.0, 100.0):
        p = sinkhorn(M, a, b, SinkhornConfig(beta=beta, marginal_tol=1e-12))
        costs.append(p.cost)
        assert p.cost >= lp.cost - 1e-9
    assert costs[0] >= costs[1] >= costs[2] - 1e-12


def test_sinkhorn_identity_on_colinear_points():
    cloud = colinear_cloud([0.0, 1.0, 2.0])
    M = cost_matrix(cloud, cloud)
    a = b = uniform_weights(3)
    plan = sinkhorn(M.entries, a, b)
    assert np.allclose(plan.coupling, np.eye(3) / 3.0, atol=1e-12)
    assert abs(plan.cost) < 1e-12


def test_sinkhorn_marginals_converge(rng):
    n2, n1 = 20, 15
    M = rng.uniform(0, 2, (n2, n1))
    a = rng.uniform(0.5, 1.5, n2)
    a /= a.sum()
    b = rng.uniform(0.5, 1.5, n1)
    b /= b.sum()
    plan = sinkhorn(M, a, b, SinkhornConfig(beta=50.0, marginal_tol=1e-11))
    r, c = plan.marginal_residuals()
    assert plan.converged
    assert r < 1e-11 and c < 1e-11


def test_sinkhorn_median_beta_scale(rng):
    n = 10
    M = rng.uniform(0, 1, (n, n)) + 0.1
    a = b = uniform_weights(n)
    p = sinkhorn(M, a, b, SinkhornConfig(beta=100.0, beta_scale="median"))
    assert p.beta_effective == pytest.approx(100.0 / np.median(M))


def test_sinkhorn_rejects_bad_marginals(rng):
    M = rng.uniform(0, 1, (4, 4))
    with pytest.raises(InvalidInputError):
        sinkhorn(M, np.ones(4), uniform_weights(4))  # rows not normalized
    with pytest.raises(InvalidInputError):
        sinkhorn(M, uniform_weights(3), uniform_weights(4))


def test_sinkhorn_accel_matches_plain(rng):
    n2, n1 = 12, 9
    M = rng.uniform(0, 1, (n2, n1))
    a = uniform_weights(n2)
    b = uniform_weights(n1)
    fast = sinkhorn(M, a, b, SinkhornConfig(beta=200.0, accel=True,
                                            marginal_tol=1e-12))
    slow = sinkhorn(M, a, b, SinkhornConfig(beta=200.0, accel=False,
                                            marginal_tol=1e-12))
    assert abs(fast.cost - slow.cost) < 1e-9
    assert np.allclose(fast.coupling, slow.coupling, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=8),
       st.integers(min_value=2, max_value=8),
       st.integers(min_value=0, max_value=2**31 - 1))
def test_sinkhorn_plan_is_feasible(n2, n1, seed):
    rng = np.random.default_rng(seed)
    M = rng.uniform(0, 1, (n2, n1))
    a = rng.dirichlet(np.ones(n2))
    b = rng.dirichlet(np.ones(n1))
    plan = sinkhorn(M, a, b, SinkhornConfig(beta=30.0, marginal_tol=1e-10))
    assert np.all(plan.coupling >= 0)
    r, c = plan.marginal_residuals()
    assert r < 1e-9 and c < 1e-9


# ------------------------------------------------------------------- lp

def test_lp_2x2_vertex():
    M = np.array([[0.0, 1.0], [1.0, 0.0]])
    a = np.array([0.7, 0.3])
    b = np.array([0.4, 0.6])
    plan = exact_plan_lp(M, a, b)
    P_ref, cost_ref = lp_2x2_by_vertex_enumeration(M, a, b)
    assert np.allclose(plan.coupling, [[0.4, 0.3], [0.0, 0.3]], atol=1e-12)
    assert plan.cost == pytest.approx(0.3, abs=1e-12)
    assert np.allclose(plan.coupling, P_ref, atol=1e-12)
    assert cost_ref == pytest.approx(0.3, abs=1e-15)


def test_lp_plans_are_sparse(rng):
    for _ in range(5):
        n2 = int(rng.integers(3, 12))
        n1 = int(rng.integers(3, 12))
        M = rng.uniform(0, 1, (n2, n1))
        a = rng.dirichlet(np.ones(n2))
        b = rng.dirichlet(np.ones(n1))
        plan = exact_plan_lp(M, a, b)
        assert np.count_nonzero(plan.coupling > 1e-12) <= n2 + n1 - 1


# ----------------------------------------------------- transported mesh

def test_transported_identity_plan(rng):
    cloud = make_cloud(rng, 6)
    plan = sinkhorn(np.zeros((6, 6)) + cost_matrix(cloud, cloud).entries,
                    uniform_weights(6), uniform_weights(6))
    # P = I/6 on identical sets: rows reproduce the points exactly
    xp = transported_mesh(plan, cloud)
    assert np.allclose(xp, cloud.points, atol=1e-12)


def test_transported_points_inside_convex_hull(rng):
    grid = generate_grid("torus", 6)
    cloud = make_cloud(rng, 40)  # uniform in a cube
    M = cost_matrix(grid, cloud)
    plan = sinkhorn(M.entries, grid.weights, cloud.weights,
                    SinkhornConfig(beta=1e6, beta_scale="median"))
    xp = transported_mesh(plan, cloud)
    hull = ConvexHull(cloud.points)
    # all hull inequalities satisfied up to round-off
    viol = xp @ hull.equations[:, :3].T + hull.equations[:, 3]
    assert viol.max() < 1e-9


# ------------------------------------------------------------ strategies

def test_strategies_coincide_on_identity_plan(rng):
    cloud = make_cloud(rng, 5)
    plan = sinkhorn(cost_matrix(cloud, cloud).entries,
                    uniform_weights(5), uniform_weights(5))
    outs = {m: plan_strategy(plan, cloud, mode=m).points
            for m in ("matrix", "max", "mean")}
    assert np.allclose(outs["matrix"], outs["mean"], atol=1e-12)
    assert np.allclose(outs["matrix"], outs["max"], atol=1e-12)
    assert np.allclose(outs["matrix"], cloud.points, atol=1e-12)


def test_strategy_matrix_is_row_weighted_average(rng):
    grid = make_cloud(rng, 7, tag="g")
    cloud = make_cloud(rng, 9)
    plan = sinkhorn(cost_matrix(grid, cloud).entries,
                    uniform_weights(7), uniform_weights(9),
                    SinkhornConfig(beta=5.0))
    res = plan_strategy(plan, cloud, mode="matrix")
    P = plan.coupling
    ref = (P / P.sum(axis=1, keepdims=True)) @ cloud.points
    assert np.allclose(res.points, ref, atol=1e-12)
    assert res.indices is None


def test_strategy_mean_snaps_barycenter_to_nearest_point(rng):
    grid = make_cloud(rng, 7, tag="g")
    cloud = make_cloud(rng, 9)
    plan = sinkhorn(cost_matrix(grid, cloud).entries,
                    uniform_weights(7), uniform_weights(9),
                    SinkhornConfig(beta=5.0))
    res = plan_strategy(plan, cloud, mode="mean")
    bary = plan_strategy(plan, cloud, mode="matrix").points
    d2 = ((bary[:, None, :] - cloud.points[None, :, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)
    assert np.array_equal(res.indices, idx)
    assert np.allclose(res.points, cloud.points[idx], atol=1e-15)


def test_strategy_max_picks_argmax_column(rng):
    grid = make_cloud(rng, 7, tag="g")
    cloud = make_cloud(rng, 9)
    plan = sinkhorn(cost_matrix(grid, cloud).entries,
                    uniform_weights(7), uniform_weights(9),
                    SinkhornConfig(beta=5.0))
    res = plan_strategy(plan, cloud, mode="max")
    idx = plan.coupling.argmax(axis=1)
    assert np.array_equal(res.indices, idx)
    assert np.allclose(res.points, cloud.points[idx], atol=1e-15)


def test_strategy_unknown_mode(rng):
    cloud = make_cloud(rng, 4)
    plan = sinkhorn(cost_matrix(cloud, cloud).entries,
                    uniform_weights(4), uniform_weights(4))
    with pytest.raises(InvalidConfigError):
        plan_strategy(plan, cloud, mode="median")


# ------------------------------------------------------------- streaming

def test_streaming_matches_dense(rng):
    grid = generate_grid("torus", 5)
    cloud = make_cloud(rng, 18)
    M = cost_matrix(grid, cloud)
    cfg = SinkhornConfig(beta=20.0, marginal_tol=1e-11, accel=False)
    dense = sinkhorn(M.entries, grid.weights, cloud.weights, cfg)
    for mode in ("mean", "max"):
        res, iters, conv = solve_plan_streaming(
            grid, cloud, grid.weights, cloud.weights, cfg,
            strategy=mode, row_block=7)
        ref = plan_strategy(dense, cloud, mode=mode)
        assert conv
        assert np.allclose(res.points, ref.points, atol=1e-9)


def test_streaming_rejects_median_scale(rng):
    grid = generate_grid("torus", 4)
    cloud = make_cloud(rng, 10)
    with pytest.raises(InvalidConfigError):
        solve_plan_streaming(grid, cloud, grid.weights, cloud.weights,
                             SinkhornConfig(beta=10.0, beta_scale="median"))
