"""Kantorovich transport: cost matrices, entropic Sinkhorn, exact LP oracle.

The solver returns couplings of the diagonal-scaling form
``P = diag(u) K diag(v)`` with ``K = exp(-beta*M)``. Potentials are kept
in log domain by default. At large beta the alternating updates alone
creep: per sweep the potentials move by amounts that shrink toward the
float64 resolution long before the marginals reach tight tolerances. So
after a warmup of plain sweeps the solver switches to damped Newton steps
on the smooth entropic dual

    phi(F, G) = F.a + G.b - sum_ij exp(F_i + G_j - beta*M_ij)

whose stationary point is exactly the Sinkhorn fixed point. The Newton
phase changes how the potentials are searched, not what is solved: the
output is still the entropic optimum for the configured beta, and no
beta schedule is involved. Steps are accepted when they increase the
dual or strictly shrink the marginal residual; near float resolution the
dual becomes flat while the residual is still informative, hence the
double test.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import eye as sparse_eye
from scipy.sparse import kron as sparse_kron
from scipy.sparse import vstack as sparse_vstack
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .errors import (
    DegenerateRowError,
    InvalidConfigError,
    InvalidInputError,
    NumericError,
    SizeError,
)

DENSE_PLAN_CAP = int(2e8)   # refuse dense couplings beyond this many entries
LP_ORACLE_CAP = 10_000      # exact LP is an oracle, desk scale only


def _points_of(obj) -> np.ndarray:
    pts = getattr(obj, "points", obj)
    return np.asarray(pts, dtype=np.float64)


@dataclasses.dataclass
class CostMatrix:
    """Dense squared-Euclidean cost, rows = latent, cols = physical."""

    entries: np.ndarray
    row_tag: str = ""
    col_tag: str = ""

    @property
    def shape(self):
        return self.entries.shape


@dataclasses.dataclass
class SinkhornConfig:
    """Entropic solver settings.

    beta is absolute by default; with ``beta_scale="median"`` the
    effective regularization is ``beta / median(M)``, which makes one
    beta meaningful across instances with different length scales. Both
    the configured and the effective value are recorded on the plan.
    ``accel`` turns the damped-Newton phase on/off; "auto" enables it
    for desk-scale instances where the dense dual Hessian is cheap.
    """

    beta: float = 1e6
    max_iters: int = 5000
    marginal_tol: float = 1e-9
    log_domain: bool = True
    beta_scale: str = "absolute"   # or "median"
    accel: str | bool = "auto"

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidConfigError(f"beta must be > 0, got {self.beta}")
        if self.max_iters < 1:
            raise InvalidConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.beta_scale not in ("absolute", "median"):
            raise InvalidConfigError(f"unknown beta_scale {self.beta_scale!r}")
        if self.accel not in ("auto", True, False):
            raise InvalidConfigError(f"accel must be 'auto' or bool, got {self.accel!r}")


@dataclasses.dataclass
class TransportPlan:
    """Coupling with its marginals and solve diagnostics."""

    coupling: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    beta: float
    iterations: int
    converged: bool
    cost: float = float("nan")
    beta_effective: float | None = None

    def marginal_residuals(self) -> tuple[float, float]:
        """L1 distances of the coupling's row/column sums to (a, b)."""
        r = np.abs(self.coupling.sum(axis=1) - self.row_marginal).sum()
        c = np.abs(self.coupling.sum(axis=0) - self.col_marginal).sum()
        return float(r), float(c)


def cost_matrix(grid, cloud) -> CostMatrix:
    """M_ij = |xi_i - x_j|^2, computed as an explicit difference sum.

    cdist's sqeuclidean accumulates (u_k - v_k)^2 per coordinate in a
    fixed order, so entries are exactly zero iff points coincide and
    results are reproducible across runs (no Gram-matrix reassociation).
    """
    gp = _points_of(grid)
    cp = _points_of(cloud)
    if gp.shape[0] == 0 or cp.shape[0] == 0:
        raise InvalidInputError("cost_matrix needs nonempty point sets")
    entries = cdist(gp, cp, metric="sqeuclidean")
    return CostMatrix(entries=entries,
                      row_tag=getattr(grid, "tag", ""),
                      col_tag=getattr(cloud, "tag", ""))


def _check_marginals(a, b, n2, n1):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (n2,) or b.shape != (n1,):
        raise InvalidInputError(
            f"marginal shapes {a.shape}, {b.shape} do not match cost {n2}x{n1}"
        )
    if abs(a.sum() - 1.0) > 1e-8 or abs(b.sum() - 1.0) > 1e-8:
        raise InvalidInputError("marginals must each sum to 1")
    if (a < 0).any() or (b < 0).any():
        raise InvalidInputError("marginals must be nonnegative")
    return a, b


def _effective_beta(cfg: SinkhornConfig, M: np.ndarray) -> float:
    if cfg.beta_scale == "absolute":
        return cfg.beta
    med = float(np.median(M))
    if not med > 0:
        raise NumericError("median(M) is zero; cannot scale beta by it")
    return cfg.beta / med


def _log_P(F, G, Mb):
    return F[:, None] + G[None, :] - Mb


def _dual_and_plan(F, G, Mb, a, b):
    """Entropic dual value and the coupling at (F, G); -inf on overflow."""
    E = _log_P(F, G, Mb)
    if E.max() > 500.0:
        return -np.inf, None
    P = np.exp(E)
    return float(F @ a + G @ b - P.sum()), P


def _residual(P, a, b):
    return float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())


def _damped_newton_step(P, r, c, grad, lam):
    """Solve (H + lam I) step = grad for the dual Hessian.

    H = [[diag(r), P], [P^T, diag(c)]]. Small systems go through the
    assembled matrix; large ones through the Schur complement on the
    column block, which is exact because the row block is diagonal:
        S = diag(c + lam) - P^T diag(r + lam)^-1 P.
    """
    n2, n1 = P.shape
    if n2 + n1 <= 2048:
        H = np.empty((n2 + n1, n2 + n1))
        H[:n2, :n2] = np.diag(r + lam)
        H[n2:, n2:] = np.diag(c + lam)
        H[:n2, n2:] = P
        H[n2:, :n2] = P.T
        return np.linalg.solve(H, grad)
    inv_ar = 1.0 / (r + lam)
    g1, g2 = grad[:n2], grad[n2:]
    W = P * inv_ar[:, None]
    S = -(W.T @ P)
    S[np.diag_indices(n1)] += c + lam
    s2 = np.linalg.solve(S, g2 - W.T @ g1)
    s1 = inv_ar * (g1 - P @ s2)
    return np.concatenate([s1, s2])


def _newton_phase(F, G, Mb, a, b, tol, budget):
    """Levenberg-damped Newton on the entropic dual.

    The dual gradient is the marginal defect (a - P1, b - P^T 1) and the
    Hessian is [[diag(P1), P], [P^T, diag(P^T 1)]]. Steps are accepted if
    they raise the dual or shrink the total L1 marginal residual by a
    factor below 0.999; otherwise damping increases. If every damped try
    fails, one plain sweep re-anchors the potentials.
    """
    n2, n1 = Mb.shape
    loga = np.log(a)
    logb = np.log(b)
    lam = 1e-10
    phi, P = _dual_and_plan(F, G, Mb, a, b)
    r = P.sum(axis=1)
    c = P.sum(axis=0)
    res = np.abs(a - r).sum() + np.abs(b - c).sum()
    steps = 0
    while steps < budget:
        if res < tol:
            return F, G, steps, True
        steps += 1
        grad = np.concatenate([a - r, b - c])
        accepted = False
        for _ in range(15):
            try:
                step = _damped_newton_step(P, r, c, grad, lam)
            except np.linalg.LinAlgError:
                lam = min(max(lam * 10.0, 1e-14), 1e8)
                continue
            t = 1.0
            for _ in range(20):
                Fn = F + t * step[:n2]
                Gn = G + t * step[n2:]
                phin, Pn = _dual_and_plan(Fn, Gn, Mb, a, b)
                if Pn is None:
                    t *= 0.5
                    continue
                rn = Pn.sum(axis=1)
                cn = Pn.sum(axis=0)
                resn = np.abs(a - rn).sum() + np.abs(b - cn).sum()
                if phin > phi or resn < 0.999 * res:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                F, G, phi, P, r, c, res = Fn, Gn, phin, Pn, rn, cn, resn
                lam = max(lam * 0.3, 1e-14) if t == 1.0 else min(lam * 3.0, 1e8)
                break
            lam = min(lam * 10.0, 1e8)
        if not accepted:
            # re-anchor with one exact alternating sweep
            with np.errstate(divide="ignore"):
                F = loga - logsumexp(G[None, :] - Mb, axis=1)
                G = logb - logsumexp(F[:, None] - Mb, axis=0)
            phi, P = _dual_and_plan(F, G, Mb, a, b)
            r = P.sum(axis=1)
            c = P.sum(axis=0)
            res = np.abs(a - r).sum() + np.abs(b - c).sum()
    return F, G, steps, bool(res < tol)


def _solve_log(M, a, b, beta, cfg):
    n2, n1 = M.shape
    Mb = beta * M
    with np.errstate(divide="ignore"):
        loga = np.log(a)
        logb = np.log(b)
    F = np.zeros(n2)
    G = np.zeros(n1)

    accel_on = cfg.accel is True or (
        cfg.accel == "auto" and n1 * n2 <= 4_194_304
    )
    sweep_cap = 100 if (n2 + n1) <= 2048 else 5
    warmup = min(sweep_cap, cfg.max_iters) if accel_on else cfg.max_iters
    check_every = 1 if n1 * n2 <= 65_536 else 10

    it = 0
    converged = False
    while it < warmup:
        it += 1
        F = loga - logsumexp(G[None, :] - Mb, axis=1)
        G = logb - logsumexp(F[:, None] - Mb, axis=0)
        if it % check_every == 0 or it == warmup:
            P = np.exp(_log_P(F, G, Mb))
            if _residual(P, a, b) < cfg.marginal_tol:
                converged = True
                break

    if not converged and accel_on and it < cfg.max_iters:
        F, G, steps, converged = _newton_phase(
            F, G, Mb, a, b, cfg.marginal_tol, cfg.max_iters - it
        )
        it += steps

    P = np.exp(_log_P(F, G, Mb))
    return P, it, converged, (F, G)


def _solve_kernel(M, a, b, beta, cfg):
    with np.errstate(over="raise", divide="raise", invalid="raise"):
        try:
            K = np.exp(-beta * M)
            u = np.ones(M.shape[0])
            v = np.ones(M.shape[1])
            it = 0
            converged = False
            while it < cfg.max_iters:
                it += 1
                u = a / (K @ v)
                v = b / (K.T @ u)
                P = u[:, None] * K * v[None, :]
                if _residual(P, a, b) < cfg.marginal_tol:
                    converged = True
                    break
        except FloatingPointError as exc:
            raise NumericError(
                f"kernel-domain iteration hit {exc}; enable log_domain"
            ) from None
    P = u[:, None] * K * v[None, :]
    if not np.isfinite(P).all():
        raise NumericError("non-finite coupling; enable log_domain")
    return P, it, converged, (np.log(u), np.log(v))


def sinkhorn(M, a, b, cfg: SinkhornConfig | None = None) -> TransportPlan:
    """Solve the entropy-regularized transport problem.

    Stops when the summed L1 marginal residual drops below
    ``cfg.marginal_tol`` or after ``cfg.max_iters`` updates (sweeps plus
    Newton steps); the ``converged`` flag records which. The reported
    cost is ``<P, M>`` without the entropy term.
    """
    cfg = cfg or SinkhornConfig()
    Mat = M.entries if isinstance(M, CostMatrix) else np.asarray(M, dtype=np.float64)
    if not np.isfinite(Mat).all():
        raise InvalidInputError("cost matrix must be finite")
    n2, n1 = Mat.shape
    if n1 * n2 > DENSE_PLAN_CAP:
        raise SizeError(
            f"dense coupling would have {n1 * n2} entries (cap {DENSE_PLAN_CAP}); "
            "downsample the cloud or use solve_plan_streaming"
        )
    a, b = _check_marginals(a, b, n2, n1)
    beta = _effective_beta(cfg, Mat)
    if cfg.log_domain:
        P, it, converged, _ = _solve_log(Mat, a, b, beta, cfg)
    else:
        P, it, converged, _ = _solve_kernel(Mat, a, b, beta, cfg)
    return TransportPlan(
        coupling=P, row_marginal=a, col_marginal=b, beta=cfg.beta,
        iterations=it, converged=converged, cost=float((P * Mat).sum()),
        beta_effective=beta,
    )


def exact_plan_lp(M, a, b) -> TransportPlan:
    """Exact optimal coupling via the LP, for oracle-scale instances.

    Solved with HiGHS dual simplex, which returns a vertex of the
    transport polytope; vertices have at most n1+n2-1 nonzero entries.
    """
    Mat = M.entries if isinstance(M, CostMatrix) else np.asarray(M, dtype=np.float64)
    n2, n1 = Mat.shape
    if n1 * n2 > LP_ORACLE_CAP:
        raise SizeError(
            f"LP oracle capped at {LP_ORACLE_CAP} entries, got {n1 * n2}"
        )
    a, b = _check_marginals(a, b, n2, n1)
    A_eq = sparse_kron(sparse_eye(n2), np.ones((1, n1)))
    B_eq = sparse_kron(np.ones((1, n2)), sparse_eye(n1))
    constraints = sparse_vstack([A_eq, B_eq])
    res = linprog(
        Mat.ravel(), A_eq=constraints.tocsr(), b_eq=np.concatenate([a, b]),
        bounds=(0, None), method="highs-ds",
    )
    if not res.success:
        raise NumericError(f"LP solve failed: {res.message}")
    P = res.x.reshape(n2, n1)
    if P.min() < -1e-9:
        raise NumericError(f"LP returned negative mass {P.min()}")
    P[P < 0] = 0.0
    return TransportPlan(
        coupling=P, row_marginal=a, col_marginal=b, beta=math.inf,
        iterations=int(res.nit), converged=True, cost=float(res.fun),
        beta_effective=math.inf,
    )


def transported_mesh(plan: TransportPlan, cloud) -> np.ndarray:
    """Barycentric image of each latent point: x'_i = (sum_j P_ij x_j) / a_i.

    Dividing by the row marginal makes each x' a convex combination of
    physical points, i.e. proper physical coordinates, whatever the
    marginal normalization.
    """
    X = _points_of(cloud)
    a = plan.row_marginal
    if (a == 0).any():
        bad = int(np.nonzero(a == 0)[0][0])
        raise DegenerateRowError(f"row marginal a[{bad}] is zero")
    return (plan.coupling @ X) / a[:, None]


@dataclasses.dataclass
class StrategyResult:
    """Refined transported mesh plus provenance indices (None for matrix)."""

    points: np.ndarray
    indices: np.ndarray | None
    mode: str


def plan_strategy(plan: TransportPlan, cloud, mode: str = "mean") -> StrategyResult:
    """Extract a transported mesh from a plan.

    matrix: the barycentric points themselves. max: for each latent row
    the physical point with the largest coupling entry. mean: the
    physical point nearest to the barycentric point. Ties resolve to the
    lowest index (argmax takes the first maximum; the nearest-neighbor
    query has an explicit lowest-index tie rule).
    """
    X = _points_of(cloud)
    if mode == "matrix":
        return StrategyResult(points=transported_mesh(plan, cloud),
                              indices=None, mode=mode)
    if mode == "max":
        idx = np.argmax(plan.coupling, axis=1)
        return StrategyResult(points=X[idx], indices=idx, mode=mode)
    if mode == "mean":
        from .coupling import exact_nn
        bary = transported_mesh(plan, cloud)
        idx = exact_nn(bary, X, k=1)
        return StrategyResult(points=X[idx], indices=idx, mode=mode)
    raise InvalidConfigError(f"unknown plan strategy {mode!r}")


def solve_plan_streaming(grid, cloud, a, b, cfg: SinkhornConfig,
                         strategy: str = "mean", row_block: int = 2048):
    """Sinkhorn + strategy extraction without a dense coupling.

    Cost-matrix rows are regenerated per sweep in blocks of
    ``row_block`` latent points, so memory stays O(row_block * n1).
    Only plain log-domain sweeps are available here (the Newton phase
    needs the dense coupling). Returns (StrategyResult, iterations,
    converged). The extraction stage is bit-identical to the dense
    strategies given equal potentials; the sweep bookkeeping checks the
    residual a half-sweep earlier, so iteration counts can differ from
    the dense path by one.
    """
    gp = _points_of(grid)
    cp = _points_of(cloud)
    n2, n1 = gp.shape[0], cp.shape[0]
    a, b = _check_marginals(a, b, n2, n1)
    if cfg.beta_scale != "absolute":
        raise InvalidConfigError(
            "streaming path needs beta_scale='absolute' (median of M is "
            "not available without materializing it)"
        )
    beta = cfg.beta
    with np.errstate(divide="ignore"):
        loga = np.log(a)
        logb = np.log(b)
    F = np.zeros(n2)
    G = np.zeros(n1)
    blocks = range(0, n2, row_block)

    def block_Mb(lo):
        hi = min(lo + row_block, n2)
        return beta * cdist(gp[lo:hi], cp, metric="sqeuclidean"), hi

    converged = False
    it = 0
    while it < cfg.max_iters:
        it += 1
        # F update; as a byproduct the row sums of the *previous* (F, G)
        # pair are a_i * exp(F_old_i - F_new_i), and that pair already has
        # exact column sums, so its total residual is checkable for free
        F_new = np.empty(n2)
        for lo in blocks:
            Mb, hi = block_Mb(lo)
            F_new[lo:hi] = loga[lo:hi] - logsumexp(G[None, :] - Mb, axis=1)
        if it > 1:
            res_row = float(np.abs(a * np.exp(F - F_new) - a).sum())
            if res_row < cfg.marginal_tol:
                converged = True
                break
        F = F_new
        col_acc = np.full(n1, -np.inf)
        for lo in blocks:
            Mb, hi = block_Mb(lo)
            col_acc = np.logaddexp(
                col_acc, logsumexp(F[lo:hi, None] - Mb, axis=0)
            )
        G = logb - col_acc

    points = np.empty((n2, 3))
    indices = None if strategy == "matrix" else np.empty(n2, dtype=np.int64)
    from .coupling import exact_nn
    for lo in blocks:
        Mb, hi = block_Mb(lo)
        P = np.exp(_log_P(F[lo:hi], G, Mb))
        if strategy == "max":
            idx = np.argmax(P, axis=1)
            indices[lo:hi] = idx
            points[lo:hi] = cp[idx]
        else:
            bary = (P @ cp) / a[lo:hi, None]
            if strategy == "matrix":
                points[lo:hi] = bary
            elif strategy == "mean":
                idx = exact_nn(bary, cp, k=1)
                indices[lo:hi] = idx
                points[lo:hi] = cp[idx]
            else:
                raise InvalidConfigError(f"unknown plan strategy {strategy!r}")
    return StrategyResult(points=points, indices=indices, mode=strategy), it, converged
