"""Synthetic benchmark datasets with analytic ground truth.

Two families, both desk-scale:

star-2d
    Closed planar curves r(theta) = 1 + sum_k a_k cos(k theta + phi_k),
    sampled uniformly in theta. Per-point target u is the signed
    curvature of the curve (constant 1 for the unperturbed circle).

bumpy-sphere-3d
    Radially perturbed spheres rho(v) = 1 + sum_k a_k (v . d_k)^{p_k}
    over unit directions v, sampled on a rotated Fibonacci lattice.
    Per-point target u = H + n . inlet where H is the mean curvature
    (so the target mixes intrinsic shape with the inlet angle).

Targets are validated at generation time: a finite-difference oracle
recomputes them at step h and h/2 and generation aborts if either the
h-to-h/2 drift or the oracle-to-stored gap exceeds RICHARDSON_TOL.
Everything is deterministic per (seed, instance index).
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from ..geometry import PointCloud, uniform_weights, write_point_cloud
from .drag import drag_coefficient
from .manifest import DatasetManifest, ManifestEntry

RICHARDSON_TOL = 1e-6
_FD_STEP_STAR = 4e-4
_FD_STEP_SPHERE = 2e-4
_AREA_QUAD_N = 8192

INLET = np.array([1.0, 0.0, 0.0])


def fibonacci_sphere(n: int) -> np.ndarray:
    """(n, 3) near-uniform unit directions (golden-angle lattice)."""
    if n < 1:
        raise InvalidInputError(f"need n >= 1, got {n}")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.column_stack([s * np.cos(phi), s * np.sin(phi), z])


# ----------------------------------------------------------------- star-2d

def _star_radius(theta, harmonics, amplitudes, phases, deriv: int = 0):
    """r(theta) and its theta-derivatives for the harmonic star curve."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.ones_like(theta) if deriv == 0 else np.zeros_like(theta)
    for k, a, p in zip(harmonics, amplitudes, phases):
        arg = k * theta + p
        if deriv == 0:
            out = out + a * np.cos(arg)
        elif deriv == 1:
            out = out - a * k * np.sin(arg)
        elif deriv == 2:
            out = out - a * k * k * np.cos(arg)
        else:
            raise ValueError("deriv must be 0, 1 or 2")
    return out


def star_curve(theta, harmonics, amplitudes, phases):
    """Points (n, 3), outward unit normals (n, 3) and curvature (n,)."""
    r = _star_radius(theta, harmonics, amplitudes, phases, 0)
    r1 = _star_radius(theta, harmonics, amplitudes, phases, 1)
    r2 = _star_radius(theta, harmonics, amplitudes, phases, 2)
    if np.any(r <= 0):
        raise InvalidInputError("star radius must stay positive; shrink amplitudes")
    ct, st = np.cos(theta), np.sin(theta)
    pts = np.column_stack([r * ct, r * st, np.zeros_like(r)])
    # tangent (dx/dtheta, dy/dtheta); outward normal is its -90 deg rotation
    tx = r1 * ct - r * st
    ty = r1 * st + r * ct
    tn = np.hypot(tx, ty)
    normals = np.column_stack([ty / tn, -tx / tn, np.zeros_like(tn)])
    kappa = (r * r + 2.0 * r1 * r1 - r * r2) / (r * r + r1 * r1) ** 1.5
    return pts, normals, kappa


def star_curvature_fd(theta, harmonics, amplitudes, phases, h: float) -> np.ndarray:
    """Curvature by central differences of the curve map, step h.

    Independent of the closed form above: uses only r(theta) values.
    """
    def gamma(t):
        r = _star_radius(t, harmonics, amplitudes, phases, 0)
        return np.column_stack([r * np.cos(t), r * np.sin(t)])

    theta = np.asarray(theta, dtype=np.float64)
    g_p = gamma(theta + h)
    g_m = gamma(theta - h)
    g_0 = gamma(theta)
    d1 = (g_p - g_m) / (2.0 * h)
    d2 = (g_p - 2.0 * g_0 + g_m) / (h * h)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    speed = np.hypot(d1[:, 0], d1[:, 1])
    return cross / speed ** 3


def star_perimeter(harmonics, amplitudes, phases, n_quad: int = 4096) -> float:
    t = 2.0 * np.pi * np.arange(n_quad) / n_quad
    r = _star_radius(t, harmonics, amplitudes, phases, 0)
    r1 = _star_radius(t, harmonics, amplitudes, phases, 1)
    return float(np.sqrt(r * r + r1 * r1).sum() * 2.0 * np.pi / n_quad)


def star_curvature_oracle(theta, harmonics, amplitudes, phases,
                          h: float) -> np.ndarray:
    """Richardson-extrapolated FD curvature, truncation O(h^4).

    Extrapolating (4 k(h/2) - k(h)) / 3 lets h sit well above the
    second-difference roundoff floor while staying far below the
    target tolerance.
    """
    k_h = star_curvature_fd(theta, harmonics, amplitudes, phases, h)
    k_h2 = star_curvature_fd(theta, harmonics, amplitudes, phases, h / 2)
    return (4.0 * k_h2 - k_h) / 3.0


def star_instance(rng: np.random.Generator, n_points: int):
    """One random star curve: (cloud, targets, perimeter)."""
    harmonics = (2, 3, 4, 5)
    amplitudes = rng.uniform(0.02, 0.10, size=4)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=4)
    jitter = rng.uniform(0.0, 2.0 * np.pi / n_points)
    theta = 2.0 * np.pi * np.arange(n_points) / n_points + jitter

    pts, normals, kappa = star_curve(theta, harmonics, amplitudes, phases)

    args = (theta, harmonics, amplitudes, phases)
    ref_h = star_curvature_oracle(*args, _FD_STEP_STAR)
    ref_h2 = star_curvature_oracle(*args, _FD_STEP_STAR / 2)
    drift = float(np.max(np.abs(ref_h - ref_h2)))
    gap = float(np.max(np.abs(ref_h2 - kappa)))
    if drift > RICHARDSON_TOL or gap > RICHARDSON_TOL:
        raise RuntimeError(
            f"curvature oracle check failed: drift={drift:.3e} gap={gap:.3e}"
        )

    cloud = PointCloud(points=pts, normals=normals,
                       weights=uniform_weights(n_points))
    return cloud, kappa, star_perimeter(harmonics, amplitudes, phases)


# ---------------------------------------------------------- bumpy-sphere-3d

class _RadialField:
    """rho(v) = 1 + sum a_k (v . d_k)^{p_k} and its implicit surface."""

    def __init__(self, directions, amplitudes, powers):
        self.d = np.asarray(directions, dtype=np.float64)
        self.a = np.asarray(amplitudes, dtype=np.float64)
        self.p = np.asarray(powers, dtype=np.int64)

    def rho(self, v):
        t = v @ self.d.T
        return 1.0 + (self.a * t ** self.p).sum(axis=-1)

    def grad_rho(self, v):
        t = v @ self.d.T
        coef = self.a * self.p * t ** (self.p - 1)
        return coef @ self.d

    def normal(self, x):
        """Unit gradient of F(x) = |x| - rho(x/|x|), any x != 0."""
        x = np.asarray(x, dtype=np.float64)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        v = x / r
        g = self.grad_rho(v)
        g_tan = g - (g * v).sum(axis=-1, keepdims=True) * v
        grad = v - g_tan / r
        return grad / np.linalg.norm(grad, axis=-1, keepdims=True)

    def mean_curvature_fd(self, x, h: float) -> np.ndarray:
        """H = div(n)/2 by central differences of the normal field."""
        x = np.asarray(x, dtype=np.float64)
        div = np.zeros(x.shape[0])
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            div += (self.normal(x + e)[:, axis] - self.normal(x - e)[:, axis]) / (2 * h)
        return div / 2.0

    def surface_area(self, n_quad: int = _AREA_QUAD_N) -> float:
        """Quadrature of dA = rho * sqrt(rho^2 + |grad_S rho|^2) dOmega."""
        v = fibonacci_sphere(n_quad)
        rho = self.rho(v)
        g = self.grad_rho(v)
        g_tan = g - (g * v).sum(axis=1, keepdims=True) * v
        elt = rho * np.sqrt(rho ** 2 + (g_tan ** 2).sum(axis=1))
        return float(elt.mean() * 4.0 * np.pi)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def bumpy_sphere_instance(rng: np.random.Generator, n_points: int):
    """One random bumpy sphere: (cloud, targets, surface area)."""
    d = rng.normal(size=(3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    field = _RadialField(directions=d,
                         amplitudes=rng.uniform(0.03, 0.10, size=3),
                         powers=rng.integers(2, 4, size=3))

    v = fibonacci_sphere(n_points) @ _random_rotation(rng).T
    x = field.rho(v)[:, None] * v
    normals = field.normal(x)

    fd = {s: field.mean_curvature_fd(x, s)
          for s in (_FD_STEP_SPHERE, _FD_STEP_SPHERE / 2, _FD_STEP_SPHERE / 4)}
    h_h = (4.0 * fd[_FD_STEP_SPHERE / 2] - fd[_FD_STEP_SPHERE]) / 3.0
    h_h2 = (4.0 * fd[_FD_STEP_SPHERE / 4] - fd[_FD_STEP_SPHERE / 2]) / 3.0
    drift = float(np.max(np.abs(h_h - h_h2)))
    if drift > RICHARDSON_TOL:
        raise RuntimeError(f"mean-curvature oracle drift {drift:.3e} at step halving")

    u = h_h2 + normals @ INLET
    cloud = PointCloud(points=x, normals=normals,
                       weights=uniform_weights(n_points))
    return cloud, u, field.surface_area()


# ----------------------------------------------------------------- dataset

def synth_dataset(kind: str, count: int, seed: int, out_dir,
                  n_points: int = 1000,
                  test_count: int | None = None) -> DatasetManifest:
    """Generate a dataset under out_dir and return its manifest.

    The manifest is written to out_dir/manifest.json. The first
    count - test_count instances are tagged train, the rest test
    (test_count defaults to count // 5). Instance i depends only on
    (seed, i), so regenerating with the same arguments is bit-identical
    and appending instances never disturbs earlier ones.
    """
    from pathlib import Path

    if kind not in ("star-2d", "bumpy-sphere-3d"):
        raise InvalidInputError(f"unknown dataset kind {kind!r}")
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    if test_count is None:
        test_count = count // 5
    if not 0 <= test_count < count + 1:
        raise InvalidInputError("test_count must be in [0, count]")

    out_dir = Path(out_dir)
    inst_dir = out_dir / "instances"
    inst_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        if kind == "star-2d":
            cloud, u, area = star_instance(rng, n_points)
        else:
            cloud, u, area = bumpy_sphere_instance(rng, n_points)

        stem = f"{kind}_{i:04d}"
        geom_rel = f"instances/{stem}.csv"
        sol_rel = f"instances/{stem}_u.csv"
        write_point_cloud(inst_dir / f"{stem}.csv", cloud, format="csv")
        np.savetxt(inst_dir / f"{stem}_u.csv", u, fmt="%.17g")

        cd = drag_coefficient(u, cloud.normals, area, v=1.0, A=np.pi, inlet=INLET)
        entries.append(ManifestEntry(
            geometry=geom_rel, solution=sol_rel, cd=cd, total_area=area,
            split="train" if i < count - test_count else "test",
        ))

    man = DatasetManifest(root=out_dir, entries=entries, v_inlet=1.0,
                          area_frontal=float(np.pi), inlet=(1.0, 0.0, 0.0))
    man.save(out_dir / "manifest.json")
    return man
