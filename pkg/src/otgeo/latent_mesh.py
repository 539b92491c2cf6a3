"""Uniform parametric latent grids: torus, sphere, plane, hemisphere.

Grids are m-by-m in parameter space, stored row-major (index k = i*m + j),
with analytic unit normals and per-axis periodicity flags. The spectral
operator relies on the row-major layout to reshape flat latent vectors
back onto the grid.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .geometry import PointCloud, bounding_box, uniform_weights

SHAPES = ("torus", "sphere", "plane", "hemisphere")


@dataclasses.dataclass
class LatentGrid:
    """m-by-m parametric grid embedded in 3D.

    ``points`` and ``normals`` are (m*m, 3) arrays in row-major (i, j)
    order; ``periodic`` says whether axis 0 / axis 1 wrap around.
    ``params`` records shape parameters plus any rescale applied later
    (center/scale), so runs can report exactly what grid they used.
    """

    shape: str
    side: int
    params: dict
    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    periodic: tuple[bool, bool]

    @property
    def n(self) -> int:
        return self.side * self.side


def grid_size_for(n1: int, alpha: float) -> int:
    """Smallest side m with m^2 >= alpha * n1 (expansion-factor sizing)."""
    if n1 < 1:
        raise InvalidInputError(f"need n1 >= 1, got {n1}")
    if not alpha > 0:
        raise InvalidConfigError(f"need alpha > 0, got {alpha}")
    target = alpha * n1
    m = math.isqrt(math.ceil(target))
    if m * m < target:
        m += 1
    return max(m, 1)


def generate_grid(shape: str, m: int, params: dict | None = None) -> LatentGrid:
    """Build a canonical latent grid.

    torus: angles (theta_i, phi_j) uniform on [0, 2*pi) excluding the
    endpoint, major radius R, minor radius r, both axes periodic.
    sphere: equiangular azimuth x polar grid with poles excluded,
    azimuth (axis 0) periodic. plane: uniform grid on [0, extent]^2 at
    z=0, nothing periodic. hemisphere: sphere rows restricted to z >= 0
    plus a flat cap row closing the bottom disk.
    """
    if shape not in SHAPES:
        raise InvalidConfigError(f"unknown latent shape {shape!r}")
    if m < 2:
        raise InvalidConfigError(f"need side m >= 2, got {m}")
    params = dict(params or {})

    if shape == "torus":
        R = float(params.get("R", 2.0))
        r = float(params.get("r", 1.0))
        if not (R > r > 0):
            raise InvalidConfigError(f"torus needs R > r > 0, got R={R}, r={r}")
        theta = 2.0 * np.pi * np.arange(m) / m
        phi = 2.0 * np.pi * np.arange(m) / m
        T, P = np.meshgrid(theta, phi, indexing="ij")  # row-major: i over theta
        points = np.stack([
            (R + r * np.cos(P)) * np.cos(T),
            (R + r * np.cos(P)) * np.sin(T),
            r * np.sin(P),
        ], axis=-1).reshape(-1, 3)
        normals = np.stack([
            np.cos(P) * np.cos(T),
            np.cos(P) * np.sin(T),
            np.sin(P),
        ], axis=-1).reshape(-1, 3)
        periodic = (True, True)
        params = {"R": R, "r": r}

    elif shape == "sphere":
        radius = float(params.get("radius", 1.0))
        if not radius > 0:
            raise InvalidConfigError(f"sphere needs radius > 0, got {radius}")
        theta = 2.0 * np.pi * np.arange(m) / m                  # azimuth, periodic
        phi = np.pi * (np.arange(m) + 1.0) / (m + 1.0)          # polar, poles excluded
        T, P = np.meshgrid(theta, phi, indexing="ij")
        normals = np.stack([
            np.sin(P) * np.cos(T),
            np.sin(P) * np.sin(T),
            np.cos(P),
        ], axis=-1).reshape(-1, 3)
        points = radius * normals
        periodic = (True, False)
        params = {"radius": radius}

    elif shape == "plane":
        extent = float(params.get("extent", 1.0))
        if not extent > 0:
            raise InvalidConfigError(f"plane needs extent > 0, got {extent}")
        u = np.linspace(0.0, extent, m)
        U, V = np.meshgrid(u, u, indexing="ij")
        points = np.stack([U, V, np.zeros_like(U)], axis=-1).reshape(-1, 3)
        normals = np.tile(np.array([0.0, 0.0, 1.0]), (m * m, 1))
        periodic = (False, False)
        params = {"extent": extent}

    else:  # hemisphere
        radius = float(params.get("radius", 1.0))
        if not radius > 0:
            raise InvalidConfigError(f"hemisphere needs radius > 0, got {radius}")
        theta = 2.0 * np.pi * np.arange(m) / m
        # m-1 dome rings from near the pole down to the equator, then one
        # cap ring on the z=0 disk closing the open boundary
        dome_phi = (np.pi / 2.0) * (np.arange(m - 1) + 1.0) / (m - 1.0)
        pts = np.empty((m, m, 3))
        nrm = np.empty((m, m, 3))
        T, P = np.meshgrid(theta, dome_phi, indexing="ij")
        nrm[:, : m - 1, 0] = np.sin(P) * np.cos(T)
        nrm[:, : m - 1, 1] = np.sin(P) * np.sin(T)
        nrm[:, : m - 1, 2] = np.cos(P)
        pts[:, : m - 1] = radius * nrm[:, : m - 1]
        cap_r = radius / 2.0
        pts[:, m - 1, 0] = cap_r * np.cos(theta)
        pts[:, m - 1, 1] = cap_r * np.sin(theta)
        pts[:, m - 1, 2] = 0.0
        nrm[:, m - 1] = np.array([0.0, 0.0, -1.0])
        points = pts.reshape(-1, 3)
        normals = nrm.reshape(-1, 3)
        periodic = (True, False)
        params = {"radius": radius}

    return LatentGrid(shape=shape, side=m, params=params, points=points,
                      normals=normals, weights=uniform_weights(m * m),
                      periodic=periodic)


def match_bounding_box(grid: LatentGrid, cloud: PointCloud) -> LatentGrid:
    """Isotropically rescale and recenter a grid onto the cloud's bounding box.

    The squared-Euclidean transport cost is scale-sensitive, so the latent
    grid is placed over the physical cloud: one scale factor (ratio of
    bounding-box diagonals) and one translation (box centers). Isotropic
    scaling keeps analytic normals valid. The applied transform is recorded
    in ``params`` under "center" and "scale".
    """
    glo, ghi = bounding_box(grid.points)
    clo, chi = bounding_box(cloud.points)
    gdiag = float(np.linalg.norm(ghi - glo))
    cdiag = float(np.linalg.norm(chi - clo))
    if gdiag <= 0:
        raise InvalidInputError("degenerate latent grid bounding box")
    scale = cdiag / gdiag if cdiag > 0 else 1.0
    gcenter = (glo + ghi) / 2.0
    ccenter = (clo + chi) / 2.0
    points = (grid.points - gcenter) * scale + ccenter
    params = dict(grid.params)
    params["scale"] = scale
    params["center"] = ccenter.tolist()
    return LatentGrid(shape=grid.shape, side=grid.side, params=params,
                      points=points, normals=grid.normals.copy(),
                      weights=grid.weights.copy(), periodic=grid.periodic)
