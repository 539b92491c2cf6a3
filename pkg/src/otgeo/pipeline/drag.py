"""Drag-coefficient aggregation from per-point surface pressure.

Only the pressure contribution is integrated; shear is outside the
scope of a point-cloud pipeline (no velocity gradients available).
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError

INLET_UNIT_TOL = 1e-9


def _check_inlet(inlet: np.ndarray) -> np.ndarray:
    inlet = np.asarray(inlet, dtype=np.float64)
    if inlet.shape != (3,):
        raise InvalidInputError(f"inlet must have shape (3,), got {inlet.shape}")
    if abs(np.linalg.norm(inlet) - 1.0) > INLET_UNIT_TOL:
        raise InvalidInputError(
            f"inlet must be a unit vector (|inlet| = {np.linalg.norm(inlet):.6g})"
        )
    return inlet


def _point_measures(areas, n: int) -> np.ndarray:
    """Resolve the per-point surface measure s_i.

    areas may be a per-point array, a scalar total surface area
    (spread uniformly, s_i = areas / n), or None (unit total area).
    """
    if areas is None:
        return np.full(n, 1.0 / n)
    a = np.asarray(areas, dtype=np.float64)
    if a.ndim == 0:
        if a <= 0:
            raise InvalidInputError("total area must be > 0")
        return np.full(n, float(a) / n)
    if a.shape != (n,):
        raise InvalidInputError(f"areas must be scalar or shape ({n},), got {a.shape}")
    if np.any(a < 0):
        raise InvalidInputError("per-point areas must be >= 0")
    return a


def drag_coefficient(pressure, normals, areas, v: float, A: float, inlet) -> float:
    """Pressure drag coefficient of a sampled surface.

        Cd = 2 / (v^2 A) * sum_i p_i (n_i . inlet) s_i

    pressure: (n,) per-point pressure values.
    normals: (n, 3) unit surface normals.
    areas: per-point measures, scalar total area, or None (see
        _point_measures).
    v: inlet speed, > 0. A: frontal area, > 0. inlet: unit direction.
    """
    p = np.asarray(pressure, dtype=np.float64).reshape(-1)
    nrm = np.asarray(normals, dtype=np.float64)
    if nrm.shape != (p.size, 3):
        raise InvalidInputError(
            f"normals must have shape ({p.size}, 3), got {nrm.shape}"
        )
    inlet = _check_inlet(inlet)
    if not (v > 0 and A > 0):
        raise InvalidInputError("v and A must be > 0")
    s = _point_measures(areas, p.size)
    return float(2.0 / (v * v * A) * np.sum(p * (nrm @ inlet) * s))


def _one_residual(pred, normals, inlet, target_cd, areas, v, A, area_weighted):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    nrm = np.asarray(normals, dtype=np.float64)
    if area_weighted:
        if v is None or A is None:
            raise InvalidInputError("area-weighted cd_loss needs v and A")
        agg = drag_coefficient(p, nrm, areas, v, A, inlet)
    else:
        inlet_v = _check_inlet(inlet)
        agg = float(p @ (nrm @ inlet_v))
    return agg - float(target_cd)


def cd_loss(pred, normals, inlet, target_cd, *, areas=None, v=None, A=None,
            area_weighted: bool = False) -> float:
    """Squared drag-aggregation residual, summed over a batch.

    In the raw form the aggregation is the bare sum p . (N @ inlet);
    the surface measure and the 2/(v^2 A) normalization are left for
    the model to absorb. With area_weighted=True the aggregation is
    drag_coefficient itself, so the residual is in physical Cd units.

    Batched call: pred and normals as lists (inlet and target_cd may be
    lists too, or shared scalars).
    """
    if isinstance(pred, (list, tuple)):
        n = len(pred)

        def pick(x, i):
            return x[i] if isinstance(x, (list, tuple)) else x

        def pick_vec(x, i):
            a = np.asarray(x, dtype=np.float64)
            return a if a.ndim == 1 else a[i]

        return float(sum(
            _one_residual(pred[i], pick(normals, i), pick_vec(inlet, i),
                          pick(target_cd, i), pick(areas, i), v, A,
                          area_weighted) ** 2
            for i in range(n)
        ))
    return float(_one_residual(pred, normals, inlet, target_cd, areas, v, A,
                               area_weighted) ** 2)
