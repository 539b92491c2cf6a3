"""Physical point clouds: loading, voxel downsampling, normal estimation.

A cloud is a set of surface samples with optional unit normals and a
per-point probability mass vector. All heavy lifting is plain numpy; the
k-NN queries for normal estimation go through scipy's exact KD-tree.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, InvalidConfigError, InvalidInputError

_RAW_MAGIC = b"OTG1"
_RAW_HEADER = struct.Struct("<4sIII")  # magic, count, flags, reserved
_FLAG_NORMALS = 1


def uniform_weights(n: int) -> np.ndarray:
    """Probability vector of length ``n`` with every entry ``1/n``."""
    if n < 1:
        raise InvalidInputError(f"need at least one point, got n={n}")
    return np.full(n, 1.0 / n)


@dataclasses.dataclass
class PointCloud:
    """Surface samples with optional normals and per-point mass.

    Attributes
    ----------
    points : (n, 3) float array
        Sample coordinates, arbitrary units.
    normals : (n, 3) float array or None
        Unit normals aligned with ``points``. Entries flagged in
        ``normal_flags`` are zero vectors from degenerate neighborhoods.
    weights : (n,) float array
        Nonnegative, sums to 1. Defaults to uniform.
    tag : str
        Free-form instance identifier.
    normal_flags : (n,) bool array or None
        True where normal estimation hit a degenerate neighborhood.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    weights: np.ndarray | None = None
    tag: str = ""
    normal_flags: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvalidInputError(
                f"points must be (n, 3), got shape {self.points.shape}"
            )
        n = self.points.shape[0]
        if n < 1:
            raise InvalidInputError("empty point cloud")
        if not np.isfinite(self.points).all():
            raise InvalidInputError("points contain NaN or Inf")
        if self.weights is None:
            self.weights = uniform_weights(n)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (n,):
                raise InvalidInputError("weights length does not match points")
            if (self.weights < 0).any():
                raise InvalidInputError("weights must be nonnegative")
            if abs(self.weights.sum() - 1.0) > 1e-12:
                raise InvalidInputError("weights must sum to 1 within 1e-12")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise InvalidInputError("normals shape does not match points")
            norms = np.linalg.norm(self.normals, axis=1)
            ok = np.abs(norms - 1.0) <= 1e-9
            if self.normal_flags is not None:
                ok |= np.asarray(self.normal_flags, dtype=bool)
            if not ok.all():
                raise InvalidInputError("normals must be unit length within 1e-9")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclasses.dataclass
class VoxelConfig:
    """Voxel filter settings: cell side and reduction rule."""

    voxel_size: float
    reduce_rule: str = "centroid"  # or "first-point"

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise InvalidConfigError(f"voxel_size must be > 0, got {self.voxel_size}")
        if self.reduce_rule not in ("centroid", "first-point"):
            raise InvalidConfigError(f"unknown reduce_rule {self.reduce_rule!r}")


# ---------------------------------------------------------------------------
# readers / writers
# ---------------------------------------------------------------------------

def _parse_floats(fields, want, path, lineno):
    if len(fields) < want:
        raise FormatError(
            f"expected {want} numeric fields, got {len(fields)}", path=path, line=lineno
        )
    try:
        return [float(f) for f in fields[:want]]
    except ValueError as exc:
        raise FormatError(f"bad numeric field: {exc}", path=path, line=lineno) from None


def _load_obj(path):
    points = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0] != "v":
                continue  # faces, normals, comments: ignored
            points.append(_parse_floats(parts[1:], 3, path, lineno))
    return np.asarray(points, dtype=np.float64).reshape(-1, 3), None


def _load_ply_ascii(path):
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError("missing 'ply' magic", path=path, line=1)
    n_vertex = None
    props = []          # property names of the vertex element, in order
    in_vertex = False
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise FormatError("only ascii PLY is supported", path=path, line=lineno)
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
    if body_start is None:
        raise FormatError("truncated header: no end_header", path=path, line=len(lines))
    if n_vertex is None:
        raise FormatError("header declares no vertex element", path=path, line=body_start)
    for name in ("x", "y", "z"):
        if name not in props:
            raise FormatError(f"vertex element lacks property {name!r}", path=path,
                              line=body_start)
    cols = {name: props.index(name) for name in props}
    has_normals = all(k in props for k in ("nx", "ny", "nz"))
    rows = lines[body_start:body_start + n_vertex]
    if len(rows) < n_vertex:
        raise FormatError(
            f"expected {n_vertex} vertex rows, found {len(rows)}",
            path=path, line=len(lines),
        )
    points = np.empty((n_vertex, 3))
    normals = np.empty((n_vertex, 3)) if has_normals else None
    for i, row in enumerate(rows):
        fields = row.split()
        vals = _parse_floats(fields, len(props), path, body_start + 1 + i)
        points[i] = [vals[cols["x"]], vals[cols["y"]], vals[cols["z"]]]
        if has_normals:
            normals[i] = [vals[cols["nx"]], vals[cols["ny"]], vals[cols["nz"]]]
    return points, normals


def _load_csv(path):
    points, normals = [], []
    width = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = [f for f in line.replace(",", " ").split()]
            if lineno == 1:
                try:
                    float(fields[0])
                except ValueError:
                    continue  # header row
            if width is None:
                width = 6 if len(fields) >= 6 else 3
            vals = _parse_floats(fields, width, path, lineno)
            points.append(vals[:3])
            if width == 6:
                normals.append(vals[3:6])
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=np.float64) if normals else None
    return pts, nrm


def _load_raw(path):
    data = Path(path).read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise FormatError("file shorter than 16-byte header", path=path, offset=len(data))
    magic, count, flags, _ = _RAW_HEADER.unpack_from(data, 0)
    if magic != _RAW_MAGIC:
        raise FormatError(f"bad magic {magic!r}, want {_RAW_MAGIC!r}", path=path, offset=0)
    need = _RAW_HEADER.size + count * 24 * (2 if flags & _FLAG_NORMALS else 1)
    if len(data) < need:
        raise FormatError(
            f"payload truncated: need {need} bytes, have {len(data)}",
            path=path, offset=len(data),
        )
    body = np.frombuffer(data, dtype="<f8", count=(need - _RAW_HEADER.size) // 8,
                         offset=_RAW_HEADER.size)
    points = body[: count * 3].reshape(count, 3).astype(np.float64)
    normals = None
    if flags & _FLAG_NORMALS:
        normals = body[count * 3: count * 6].reshape(count, 3).astype(np.float64)
    return points, normals


_LOADERS = {
    "obj": _load_obj,
    "ply-ascii": _load_ply_ascii,
    "csv": _load_csv,
    "raw-f64": _load_raw,
}

_EXT_TO_FORMAT = {".obj": "obj", ".ply": "ply-ascii", ".csv": "csv", ".otg": "raw-f64"}


def load_point_cloud(path, format: str | None = None, tag: str | None = None) -> PointCloud:
    """Load a point cloud from disk.

    Parameters
    ----------
    path : str or Path
    format : one of {"obj", "ply-ascii", "csv", "raw-f64"} or None
        When None the format is inferred from the file extension.
    tag : str, optional
        Instance identifier; defaults to the file stem.

    Weights are always reset to uniform. Normals are kept only when the
    file carries them (CSV with 6 columns, PLY with nx/ny/nz, raw with the
    normals flag bit).
    """
    path = Path(path)
    if format is None:
        format = _EXT_TO_FORMAT.get(path.suffix.lower())
        if format is None:
            raise InvalidInputError(
                f"cannot infer format from extension {path.suffix!r}; pass format="
            )
    if format not in _LOADERS:
        raise InvalidInputError(f"unknown format {format!r}")
    points, normals = _LOADERS[format](path)
    if points.shape[0] == 0:
        raise InvalidInputError(f"no points found in {path}")
    return PointCloud(points=points, normals=normals,
                      tag=tag if tag is not None else path.stem)


def write_point_cloud(path, cloud: PointCloud, format: str = "raw-f64") -> None:
    """Write ``cloud`` as raw-f64 (with normals when present) or CSV."""
    path = Path(path)
    if format == "raw-f64":
        flags = _FLAG_NORMALS if cloud.normals is not None else 0
        with open(path, "wb") as fh:
            fh.write(_RAW_HEADER.pack(_RAW_MAGIC, cloud.n, flags, 0))
            fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
            if cloud.normals is not None:
                fh.write(np.ascontiguousarray(cloud.normals, dtype="<f8").tobytes())
    elif format == "csv":
        if cloud.normals is not None:
            arr = np.hstack([cloud.points, cloud.normals])
        else:
            arr = cloud.points
        np.savetxt(path, arr, delimiter=",", fmt="%.17g")
    else:
        raise InvalidInputError(f"unknown output format {format!r}")


# ---------------------------------------------------------------------------
# voxel downsampling
# ---------------------------------------------------------------------------

def voxel_slots(points: np.ndarray, voxel_size: float) -> tuple[np.ndarray, int]:
    """Voxel membership of each point.

    Returns ``(slot, k)``: ``slot[i]`` is the index of point ``i``'s
    voxel among the ``k`` occupied ones, numbered in first-appearance
    order. Shared by :func:`voxel_downsample` and by callers that must
    reduce per-point data (solution values, say) with the same mapping.
    """
    keys = np.floor(np.asarray(points) / voxel_size).astype(np.int64)
    _, first_idx, inverse = np.unique(
        keys, axis=0, return_index=True, return_inverse=True
    )
    inverse = inverse.ravel()
    k = first_idx.shape[0]
    # np.unique sorts lexicographically; re-rank voxels by first appearance
    appearance = np.argsort(first_idx, kind="stable")
    rank = np.empty(k, dtype=np.int64)
    rank[appearance] = np.arange(k)
    return rank[inverse], k


def voxel_downsample(cloud: PointCloud, cfg: VoxelConfig) -> PointCloud:
    """Collapse the cloud to one representative point per occupied voxel.

    Voxels are half-open cubes ``[k*r, (k+1)*r)`` anchored at the world
    origin. Anchoring at the origin (rather than at the cloud's bounding
    box) makes the operation exactly idempotent: every centroid stays
    inside its own cell, so a second pass with the same ``r`` is a no-op.

    Output order is the first-appearance order of voxels in the input,
    so the result is deterministic given input order. Weights are reset
    to uniform. Normals survive only under the ``first-point`` rule
    (centroids of unit vectors are not unit vectors).
    """
    slot, k = voxel_slots(cloud.points, cfg.voxel_size)

    normals = None
    flags = None
    if cfg.reduce_rule == "first-point":
        rep = np.full(k, cloud.n, dtype=np.int64)
        np.minimum.at(rep, slot, np.arange(cloud.n))
        points = cloud.points[rep]
        if cloud.normals is not None:
            normals = cloud.normals[rep]
            if cloud.normal_flags is not None:
                flags = cloud.normal_flags[rep]
    else:
        sums = np.zeros((k, 3))
        np.add.at(sums, slot, cloud.points)
        counts = np.bincount(slot, minlength=k).astype(np.float64)
        points = sums / counts[:, None]
    return PointCloud(points=points, normals=normals,
                      weights=uniform_weights(k), tag=cloud.tag,
                      normal_flags=flags)


# ---------------------------------------------------------------------------
# normal estimation
# ---------------------------------------------------------------------------

def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """Estimate unit normals from k-NN covariance.

    For each point the neighborhood is its ``k`` nearest neighbors
    (the point itself included). The normal is the eigenvector of the
    neighborhood covariance with the smallest eigenvalue, oriented to
    point away from the cloud centroid. When the centroid test is
    degenerate the sign is fixed by making the first nonzero component
    positive. Collinear (rank-deficient beyond a plane) neighborhoods
    get a zero normal and a True entry in ``normal_flags``.
    """
    n = cloud.n
    if k >= n:
        raise InvalidConfigError(f"need k < n, got k={k}, n={n}")
    if k < 3:
        raise InvalidConfigError(f"need k >= 3, got k={k}")

    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k)
    nbrs = cloud.points[idx]                      # (n, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigval, eigvec = np.linalg.eigh(cov)          # ascending eigenvalues
    normals = eigvec[:, :, 0].copy()

    # degenerate: the two smallest eigenvalues both vanish relative to the
    # largest, so the normal direction is not defined by the neighborhood
    scale = np.maximum(eigval[:, 2], 1e-300)
    flags = eigval[:, 1] <= 1e-12 * scale

    centroid = cloud.points.mean(axis=0)
    outward = cloud.points - centroid
    side = np.einsum("ni,ni->n", normals, outward)
    ambiguous = np.abs(side) <= 1e-12 * (np.linalg.norm(outward, axis=1) + 1e-300)
    normals[side < 0] *= -1.0
    for i in np.nonzero(ambiguous)[0]:
        v = normals[i]
        nz = np.nonzero(np.abs(v) > 1e-9)[0]
        if nz.size and v[nz[0]] < 0:
            normals[i] = -v
    normals[flags] = 0.0

    return PointCloud(points=cloud.points.copy(), normals=normals,
                      weights=cloud.weights.copy(), tag=cloud.tag,
                      normal_flags=flags)


def bounding_box(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(min corner, max corner) of an (n, 3) array."""
    pts = np.asarray(points)
    return pts.min(axis=0), pts.max(axis=0)


def rescale_to_unit_box(cloud: PointCloud) -> tuple[PointCloud, dict]:
    """Optionally map a cloud into [-1, 1]^3, preserving aspect ratio.

    Returns the rescaled cloud and a record ``{"center": ..., "scale": ...}``
    so the transform can be reported in run metadata and undone.
    """
    lo, hi = bounding_box(cloud.points)
    center = (lo + hi) / 2.0
    half = float(np.max(hi - lo)) / 2.0
    scale = 1.0 / half if half > 0 else 1.0
    pts = (cloud.points - center) * scale
    out = PointCloud(points=pts, normals=cloud.normals, weights=cloud.weights.copy(),
                     tag=cloud.tag, normal_flags=cloud.normal_flags)
    return out, {"center": center.tolist(), "scale": scale}
