"""Encoder/decoder index maps and latent feature assembly.

The transported mesh anchors two nearest-neighbor maps: E sends each
latent point to its closest physical point, D sends each physical point
to its closest latent point. Both are built with scipy's exact KD-tree;
distance ties resolve to the lowest index so the wiring is bit-stable
across platforms.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, InvalidInputError

_IDX_MAGIC = b"OTIX"
_IDX_HEADER = struct.Struct("<4sI")

FEATURE_MODES = {
    # channel layout per mode; "cross" is the default 9-channel layout
    "none": 6,      # [grid points, transported-source physical points]
    "car": 9,       # ... + physical normals
    "concat": 12,   # ... + grid normals + physical normals
    "cross": 9,     # ... + cross(grid normals, physical normals)
}


def _resolve_ties_row(tree, data, q, r, k):
    """The k nearest data points to q, ordered by (distance, index).

    The ball radius is the k-th query distance inflated by a few ulps:
    query_ball_point compares squared distances, and re-squaring the
    reported radius can round just below a boundary point's squared
    distance (duplicated data points sit exactly on the boundary).
    Extra candidates swept in by the inflation are harmless, the sort
    keeps only the k best.
    """
    eps = np.finfo(np.float64).eps
    rr = r * (1.0 + 8.0 * eps) + 8.0 * np.finfo(np.float64).tiny
    cand = tree.query_ball_point(q, rr)
    while len(cand) < k:
        rr = max(rr * 2.0, 1e-300)
        cand = tree.query_ball_point(q, rr)
    cand = np.asarray(sorted(cand), dtype=np.int64)
    d = np.linalg.norm(data[cand] - q, axis=1)
    order = np.lexsort((cand, d))
    return cand[order][:k]


def exact_nn(query, data, k: int = 1) -> np.ndarray:
    """Exact k nearest neighbors, ties broken by lowest index.

    Returns shape (nq,) for k=1, else (nq, k), nearest first. The
    KD-tree is exact; the only ambiguity is equal distances, which are
    re-resolved explicitly with a ball query.
    """
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] < k:
        raise InvalidInputError(f"need at least k={k} data points, got {data.shape[0]}")
    tree = cKDTree(data)
    kk = min(k + 1, data.shape[0])
    d, idx = tree.query(query, k=kk)
    d = d.reshape(query.shape[0], kk)
    idx = idx.reshape(query.shape[0], kk)

    if kk > k:
        # a tie with the (k+1)-th neighbor means the cutoff is ambiguous
        boundary = d[:, k - 1] == d[:, k]
    else:
        boundary = np.zeros(query.shape[0], dtype=bool)
    # equal distances inside the first k: reorder by (distance, index)
    inner = (np.diff(d[:, :k], axis=1) == 0).any(axis=1) if k > 1 else \
        np.zeros(query.shape[0], dtype=bool)

    out = idx[:, :k].astype(np.int64)
    for row in np.nonzero(boundary | inner)[0]:
        out[row] = _resolve_ties_row(tree, data, query[row], d[row, k - 1], k)
    if k == 1:
        return out[:, 0]
    return out


@dataclasses.dataclass
class IndexMap:
    """Encoder/decoder index sequences.

    encoder: (n2,) or (n2, k_enc) indices into the physical cloud.
    decoder: (n1,) or (n1, k_dec) indices into the latent grid.
    """

    encoder: np.ndarray
    decoder: np.ndarray
    k_enc: int = 1
    k_dec: int = 1

    def __post_init__(self):
        self.encoder = np.asarray(self.encoder, dtype=np.int64)
        self.decoder = np.asarray(self.decoder, dtype=np.int64)
        if self.encoder.ndim not in (1, 2) or self.decoder.ndim not in (1, 2):
            raise InvalidInputError("index sequences must be 1D or 2D")


def encoder_indices(transported, cloud, k: int = 1) -> np.ndarray:
    """E: nearest physical point (or k-NN list) per transported latent point."""
    pts = getattr(cloud, "points", cloud)
    tr = getattr(transported, "points", transported)
    return exact_nn(tr, pts, k=k)


def decoder_indices(transported, cloud, k: int = 1) -> np.ndarray:
    """D: nearest transported latent point (or k-NN list) per physical point."""
    pts = getattr(cloud, "points", cloud)
    tr = getattr(transported, "points", transported)
    return exact_nn(pts, tr, k=k)


@dataclasses.dataclass
class LatentFeatures:
    """m x m x C feature tensor plus the grid / index map it came from."""

    tensor: np.ndarray
    grid: object = None
    index_map: IndexMap | None = None
    mode: str = "cross"

    @property
    def side(self) -> int:
        return self.tensor.shape[0]

    @property
    def channels(self) -> int:
        return self.tensor.shape[2]


def _gather(values: np.ndarray, E: np.ndarray) -> np.ndarray:
    """values[E], averaged over the neighbor axis when E is 2D."""
    if E.ndim == 1:
        return values[E]
    return values[E].mean(axis=1)


def assemble_features(grid, cloud, E, mode: str = "cross") -> LatentFeatures:
    """Build the latent input tensor for the spectral operator.

    Channels are [grid points (3), encoded physical points (3)] plus,
    depending on mode: nothing ("none"), the encoded physical normals
    ("car"), both normal fields ("concat"), or their cross product
    ("cross", default). Cross products are left unnormalized: their
    magnitude carries the angle between the two surfaces.
    """
    if mode not in FEATURE_MODES:
        raise InvalidInputError(f"unknown feature mode {mode!r}")
    E = np.asarray(E, dtype=np.int64)
    m = grid.side
    gp = grid.points
    cp = cloud.points
    cols = [gp, _gather(cp, E)]
    if mode != "none":
        if cloud.normals is None:
            raise InvalidInputError(
                "feature mode {!r} needs cloud normals; run estimate_normals "
                "first".format(mode)
            )
        enc_n = _gather(cloud.normals, E)
        if mode == "car":
            cols.append(enc_n)
        elif mode == "concat":
            cols.append(grid.normals)
            cols.append(enc_n)
        else:
            cols.append(np.cross(grid.normals, enc_n))
    flat = np.concatenate(cols, axis=1)
    tensor = flat.reshape(m, m, flat.shape[1])
    return LatentFeatures(tensor=tensor, grid=grid, index_map=None, mode=mode)


def decode_solution(v: np.ndarray, D: np.ndarray, mode: str = "single") -> np.ndarray:
    """Pull latent values back to the physical mesh through D.

    single: plain selection u'_k = v_flat[D_k]. multi-mean: unweighted
    average over each point's k_dec nearest latent points.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 3:
        raise InvalidInputError(f"latent values must be (m, m, s), got {v.shape}")
    D = np.asarray(D, dtype=np.int64)
    flat = v.reshape(-1, v.shape[2])
    if D.size and (D.min() < 0 or D.max() >= flat.shape[0]):
        raise InvalidInputError("decoder indices out of range for this grid")
    if mode == "single":
        if D.ndim != 1:
            raise InvalidInputError("mode 'single' expects 1D indices")
        return flat[D]
    if mode == "multi-mean":
        if D.ndim != 2:
            raise InvalidInputError("mode 'multi-mean' expects (n1, k) indices")
        return flat[D].mean(axis=1)
    raise InvalidInputError(f"unknown decode mode {mode!r}")


def encode_function(a: np.ndarray, E: np.ndarray,
                    mode: str = "single") -> np.ndarray:
    """Push physical values onto the latent grid through E (dual of decode).

    The grid side is recovered from the index count (E has one row per
    latent point and latent counts are perfect squares).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise InvalidInputError(f"physical values must be (n1, s), got {a.shape}")
    E = np.asarray(E, dtype=np.int64)
    if E.size and (E.min() < 0 or E.max() >= a.shape[0]):
        raise InvalidInputError("encoder indices out of range for this cloud")
    side = math.isqrt(E.shape[0])
    if side * side != E.shape[0]:
        raise InvalidInputError(
            f"index count {E.shape[0]} is not a perfect square"
        )
    if mode == "single":
        if E.ndim != 1:
            raise InvalidInputError("mode 'single' expects 1D indices")
        vals = a[E]
    elif mode == "multi-mean":
        if E.ndim != 2:
            raise InvalidInputError("mode 'multi-mean' expects (n2, k) indices")
        vals = a[E].mean(axis=1)
    else:
        raise InvalidInputError(f"unknown encode mode {mode!r}")
    return vals.reshape(side, side, a.shape[1])


# ---------------------------------------------------------------------------
# serialization: raw-u32 with an 8-byte header
# ---------------------------------------------------------------------------

def write_indices(path, indices: np.ndarray) -> None:
    """Write an index sequence as magic OTIX, u32 length, u32 entries."""
    arr = np.asarray(indices, dtype=np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
        raise InvalidInputError("indices out of u32 range")
    with open(path, "wb") as fh:
        fh.write(_IDX_HEADER.pack(_IDX_MAGIC, arr.size))
        fh.write(arr.astype("<u4").tobytes())


def read_indices(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _IDX_HEADER.size:
        raise FormatError("file shorter than 8-byte header", path=path,
                          offset=len(data))
    magic, length = _IDX_HEADER.unpack_from(data, 0)
    if magic != _IDX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, want {_IDX_MAGIC!r}", path=path,
                          offset=0)
    need = _IDX_HEADER.size + 4 * length
    if len(data) < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {len(data)}",
                          path=path, offset=len(data))
    return np.frombuffer(data, dtype="<u4", count=length,
                         offset=_IDX_HEADER.size).astype(np.int64)
