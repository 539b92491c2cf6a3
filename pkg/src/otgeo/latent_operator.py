"""2D spectral operator on the latent grid, with hand-written backprop.

The model is lift -> L spectral layers -> project. Each spectral layer
takes a 2D FFT over the grid axes, multiplies a truncated set of modes
by complex weights, inverse-transforms, adds a pointwise affine skip,
and applies a GELU (the last layer stays linear). Everything is plain
float64 numpy; gradients are explicit adjoints of each step, which
keeps training bit-reproducible for a fixed seed and makes the
finite-difference contract easy to honor.

Complex spectral weights are stored as separate real/imaginary blocks
so optimizer state, checkpoints, and finite differences all see flat
float64 arrays.

Adjoint conventions used below (cotangents stored as gRe + i*gIm):
  y = Re(ifft2(Y))  =>  gY = fft2(gy) / N
  X = fft2(x), x real  =>  gx = Re(N * ifft2(gX))
  Y = X * W (complex)  =>  gX = gY * conj(W),  gW = gY * conj(X)
with N = m*m the grid size (numpy's unnormalized-forward convention).
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .coupling import LatentFeatures
from .errors import FormatError, InvalidConfigError, InvalidInputError, NumericError

_CKPT_MAGIC = b"OTNO"
_CKPT_VERSION = 1

_ACTIVATIONS = ("gelu", "identity")


def _gelu(x):
    return x * ndtr(x)


def _gelu_prime(x):
    return ndtr(x) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


class SpectralOperator:
    """Parameter container plus architecture description.

    Parameters live in ``params``, an ordered name -> float64 array
    dict. Spectral weights for layer l are ``layer{l}.spec.re`` and
    ``.im`` with shape (2*m1, 2*m2, w, w): the kept rows are the m1
    lowest positive and m1 highest (negative) frequencies, same for
    columns, so modes=(m/2, m/2) covers the full spectrum of an m-grid.
    """

    def __init__(self, in_channels: int, out_channels: int = 1, width: int = 32,
                 layers: int = 4, modes: tuple[int, int] = (16, 16),
                 activation: str = "gelu", seed: int = 0):
        if width < 1 or layers < 1 or in_channels < 1 or out_channels < 1:
            raise InvalidConfigError("width, layers and channel counts must be >= 1")
        m1, m2 = int(modes[0]), int(modes[1])
        if m1 < 1 or m2 < 1:
            raise InvalidConfigError(f"modes must be >= 1, got {modes}")
        if activation not in _ACTIVATIONS:
            raise InvalidConfigError(f"unknown activation {activation!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.width = width
        self.layers = layers
        self.modes = (m1, m2)
        self.activation = activation
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        w = width

        def affine(name, fan_in, fan_out):
            s = 1.0 / np.sqrt(fan_in)
            self.params[f"{name}.w"] = rng.uniform(-s, s, size=(fan_in, fan_out))
            self.params[f"{name}.b"] = rng.uniform(-s, s, size=(fan_out,))

        affine("lift", in_channels, w)
        spec_scale = 1.0 / (w * w)
        for l in range(layers):
            shape = (2 * m1, 2 * m2, w, w)
            self.params[f"layer{l}.spec.re"] = rng.uniform(-spec_scale, spec_scale, shape)
            self.params[f"layer{l}.spec.im"] = rng.uniform(-spec_scale, spec_scale, shape)
            affine(f"layer{l}.skip", w, w)
        affine("proj", w, out_channels)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_like_params(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _mode_index(self, m: int):
        m1, m2 = self.modes
        if 2 * m1 > m or 2 * m2 > m:
            raise InvalidInputError(
                f"grid side {m} too small for modes {self.modes}; need m >= 2*modes"
            )
        rows = np.r_[0:m1, m - m1:m]
        cols = np.r_[0:m2, m - m2:m]
        return rows, cols


def _check_input(op: SpectralOperator, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != x.shape[2]:
        raise InvalidInputError(f"expected (batch, m, m, C) input, got {x.shape}")
    if x.shape[3] != op.in_channels:
        raise InvalidInputError(
            f"channel mismatch: operator lifts {op.in_channels}, input has {x.shape[3]}"
        )
    return x


def _forward_core(op: SpectralOperator, x: np.ndarray, keep: bool):
    """Shared forward pass; with keep=True returns the caches backward needs."""
    p = op.params
    m = x.shape[1]
    rows, cols = op._mode_index(m)
    n_grid = m * m
    cache = {"x": x, "h_in": [], "Xk": [], "lin": []} if keep else None

    h = x @ p["lift.w"] + p["lift.b"]
    for l in range(op.layers):
        if keep:
            cache["h_in"].append(h)
        Xf = np.fft.fft2(h, axes=(1, 2))
        Xk = Xf[:, rows][:, :, cols]
        W = p[f"layer{l}.spec.re"] + 1j * p[f"layer{l}.spec.im"]
        Yk = np.einsum("brci,rcio->brco", Xk, W)
        Yf = np.zeros_like(Xf)
        Yf[:, rows[:, None], cols[None, :], :] = Yk
        conv = np.fft.ifft2(Yf, axes=(1, 2)).real
        lin = conv + h @ p[f"layer{l}.skip.w"] + p[f"layer{l}.skip.b"]
        if keep:
            cache["Xk"].append(Xk)
            cache["lin"].append(lin)
        if l < op.layers - 1 and op.activation == "gelu":
            h = _gelu(lin)
        else:
            h = lin
    if keep:
        cache["h_last"] = h
        cache["rows"], cache["cols"], cache["n_grid"] = rows, cols, n_grid
    out = h @ p["proj.w"] + p["proj.b"]
    return out, cache


def forward(op: SpectralOperator, features) -> np.ndarray:
    """Apply the operator to one latent feature tensor, (m, m, C) -> (m, m, s).

    Outputs are exactly real: the inverse transform's real part is taken,
    which equals symmetrizing the spectrum of the (real) input path.
    """
    if isinstance(features, LatentFeatures):
        features = features.tensor
    x = _check_input(op, features)
    out, _ = _forward_core(op, x, keep=False)
    return out[0]


def forward_batch(op: SpectralOperator, x: np.ndarray) -> np.ndarray:
    """Batched forward, (B, m, m, C) -> (B, m, m, s)."""
    x = _check_input(op, x)
    out, _ = _forward_core(op, x, keep=False)
    return out


def forward_backward(op: SpectralOperator, x: np.ndarray, d_out: np.ndarray):
    """Forward pass plus backprop of an arbitrary output cotangent.

    Returns (output, grads). This is the reverse-mode core; losses sit
    on top by supplying d_out = dLoss/d_output.
    """
    x = _check_input(op, x)
    out, cache = _forward_core(op, x, keep=True)
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != out.shape:
        raise InvalidInputError(f"cotangent shape {d_out.shape} != output {out.shape}")
    return out, _backward_core(op, cache, d_out)


def _backward_core(op: SpectralOperator, cache: dict, d_out: np.ndarray):
    p = op.params
    rows, cols, n_grid = cache["rows"], cache["cols"], cache["n_grid"]
    grads = {}
    grads["proj.w"] = np.einsum("bxyw,bxys->ws", cache["h_last"], d_out)
    grads["proj.b"] = d_out.sum(axis=(0, 1, 2))
    dh = np.einsum("bxys,ws->bxyw", d_out, p["proj.w"])

    for l in reversed(range(op.layers)):
        lin = cache["lin"][l]
        h_in = cache["h_in"][l]
        Xk = cache["Xk"][l]
        if l < op.layers - 1 and op.activation == "gelu":
            dlin = dh * _gelu_prime(lin)
        else:
            dlin = dh
        grads[f"layer{l}.skip.w"] = np.einsum("bxyi,bxyo->io", h_in, dlin)
        grads[f"layer{l}.skip.b"] = dlin.sum(axis=(0, 1, 2))
        dh_skip = np.einsum("bxyo,io->bxyi", dlin, p[f"layer{l}.skip.w"])

        dYf = np.fft.fft2(dlin, axes=(1, 2)) / n_grid
        dYk = dYf[:, rows][:, :, cols]
        W = p[f"layer{l}.spec.re"] + 1j * p[f"layer{l}.spec.im"]
        gW = np.einsum("brci,brco->rcio", np.conj(Xk), dYk)
        grads[f"layer{l}.spec.re"] = gW.real
        grads[f"layer{l}.spec.im"] = gW.imag
        dXk = np.einsum("brco,rcio->brci", dYk, np.conj(W))
        dXf = np.zeros_like(dYf)
        dXf[:, rows[:, None], cols[None, :], :] = dXk
        dh = np.fft.ifft2(dXf, axes=(1, 2)).real * n_grid + dh_skip

    grads["lift.w"] = np.einsum("bxyc,bxyw->cw", cache["x"], dh)
    grads["lift.b"] = dh.sum(axis=(0, 1, 2))
    return grads


# ---------------------------------------------------------------------------
# losses / metrics
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class TrainSample:
    """One training instance: latent features plus a target.

    ``target`` is physical-space (n1, s) with ``decoder`` giving the
    latent index per physical point, or latent-space (m, m, s) with
    decoder None. The cd-loss extras (normals, inlet, cd) are optional.
    """

    features: np.ndarray
    target: np.ndarray
    decoder: np.ndarray | None = None
    tag: str = ""
    normals: np.ndarray | None = None
    inlet: np.ndarray | None = None
    cd: float | None = None
    point_area: float | None = None
    v_inlet: float | None = None
    area_frontal: float | None = None

    @property
    def side(self) -> int:
        return self.features.shape[0]


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    optimizer: str = "adam"
    loss: str = "relative-l2"
    area_weighted_cd: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise InvalidConfigError("lr and weight_decay must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("relative-l2", "mse", "cd-loss"):
            raise InvalidConfigError(f"unknown loss {self.loss!r}")


def metrics(pred, target, kind: str = "relative-l2") -> float:
    """relative-l2: per-sample ||p-t||/||t||, averaged. mse: plain mean.

    Accepts a single (pred, target) array pair or two equal-length lists
    of array pairs (one entry per sample).
    """
    if isinstance(pred, (list, tuple)):
        vals = [metrics(p, t, kind) for p, t in zip(pred, target, strict=True)]
        return float(np.mean(vals))
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {target.shape}")
    if kind == "relative-l2":
        denom = np.linalg.norm(target)
        if denom == 0.0:
            raise NumericError("relative-l2 undefined for zero-norm target")
        return float(np.linalg.norm(pred - target) / denom)
    if kind == "mse":
        return float(np.mean((pred - target) ** 2))
    raise InvalidInputError(f"unknown metric {kind!r}")


def _decode_pred(v_i: np.ndarray, sample: TrainSample):
    if sample.decoder is None:
        return v_i
    flat = v_i.reshape(-1, v_i.shape[2])
    if sample.decoder.ndim == 1:
        return flat[sample.decoder]
    return flat[sample.decoder].mean(axis=1)


def _scatter_cotangent(dpred: np.ndarray, sample: TrainSample, m: int, s: int):
    """Adjoint of _decode_pred for physical-space targets."""
    flat = np.zeros((m * m, s))
    D = sample.decoder
    if D.ndim == 1:
        np.add.at(flat, D, dpred)
    else:
        k = D.shape[1]
        np.add.at(flat, D.ravel(), np.repeat(dpred / k, k, axis=0))
    return flat.reshape(m, m, s)


def _loss_and_cotangent(pred, sample: TrainSample, loss: str, batch_size: int,
                        area_weighted: bool):
    """Per-sample loss contribution and dLoss/dpred (batch-normalized)."""
    t = np.asarray(sample.target, dtype=np.float64)
    if loss == "relative-l2":
        diff = pred - t
        denom = np.linalg.norm(t)
        if denom == 0.0:
            raise NumericError(f"zero-norm target in sample {sample.tag!r}")
        num = np.linalg.norm(diff)
        if num == 0.0:
            return 0.0, np.zeros_like(pred)
        return num / denom / batch_size, diff / (num * denom * batch_size)
    if loss == "mse":
        diff = pred - t
        return (np.mean(diff ** 2) / batch_size,
                2.0 * diff / (diff.size * batch_size))
    # cd-loss
    if sample.normals is None or sample.inlet is None or sample.cd is None:
        raise InvalidInputError(
            f"cd-loss needs normals, inlet and cd on sample {sample.tag!r}"
        )
    w = sample.normals @ sample.inlet
    if area_weighted:
        if None in (sample.point_area, sample.v_inlet, sample.area_frontal):
            raise InvalidInputError(
                "area-weighted cd-loss needs point_area, v_inlet, area_frontal"
            )
        w = w * sample.point_area * 2.0 / (
            sample.v_inlet ** 2 * sample.area_frontal
        )
    resid = float(pred[:, 0] @ w - sample.cd)
    grad = np.zeros_like(pred)
    grad[:, 0] = 2.0 * resid * w
    return resid ** 2, grad


def gradient(op: SpectralOperator, batch: list[TrainSample], loss: str = "relative-l2",
             area_weighted_cd: bool = False):
    """Loss and exact parameter gradients for one batch (uniform grid side).

    relative-l2 and mse average per-sample losses over the batch;
    cd-loss sums squared residuals, matching its published form.
    """
    if not batch:
        raise InvalidInputError("empty batch")
    sides = {s.side for s in batch}
    if len(sides) != 1:
        raise InvalidInputError(f"batch mixes grid sides {sorted(sides)}")
    x = np.stack([s.features for s in batch])
    # forward once, assemble the output cotangent per sample, backprop once
    out, cache = _forward_core(op, _check_input(op, x), keep=True)
    b_norm = len(batch) if loss in ("relative-l2", "mse") else 1
    d_out = np.zeros_like(out)
    total = 0.0
    for i, sample in enumerate(batch):
        pred = _decode_pred(out[i], sample)
        li, dpred = _loss_and_cotangent(pred, sample, loss, b_norm, area_weighted_cd)
        if not np.isfinite(li):
            raise NumericError(f"non-finite loss on sample {sample.tag!r}")
        total += li
        if sample.decoder is None:
            d_out[i] = dpred
        else:
            d_out[i] = _scatter_cotangent(dpred, sample, out.shape[1], out.shape[3])
    grads = _backward_core(op, cache, d_out)
    return float(total), grads


# ---------------------------------------------------------------------------
# optimizers / training loop
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, params, lr, weight_decay, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k, p in params.items():
            g = grads[k]
            if self.wd:
                g = g + self.wd * p
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _SGD:
    def __init__(self, params, lr, weight_decay):
        self.lr, self.wd = lr, weight_decay

    def step(self, params, grads):
        for k, p in params.items():
            g = grads[k]
            if self.wd:
                g = g + self.wd * p
            p -= self.lr * g


def _batches(samples, order, batch_size):
    """Deterministic batches grouped by grid side, in shuffled order."""
    buckets: dict[int, list[int]] = {}
    for i in order:
        side = samples[i].side
        buckets.setdefault(side, []).append(i)
        if len(buckets[side]) == batch_size:
            yield buckets.pop(side)
    for side in sorted(buckets):
        yield buckets[side]


def evaluate(op: SpectralOperator, samples: list[TrainSample]) -> dict:
    """Per-sample relative-l2 and mse after decoding, averaged."""
    rel, mse = [], []
    for s in samples:
        v = forward(op, s.features)
        pred = _decode_pred(v, s)
        rel.append(metrics(pred, s.target, "relative-l2"))
        mse.append(metrics(pred, s.target, "mse"))
    return {"relative_l2": float(np.mean(rel)), "mse": float(np.mean(mse))}


def train(op: SpectralOperator, train_set: list[TrainSample], cfg: TrainConfig,
          val_set: list[TrainSample] | None = None) -> list[dict]:
    """Train in place; returns one report row per epoch.

    Deterministic for a fixed seed: the shuffle comes from one seeded
    generator and every reduction has a fixed order. Aborts when the
    epoch loss exceeds 1e6 times the first epoch's.
    """
    if not train_set:
        raise InvalidInputError("empty training set")
    opt = (_Adam(op.params, cfg.lr, cfg.weight_decay) if cfg.optimizer == "adam"
           else _SGD(op.params, cfg.lr, cfg.weight_decay))
    rng = np.random.default_rng(cfg.seed)
    rows = []
    first_loss = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        total, nb = 0.0, 0
        for idx in _batches(train_set, order, cfg.batch_size):
            batch = [train_set[i] for i in idx]
            loss, grads = gradient(op, batch, cfg.loss, cfg.area_weighted_cd)
            opt.step(op.params, grads)
            total += loss * len(batch)
            nb += len(batch)
        epoch_loss = total / nb
        if first_loss is None:
            first_loss = max(epoch_loss, 1e-300)
        if epoch_loss > 1e6 * first_loss:
            raise NumericError(
                f"training diverged at epoch {epoch}: loss {epoch_loss:.3e} vs "
                f"initial {first_loss:.3e}; lower the learning rate"
            )
        row = {"epoch": epoch, "train_loss": float(epoch_loss)}
        if val_set:
            row.update({f"val_{k}": v for k, v in evaluate(op, val_set).items()})
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_ACT_IDS = {name: i for i, name in enumerate(_ACTIVATIONS)}


def save_checkpoint(op: SpectralOperator, path) -> None:
    """Single-file binary: magic OTNO, version, named f64 blocks."""
    blocks = dict(op.params)
    blocks["__meta__"] = np.array([
        op.in_channels, op.out_channels, op.width, op.layers,
        op.modes[0], op.modes[1], _ACT_IDS[op.activation], op.seed,
    ], dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blocks)))
        for name, arr in blocks.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> SpectralOperator:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError("file shorter than 12-byte header", path=path,
                          offset=len(data))
    if data[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, want {_CKPT_MAGIC!r}",
                          path=path, offset=0)
    version, nblocks = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", path=path, offset=4)
    off = 12
    blocks = {}
    for _ in range(nblocks):
        try:
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
            off += 8 * count
            blocks[name] = arr.reshape(shape).astype(np.float64)
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated block: {exc}", path=path, offset=off) from None
    if "__meta__" not in blocks:
        raise FormatError("missing __meta__ block", path=path, offset=off)
    meta = blocks.pop("__meta__")
    in_ch, out_ch, width, layers, m1, m2, act_id, seed = (int(x) for x in meta)
    op = SpectralOperator(in_channels=in_ch, out_channels=out_ch, width=width,
                          layers=layers, modes=(m1, m2),
                          activation=_ACTIVATIONS[act_id], seed=seed)
    for name in op.params:
        if name not in blocks:
            raise FormatError(f"missing parameter block {name!r}", path=path)
        if blocks[name].shape != op.params[name].shape:
            raise FormatError(
                f"block {name!r} has shape {blocks[name].shape}, "
                f"want {op.params[name].shape}", path=path,
            )
        op.params[name] = blocks[name]
    return op
