"""Pipeline configuration: strict schema, canonical hashing.

The config file is JSON with the nested sections below. Unknown keys
anywhere are rejected with the offending path, so typos fail loudly
instead of silently running defaults.

Schema (defaults in parentheses):

  seed: int (0)
  latent:
    shape: torus | sphere | plane | hemisphere ("torus")
    alpha: float > 0 (3.0)            expansion factor; forced to 1 for map
    params: dict (shape radii / extent; {})
  voxel:
    size: float > 0 or null (null = no downsampling)
    rule: centroid | first-point ("centroid")
  ot:
    method: plan | map ("plan")
    beta: float > 0 (100, scaled by median cost)
    beta_scale: absolute | median ("median")
    max_iters: int (5000)
    marginal_tol: float (1e-7)
    log_domain: bool (true)
    accel: "auto" | bool ("auto")
    strategy: matrix | max | mean ("mean")
    k_enc: int >= 1 (1)               encoder neighbors (Multi-Enc when > 1)
    k_dec: int >= 1 (1)               decoder neighbors (Multi-Dec when > 1)
    ppmm_rule: cov-eig | random | sliced-max ("cov-eig")
    ppmm_iters: int or null (null = c*sqrt(n))
    ppmm_tol: float or null (null = 1e-6 * bbox diagonal)
  features:
    normal_mode: none | car | concat | cross ("cross")
    estimate_k: int >= 3 (8)          k-NN size when normals must be estimated
  operator:
    width: int (32)
    layers: int (4)
    modes: [int, int] ([16, 16])      capped at grid side / 2 at build time
    activation: gelu | identity ("gelu")
  train:
    epochs: int (100)
    batch_size: int (16)
    lr: float (1e-3)
    weight_decay: float (0.0)
    optimizer: adam | sgd ("adam")
    loss: relative-l2 | mse | cd-loss ("relative-l2")
    latent_target: bool (false)       train against encoded latent targets
    area_weighted_cd: bool (false)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from ..coupling import FEATURE_MODES
from ..errors import InvalidConfigError
from ..latent_mesh import SHAPES


def _take(d: dict, section: str, known: dict):
    unknown = set(d) - set(known)
    if unknown:
        raise InvalidConfigError(
            f"unknown config key(s) {sorted(unknown)} in section {section!r}; "
            f"known keys: {sorted(known)}"
        )
    out = dict(known)
    out.update(d)
    return out


def _require(cond: bool, msg: str):
    if not cond:
        raise InvalidConfigError(msg)


@dataclasses.dataclass
class LatentSection:
    shape: str = "torus"
    alpha: float = 3.0
    params: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "LatentSection":
        v = _take(d, "latent", {"shape": "torus", "alpha": 3.0, "params": {}})
        _require(v["shape"] in SHAPES, f"latent.shape must be one of {SHAPES}")
        _require(float(v["alpha"]) > 0, "latent.alpha must be > 0")
        _require(isinstance(v["params"], dict), "latent.params must be a mapping")
        return cls(shape=v["shape"], alpha=float(v["alpha"]), params=dict(v["params"]))


@dataclasses.dataclass
class VoxelSection:
    size: float | None = None
    rule: str = "centroid"

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelSection":
        v = _take(d, "voxel", {"size": None, "rule": "centroid"})
        if v["size"] is not None:
            _require(float(v["size"]) > 0, "voxel.size must be > 0 or null")
        _require(v["rule"] in ("centroid", "first-point"),
                 "voxel.rule must be centroid or first-point")
        return cls(size=None if v["size"] is None else float(v["size"]),
                   rule=v["rule"])


@dataclasses.dataclass
class OTSection:
    method: str = "plan"
    beta: float = 1e2
    beta_scale: str = "median"
    max_iters: int = 5000
    marginal_tol: float = 1e-7
    log_domain: bool = True
    accel: str | bool = "auto"
    strategy: str = "mean"
    k_enc: int = 1
    k_dec: int = 1
    ppmm_rule: str = "cov-eig"
    ppmm_iters: int | None = None
    ppmm_tol: float | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "OTSection":
        v = _take(d, "ot", {
            "method": "plan", "beta": 1e2, "beta_scale": "median",
            "max_iters": 5000, "marginal_tol": 1e-7, "log_domain": True,
            "accel": "auto", "strategy": "mean", "k_enc": 1, "k_dec": 1,
            "ppmm_rule": "cov-eig", "ppmm_iters": None, "ppmm_tol": None,
        })
        _require(v["method"] in ("plan", "map"), "ot.method must be plan or map")
        _require(float(v["beta"]) > 0, "ot.beta must be > 0")
        _require(v["beta_scale"] in ("absolute", "median"),
                 "ot.beta_scale must be absolute or median")
        _require(int(v["max_iters"]) >= 1, "ot.max_iters must be >= 1")
        _require(v["accel"] in ("auto", True, False), "ot.accel must be auto or bool")
        _require(v["strategy"] in ("matrix", "max", "mean"),
                 "ot.strategy must be matrix, max or mean")
        _require(int(v["k_enc"]) >= 1 and int(v["k_dec"]) >= 1,
                 "ot.k_enc and ot.k_dec must be >= 1")
        _require(v["ppmm_rule"] in ("cov-eig", "random", "sliced-max"),
                 "ot.ppmm_rule must be cov-eig, random or sliced-max")
        if v["ppmm_iters"] is not None:
            _require(int(v["ppmm_iters"]) >= 1, "ot.ppmm_iters must be >= 1 or null")
        return cls(
            method=v["method"], beta=float(v["beta"]), beta_scale=v["beta_scale"],
            max_iters=int(v["max_iters"]), marginal_tol=float(v["marginal_tol"]),
            log_domain=bool(v["log_domain"]), accel=v["accel"],
            strategy=v["strategy"], k_enc=int(v["k_enc"]), k_dec=int(v["k_dec"]),
            ppmm_rule=v["ppmm_rule"],
            ppmm_iters=None if v["ppmm_iters"] is None else int(v["ppmm_iters"]),
            ppmm_tol=None if v["ppmm_tol"] is None else float(v["ppmm_tol"]),
        )


@dataclasses.dataclass
class FeatureSection:
    normal_mode: str = "cross"
    estimate_k: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSection":
        v = _take(d, "features", {"normal_mode": "cross", "estimate_k": 8})
        _require(v["normal_mode"] in FEATURE_MODES,
                 f"features.normal_mode must be one of {sorted(FEATURE_MODES)}")
        _require(int(v["estimate_k"]) >= 3, "features.estimate_k must be >= 3")
        return cls(normal_mode=v["normal_mode"], estimate_k=int(v["estimate_k"]))


@dataclasses.dataclass
class OperatorSection:
    width: int = 32
    layers: int = 4
    modes: tuple[int, int] = (16, 16)
    activation: str = "gelu"

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorSection":
        v = _take(d, "operator", {"width": 32, "layers": 4, "modes": [16, 16],
                                  "activation": "gelu"})
        modes = v["modes"]
        _require(isinstance(modes, (list, tuple)) and len(modes) == 2,
                 "operator.modes must be a pair [m1, m2]")
        _require(int(v["width"]) >= 1 and int(v["layers"]) >= 1,
                 "operator.width and operator.layers must be >= 1")
        _require(v["activation"] in ("gelu", "identity"),
                 "operator.activation must be gelu or identity")
        return cls(width=int(v["width"]), layers=int(v["layers"]),
                   modes=(int(modes[0]), int(modes[1])), activation=v["activation"])


@dataclasses.dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adam"
    loss: str = "relative-l2"
    latent_target: bool = False
    area_weighted_cd: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSection":
        v = _take(d, "train", {
            "epochs": 100, "batch_size": 16, "lr": 1e-3, "weight_decay": 0.0,
            "optimizer": "adam", "loss": "relative-l2", "latent_target": False,
            "area_weighted_cd": False,
        })
        _require(int(v["epochs"]) >= 1 and int(v["batch_size"]) >= 1,
                 "train.epochs and train.batch_size must be >= 1")
        _require(float(v["lr"]) >= 0, "train.lr must be >= 0")
        _require(v["optimizer"] in ("adam", "sgd"), "train.optimizer must be adam or sgd")
        _require(v["loss"] in ("relative-l2", "mse", "cd-loss"),
                 "train.loss must be relative-l2, mse or cd-loss")
        return cls(epochs=int(v["epochs"]), batch_size=int(v["batch_size"]),
                   lr=float(v["lr"]), weight_decay=float(v["weight_decay"]),
                   optimizer=v["optimizer"], loss=v["loss"],
                   latent_target=bool(v["latent_target"]),
                   area_weighted_cd=bool(v["area_weighted_cd"]))


@dataclasses.dataclass
class PipelineConfig:
    seed: int = 0
    latent: LatentSection = dataclasses.field(default_factory=LatentSection)
    voxel: VoxelSection = dataclasses.field(default_factory=VoxelSection)
    ot: OTSection = dataclasses.field(default_factory=OTSection)
    features: FeatureSection = dataclasses.field(default_factory=FeatureSection)
    operator: OperatorSection = dataclasses.field(default_factory=OperatorSection)
    train: TrainSection = dataclasses.field(default_factory=TrainSection)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        v = _take(d, "top level", {
            "seed": 0, "latent": {}, "voxel": {}, "ot": {}, "features": {},
            "operator": {}, "train": {},
        })
        return cls(
            seed=int(v["seed"]),
            latent=LatentSection.from_dict(v["latent"]),
            voxel=VoxelSection.from_dict(v["voxel"]),
            ot=OTSection.from_dict(v["ot"]),
            features=FeatureSection.from_dict(v["features"]),
            operator=OperatorSection.from_dict(v["operator"]),
            train=TrainSection.from_dict(v["train"]),
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfigError(f"config {path} is not valid JSON: {exc}")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["operator"]["modes"] = list(d["operator"]["modes"])
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def config_hash(self) -> str:
        """Stable hash of the full canonical config."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def embed_hash(self) -> str:
        """Hash of the sections that determine embed artifacts.

        Training hyperparameters do not touch grids, plans or features,
        so changing them must not invalidate the embed cache.
        """
        d = self.to_dict()
        sub = {k: d[k] for k in ("seed", "latent", "voxel", "ot", "features")}
        canon = json.dumps(sub, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_updates(self, **section_dicts) -> "PipelineConfig":
        """New config with some sections replaced by dict overlays."""
        d = self.to_dict()
        for key, overlay in section_dicts.items():
            if key == "seed":
                d["seed"] = overlay
            else:
                d[key].update(overlay)
        return PipelineConfig.from_dict(d)
