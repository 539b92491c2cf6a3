"""End-to-end orchestration: embed, train, eval, run reports.

The embed phase turns each manifest instance into cached artifacts
(latent grid, transported mesh, index maps, feature tensor, reduced
targets) under out_dir/embed/<embed_hash>/<instance>/. Instances are
independent, so the phase runs under a process pool capped by
OTGEO_THREADS, failures are recorded per instance and the rest of the
batch continues. The cache key covers exactly the config sections that
feed the artifacts, so a rerun with the same key does no recomputation
and removing one instance from the manifest never touches another's
files.

Train and eval consume the cached artifacts and emit a RunReport (rows
as CSV, summary as JSON, wall clock per phase, peak RSS, config hash,
package version).
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import math
import os
import re
import resource
import time
import zlib
from pathlib import Path

import numpy as np

from .. import __version__
from ..coupling import (FEATURE_MODES, IndexMap, assemble_features,
                        decoder_indices, encode_function, encoder_indices,
                        read_indices, write_indices)
from ..errors import InvalidConfigError, InvalidInputError
from ..geometry import (PointCloud, VoxelConfig, estimate_normals,
                        load_point_cloud, uniform_weights, voxel_downsample,
                        voxel_slots, write_point_cloud)
from ..latent_mesh import generate_grid, grid_size_for, match_bounding_box
from ..latent_operator import (SpectralOperator, TrainConfig, TrainSample,
                               evaluate, forward, load_checkpoint,
                               save_checkpoint, train, _decode_pred)
from ..ot_map import ppmm
from ..ot_plan import (DENSE_PLAN_CAP, SinkhornConfig, cost_matrix,
                       plan_strategy, sinkhorn, solve_plan_streaming)
from .config import PipelineConfig
from .drag import drag_coefficient
from .manifest import DatasetManifest


def worker_count(n_tasks: int) -> int:
    """Parallel width: min(OTGEO_THREADS or cpu count, task count)."""
    env = os.environ.get("OTGEO_THREADS", "").strip()
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


def peak_rss_mb() -> float:
    """High-water resident set of this process and reaped children, MB."""
    self_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    child_kb = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss
    return round(max(self_kb, child_kb) / 1024.0, 1)


def _instance_name(geometry_rel: str) -> str:
    stem = Path(geometry_rel).name
    stem = re.sub(r"\.(csv|obj|ply|otg)$", "", stem)
    return re.sub(r"[^A-Za-z0-9_.-]", "_", stem)


def _instance_seed(base_seed: int, name: str) -> list[int]:
    """Seed stream tied to the instance name, not its manifest position."""
    return [base_seed, zlib.crc32(name.encode())]


@dataclasses.dataclass
class RunReport:
    rows: list[dict]
    summary: dict

    def write(self, out_dir, stem: str) -> tuple[Path, Path]:
        import csv

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}_report.csv"
        json_path = out_dir / f"{stem}_summary.json"
        fields: list[str] = []
        for row in self.rows:
            for k in row:
                if k not in fields:
                    fields.append(k)
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(self.rows)
        json_path.write_text(json.dumps(
            {"summary": self.summary, "rows": self.rows}, indent=2) + "\n")
        return csv_path, json_path


# ----------------------------------------------------------------- embed

def _reduce_targets(u: np.ndarray, points: np.ndarray, size: float,
                    rule: str) -> np.ndarray:
    """Carry per-point solution values through voxel downsampling."""
    slot, k = voxel_slots(points, size)
    if rule == "first-point":
        rep = np.full(k, points.shape[0], dtype=np.int64)
        np.minimum.at(rep, slot, np.arange(points.shape[0]))
        return u[rep]
    sums = np.zeros(k)
    np.add.at(sums, slot, u)
    counts = np.bincount(slot, minlength=k).astype(np.float64)
    return sums / counts


def _embed_instance(cfg: PipelineConfig, root: str, entry: dict,
                    inst_dir: str) -> dict:
    name = _instance_name(entry["geometry"])
    inst = Path(inst_dir)
    inst.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    cloud = load_point_cloud(Path(root) / entry["geometry"], tag=name)
    n_raw = cloud.n
    u = None
    if entry.get("solution"):
        u = np.loadtxt(Path(root) / entry["solution"], dtype=np.float64).reshape(-1)
        if u.shape[0] != cloud.n:
            raise InvalidInputError(
                f"{name}: solution has {u.shape[0]} values for {cloud.n} points"
            )

    if cfg.voxel.size is not None:
        if u is not None:
            u = _reduce_targets(u, cloud.points, cfg.voxel.size, cfg.voxel.rule)
        cloud = voxel_downsample(
            cloud, VoxelConfig(voxel_size=cfg.voxel.size, reduce_rule=cfg.voxel.rule))

    if cfg.features.normal_mode != "none" and cloud.normals is None:
        cloud = estimate_normals(cloud, k=cfg.features.estimate_k)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sub_idx = None
    if cfg.ot.method == "plan":
        m = grid_size_for(cloud.n, cfg.latent.alpha)
        grid = generate_grid(cfg.latent.shape, m, cfg.latent.params)
        grid = match_bounding_box(grid, cloud)
        scfg = SinkhornConfig(
            beta=cfg.ot.beta, max_iters=cfg.ot.max_iters,
            marginal_tol=cfg.ot.marginal_tol, log_domain=cfg.ot.log_domain,
            beta_scale=cfg.ot.beta_scale, accel=cfg.ot.accel,
        )
        if grid.n * cloud.n > DENSE_PLAN_CAP:
            strat, iters, converged = solve_plan_streaming(
                grid, cloud, grid.weights, cloud.weights, scfg, cfg.ot.strategy)
            ot_meta = {"method": "plan-streaming", "iterations": iters,
                       "converged": bool(converged)}
        else:
            plan = sinkhorn(cost_matrix(grid, cloud), grid.weights,
                            cloud.weights, scfg)
            strat = plan_strategy(plan, cloud, cfg.ot.strategy)
            r_row, r_col = plan.marginal_residuals()
            ot_meta = {"method": "plan", "iterations": plan.iterations,
                       "converged": bool(plan.converged),
                       "cost": plan.cost, "beta_effective": plan.beta_effective,
                       "residual": r_row + r_col}
        transported = strat.points
    else:
        m = math.isqrt(cloud.n)
        keep = m * m
        if keep < cloud.n:
            rng = np.random.default_rng(_instance_seed(cfg.seed, name))
            sub_idx = np.sort(rng.choice(cloud.n, size=keep, replace=False))
            cloud = PointCloud(
                points=cloud.points[sub_idx],
                normals=None if cloud.normals is None else cloud.normals[sub_idx],
                weights=uniform_weights(keep), tag=cloud.tag,
                normal_flags=None if cloud.normal_flags is None
                else cloud.normal_flags[sub_idx],
            )
            if u is not None:
                u = u[sub_idx]
        grid = generate_grid(cfg.latent.shape, m, cfg.latent.params)
        grid = match_bounding_box(grid, cloud)
        mres = ppmm(grid.points, cloud.points, K=cfg.ot.ppmm_iters,
                    rule=cfg.ot.ppmm_rule, tol=cfg.ot.ppmm_tol,
                    seed=zlib.crc32(name.encode()) ^ cfg.seed)
        transported = mres.transported
        ot_meta = {"method": "map", "iterations": mres.iterations,
                   "final_disc": float(mres.per_iter_disc[-1]),
                   "fallback_random": int(mres.fallback_random)}
    timings["ot"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    E = encoder_indices(transported, cloud, k=cfg.ot.k_enc)
    D = decoder_indices(transported, cloud, k=cfg.ot.k_dec)
    timings["nn"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    feats = assemble_features(grid, cloud, E, cfg.features.normal_mode)
    feats.index_map = IndexMap(encoder=E, decoder=D)
    timings["features"] = time.perf_counter() - t0

    write_point_cloud(inst / "grid.otg", PointCloud(
        points=grid.points, normals=grid.normals,
        weights=uniform_weights(grid.n)), format="raw-f64")
    write_point_cloud(inst / "transported.otg", PointCloud(
        points=transported, weights=uniform_weights(transported.shape[0])),
        format="raw-f64")
    write_point_cloud(inst / "cloud.otg", cloud, format="raw-f64")
    write_indices(inst / "enc.idx", E)
    write_indices(inst / "dec.idx", D)
    np.save(inst / "features.npy", feats.tensor)
    if u is not None:
        np.save(inst / "target.npy", u[:, None])
    if sub_idx is not None:
        write_indices(inst / "subsample.idx", sub_idx)

    meta = {
        "complete": True, "tag": name, "n_raw": n_raw, "n_points": cloud.n,
        "grid_side": grid.side, "grid_shape": cfg.latent.shape,
        "k_enc": cfg.ot.k_enc, "k_dec": cfg.ot.k_dec,
        "normal_mode": cfg.features.normal_mode, "has_target": u is not None,
        "subsampled": sub_idx is not None, "ot": ot_meta,
        "timings": {k: round(v, 4) for k, v in timings.items()},
    }
    (inst / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


def _embed_worker(task) -> dict:
    cfg, root, entry, inst_dir = task
    try:
        return _embed_instance(cfg, root, entry, inst_dir)
    except Exception as exc:
        return {"tag": _instance_name(entry["geometry"]),
                "error": f"{type(exc).__name__}: {exc}"}


@dataclasses.dataclass
class EmbedResult:
    cache_dir: Path
    records: list[dict]
    failures: list[dict]
    seconds: float

    @property
    def ok(self) -> bool:
        return not self.failures


def cmd_embed(man: DatasetManifest, cfg: PipelineConfig, out_dir) -> EmbedResult:
    """Embed every manifest instance; cached, instance-parallel."""
    t_start = time.perf_counter()
    out = Path(out_dir)
    cache = out / "embed" / cfg.embed_hash()
    cache.mkdir(parents=True, exist_ok=True)
    sections = {k: cfg.to_dict()[k]
                for k in ("seed", "latent", "voxel", "ot", "features")}
    (cache / "config.json").write_text(json.dumps(sections, indent=2,
                                                  sort_keys=True) + "\n")

    records: list[dict] = []
    failures: list[dict] = []
    tasks = []
    for e in man.entries:
        name = _instance_name(e.geometry)
        inst = cache / name
        meta_path = inst / "meta.json"
        if meta_path.is_file():
            meta = json.loads(meta_path.read_text())
            if meta.get("complete"):
                meta["cache"] = "hit"
                records.append(meta)
                continue
        tasks.append((cfg, str(man.root), e.to_dict(), str(inst)))

    if tasks:
        w = worker_count(len(tasks))
        if w == 1:
            results = [_embed_worker(t) for t in tasks]
        else:
            with concurrent.futures.ProcessPoolExecutor(max_workers=w) as ex:
                results = list(ex.map(_embed_worker, tasks))
        for r in results:
            if "error" in r:
                failures.append(r)
            else:
                r["cache"] = "miss"
                records.append(r)

    result = EmbedResult(cache_dir=cache, records=records, failures=failures,
                         seconds=time.perf_counter() - t_start)
    (cache / "embed_report.json").write_text(json.dumps({
        "embed_hash": cfg.embed_hash(), "config_hash": cfg.config_hash(),
        "version": __version__, "instances": len(man.entries),
        "hits": sum(1 for r in records if r.get("cache") == "hit"),
        "failures": failures, "seconds": round(result.seconds, 3),
    }, indent=2) + "\n")
    return result


# ----------------------------------------------------------------- train

def _load_samples(man: DatasetManifest, cfg: PipelineConfig, cache: Path,
                  split: str, need_target: bool = True) -> list[TrainSample]:
    samples = []
    for e in man.entries_for(split):
        name = _instance_name(e.geometry)
        inst = cache / name
        meta_path = inst / "meta.json"
        if not meta_path.is_file():
            raise InvalidInputError(
                f"no embed artifacts for {name!r} under {cache}; "
                "run cmd_embed (CLI: otgeo embed) first"
            )
        meta = json.loads(meta_path.read_text())
        feats = np.load(inst / "features.npy")
        target_path = inst / "target.npy"
        if not target_path.is_file():
            if need_target:
                raise InvalidInputError(
                    f"{name!r} has no solution values; cannot train on it")
            target = None
        else:
            target = np.load(target_path)

        D = read_indices(inst / "dec.idx")
        if meta["k_dec"] > 1:
            D = D.reshape(-1, meta["k_dec"])
        cloud = load_point_cloud(inst / "cloud.otg", tag=name)

        if target is not None and cfg.train.latent_target:
            E = read_indices(inst / "enc.idx")
            if meta["k_enc"] > 1:
                E = E.reshape(-1, meta["k_enc"])
                target = encode_function(target, E, mode="multi-mean")
            else:
                target = encode_function(target, E, mode="single")
            D_use = None
        else:
            D_use = D

        samples.append(TrainSample(
            features=feats, target=target, decoder=D_use, tag=name,
            normals=cloud.normals,
            inlet=None if man.inlet is None else np.asarray(man.inlet),
            cd=e.cd,
            point_area=None if e.total_area is None else e.total_area / cloud.n,
            v_inlet=man.v_inlet, area_frontal=man.area_frontal,
        ))
    return samples


def _check_cd_prerequisites(man: DatasetManifest, cfg: PipelineConfig):
    if cfg.train.loss != "cd-loss":
        return
    missing = [k for k, v in (("v_inlet", man.v_inlet),
                              ("area_frontal", man.area_frontal),
                              ("inlet", man.inlet)) if v is None]
    if missing:
        raise InvalidConfigError(
            f"loss=cd-loss needs manifest globals {missing}; add them to the "
            "manifest or switch train.loss"
        )
    if cfg.train.latent_target:
        raise InvalidConfigError("cd-loss needs physical-space targets "
                                 "(train.latent_target must be false)")


def cmd_train(man: DatasetManifest, cfg: PipelineConfig,
              out_dir) -> tuple[Path, RunReport]:
    """Train the latent operator on the train split; report on test."""
    out = Path(out_dir)
    cache = out / "embed" / cfg.embed_hash()
    _check_cd_prerequisites(man, cfg)

    t0 = time.perf_counter()
    train_set = _load_samples(man, cfg, cache, "train")
    if not train_set:
        raise InvalidInputError("manifest has no train entries")
    val_set = (_load_samples(man, cfg, cache, "test")
               if man.entries_for("test") else None)
    t_load = time.perf_counter() - t0

    m_min = min(s.side for s in train_set + (val_set or []))
    modes = (min(cfg.operator.modes[0], m_min // 2),
             min(cfg.operator.modes[1], m_min // 2))
    out_ch = (train_set[0].target.shape[-1] if train_set[0].decoder is not None
              else train_set[0].target.shape[2])
    op = SpectralOperator(
        in_channels=FEATURE_MODES[cfg.features.normal_mode],
        out_channels=out_ch, width=cfg.operator.width,
        layers=cfg.operator.layers, modes=modes,
        activation=cfg.operator.activation, seed=cfg.seed,
    )

    tcfg = TrainConfig(
        epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
        lr=cfg.train.lr, weight_decay=cfg.train.weight_decay, seed=cfg.seed,
        optimizer=cfg.train.optimizer, loss=cfg.train.loss,
        area_weighted_cd=cfg.train.area_weighted_cd,
    )
    t0 = time.perf_counter()
    rows = train(op, train_set, tcfg, val_set)
    t_train = time.perf_counter() - t0

    t0 = time.perf_counter()
    final = evaluate(op, val_set if val_set else train_set)
    t_eval = time.perf_counter() - t0

    ckpt = out / f"model_{cfg.config_hash()}.otno"
    save_checkpoint(op, ckpt)

    report = RunReport(rows=rows, summary={
        "config_hash": cfg.config_hash(), "embed_hash": cfg.embed_hash(),
        "version": __version__, "checkpoint": str(ckpt),
        "n_train": len(train_set), "n_val": 0 if val_set is None else len(val_set),
        "parameters": int(sum(v.size for v in op.params.values())),
        "modes": list(modes),
        "final": {k: float(v) for k, v in final.items()},
        "phase_seconds": {"load": round(t_load, 3), "train": round(t_train, 3),
                          "eval": round(t_eval, 3)},
        "peak_rss_mb": peak_rss_mb(),
    })
    report.write(out, "train")
    return ckpt, report


# ------------------------------------------------------------------ eval

def cmd_eval(man: DatasetManifest, cfg: PipelineConfig, out_dir,
             checkpoint=None, split: str = "test") -> RunReport:
    """Per-instance metrics for a trained checkpoint on one split."""
    out = Path(out_dir)
    cache = out / "embed" / cfg.embed_hash()
    ckpt = Path(checkpoint) if checkpoint else out / f"model_{cfg.config_hash()}.otno"
    if not ckpt.is_file():
        raise InvalidInputError(
            f"checkpoint {ckpt} not found; run cmd_train (CLI: otgeo train) first")
    op = load_checkpoint(ckpt)

    t0 = time.perf_counter()
    samples = _load_samples(man, cfg, cache, split)
    entries = man.entries_for(split)
    rows = []
    for s, e in zip(samples, entries):
        v = forward(op, s.features)
        pred = _decode_pred(v, s)
        t = np.asarray(s.target, dtype=np.float64)
        denom = float(np.linalg.norm(t))
        rel = float(np.linalg.norm(pred - t) / denom) if denom > 0 else float("nan")
        row = {"tag": s.tag, "rel_l2": rel,
               "mse": float(np.mean((pred - t) ** 2))}
        can_cd = (s.decoder is not None and s.normals is not None
                  and man.inlet is not None and man.v_inlet is not None
                  and man.area_frontal is not None)
        if can_cd:
            area = None if e.total_area is None else e.total_area
            row["cd_pred"] = drag_coefficient(
                pred[:, 0], s.normals, area, man.v_inlet, man.area_frontal,
                np.asarray(man.inlet))
            if e.cd is not None:
                row["cd_true"] = e.cd
                row["cd_abs_err"] = abs(row["cd_pred"] - e.cd)
        rows.append(row)
    seconds = time.perf_counter() - t0

    summary = {
        "config_hash": cfg.config_hash(), "embed_hash": cfg.embed_hash(),
        "version": __version__, "checkpoint": str(ckpt), "split": split,
        "n_instances": len(rows),
        "mean_rel_l2": float(np.mean([r["rel_l2"] for r in rows])) if rows else None,
        "mean_mse": float(np.mean([r["mse"] for r in rows])) if rows else None,
        "seconds": round(seconds, 3), "peak_rss_mb": peak_rss_mb(),
    }
    cd_errs = [r["cd_abs_err"] for r in rows if "cd_abs_err" in r]
    if cd_errs:
        summary["cd_mae"] = float(np.mean(cd_errs))
    report = RunReport(rows=rows, summary=summary)
    report.write(out, f"eval_{split}")
    return report
