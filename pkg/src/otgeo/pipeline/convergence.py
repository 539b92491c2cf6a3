"""Resolution sweep: subsample the physical meshes, rerun the pipeline,
fit the error-vs-rate slope.

For each rate in (0, 1] a derived dataset is materialized with
round(rate * n) points per instance (minimum 16). The latent side
follows automatically through grid_size_for, so latent resolution
scales with the physical one. Each rate runs embed + train + eval with
the same config; failures are recorded per rate and the sweep
continues. With at least two successful rates the study reports the
slope of log(error) against log(rate) (negative when more points help);
with fewer it flags the slope as undefined.
"""

from __future__ import annotations

import json
import time
import zlib
from pathlib import Path

import numpy as np

from ..errors import InvalidInputError
from ..geometry import PointCloud, load_point_cloud, uniform_weights, write_point_cloud
from .config import PipelineConfig
from .drag import drag_coefficient
from .manifest import DatasetManifest, ManifestEntry
from .run import RunReport, _instance_name, cmd_embed, cmd_eval, cmd_train

_MIN_POINTS = 16


def _subsampled_dataset(man: DatasetManifest, cfg: PipelineConfig, rate: float,
                        rate_dir: Path) -> DatasetManifest:
    inst_dir = rate_dir / "instances"
    inst_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in man.entries:
        name = _instance_name(e.geometry)
        cloud = load_point_cloud(man.geometry_path(e), tag=name)
        n_keep = max(_MIN_POINTS, round(rate * cloud.n))
        n_keep = min(n_keep, cloud.n)
        rng = np.random.default_rng(
            [cfg.seed, zlib.crc32(name.encode()), int(round(rate * 1e6))])
        idx = np.sort(rng.choice(cloud.n, size=n_keep, replace=False))
        sub = PointCloud(points=cloud.points[idx],
                         normals=None if cloud.normals is None
                         else cloud.normals[idx],
                         weights=uniform_weights(n_keep), tag=name)
        geom_rel = f"instances/{name}.csv"
        write_point_cloud(inst_dir / f"{name}.csv", sub, format="csv")

        sol_rel = None
        cd = e.cd
        if e.solution is not None:
            u = np.loadtxt(man.solution_path(e), dtype=np.float64).reshape(-1)
            if u.shape[0] != cloud.n:
                raise InvalidInputError(
                    f"{name}: solution length {u.shape[0]} != {cloud.n} points")
            u = u[idx]
            sol_rel = f"instances/{name}_u.csv"
            np.savetxt(inst_dir / f"{name}_u.csv", u, fmt="%.17g")
            if (sub.normals is not None and man.inlet is not None
                    and man.v_inlet is not None and man.area_frontal is not None):
                cd = drag_coefficient(u, sub.normals, e.total_area,
                                      man.v_inlet, man.area_frontal,
                                      np.asarray(man.inlet))
        entries.append(ManifestEntry(geometry=geom_rel, solution=sol_rel,
                                     cd=cd, total_area=e.total_area,
                                     split=e.split))
    sub_man = DatasetManifest(root=rate_dir, entries=entries,
                              v_inlet=man.v_inlet,
                              area_frontal=man.area_frontal, inlet=man.inlet)
    sub_man.save(rate_dir / "manifest.json")
    return sub_man


def convergence_study(man: DatasetManifest, cfg: PipelineConfig, rates,
                      out_dir) -> RunReport:
    rates = [float(r) for r in rates]
    if not rates:
        raise InvalidInputError("need at least one rate")
    if any(not (0.0 < r <= 1.0) for r in rates):
        raise InvalidInputError(f"rates must lie in (0, 1], got {rates}")

    out = Path(out_dir)
    rows = []
    for rate in sorted(set(rates)):
        rate_dir = out / f"rate_{rate:g}"
        row: dict = {"rate": rate, "config_hash": cfg.config_hash()}
        t0 = time.perf_counter()
        try:
            sub_man = _subsampled_dataset(man, cfg, rate, rate_dir)
            emb = cmd_embed(sub_man, cfg, rate_dir)
            if not emb.ok:
                raise RuntimeError(
                    f"{len(emb.failures)} embed failure(s): "
                    + "; ".join(f["error"] for f in emb.failures))
            row["n1"] = float(np.mean([r["n_points"] for r in emb.records]))
            row["m"] = float(np.mean([r["grid_side"] for r in emb.records]))
            ckpt, _ = cmd_train(sub_man, cfg, rate_dir)
            split = "test" if sub_man.entries_for("test") else "train"
            ev = cmd_eval(sub_man, cfg, rate_dir, checkpoint=ckpt, split=split)
            row["error"] = ev.summary["mean_rel_l2"]
        except Exception as exc:
            row["failure"] = f"{type(exc).__name__}: {exc}"
        row["wallclock"] = round(time.perf_counter() - t0, 3)
        rows.append(row)

    good = [(r["rate"], r["error"]) for r in rows
            if "error" in r and r["error"] is not None
            and np.isfinite(r["error"]) and r["error"] > 0]
    if len(good) >= 2:
        lr = np.log([g[0] for g in good])
        le = np.log([g[1] for g in good])
        slope = float(np.polyfit(lr, le, 1)[0])
        flagged = None
    else:
        slope = None
        flagged = "slope undefined: need at least two successful rates"

    report = RunReport(rows=rows, summary={
        "config_hash": cfg.config_hash(), "rates": sorted(set(rates)),
        "slope": slope, "flagged": flagged,
        "failures": sum(1 for r in rows if "failure" in r),
    })
    report.write(out, "convergence")
    return report
