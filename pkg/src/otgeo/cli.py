"""Command-line front end.

Subcommands: downsample, mesh-gen, ot-solve, embed, train, eval, sweep,
synth. Batch-oriented: each command reads its inputs, writes artifacts
or reports under --out and exits 0 only when every stage succeeded.
OTGEO_THREADS caps worker parallelism for the embed phase.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from .errors import OtgeoError
from .geometry import (PointCloud, VoxelConfig, load_point_cloud,
                       uniform_weights, voxel_downsample, write_point_cloud)
from .latent_mesh import generate_grid
from .ot_plan import LP_ORACLE_CAP, cost_matrix, exact_plan_lp
from .pipeline.config import PipelineConfig
from .pipeline.convergence import convergence_study
from .pipeline.manifest import load_manifest
from .pipeline.run import cmd_embed, cmd_eval, cmd_train, _embed_worker
from .pipeline.synth import synth_dataset


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_updates(seed=args.seed)
    return cfg


def _run_downsample(args) -> int:
    cloud = load_point_cloud(args.input)
    out = voxel_downsample(cloud, VoxelConfig(voxel_size=args.voxel_size,
                                              reduce_rule=args.rule))
    write_point_cloud(args.output, out, format=args.format)
    print(f"downsample: {cloud.n} -> {out.n} points ({args.output})")
    return 0


def _run_mesh_gen(args) -> int:
    params = {}
    for kv in args.param or []:
        key, _, val = kv.partition("=")
        if not _:
            raise OtgeoError(f"--param expects key=value, got {kv!r}")
        params[key] = float(val)
    grid = generate_grid(args.shape, args.side, params)
    cloud = PointCloud(points=grid.points, normals=grid.normals,
                       weights=uniform_weights(grid.n))
    write_point_cloud(args.output, cloud, format=args.format)
    print(f"mesh-gen: {args.shape} side {grid.side} -> {grid.n} points "
          f"({args.output})")
    return 0


def _run_ot_solve(args) -> int:
    cfg = _load_config(args)
    overrides = {}
    if args.beta is not None:
        overrides["beta"] = args.beta
    if args.max_iters is not None:
        overrides["max_iters"] = args.max_iters
    if args.tol is not None:
        overrides["marginal_tol"] = args.tol
    if args.strategy is not None:
        overrides["strategy"] = args.strategy
    if overrides:
        cfg = cfg.with_updates(ot=overrides)
    out = Path(args.out)
    entry = {"geometry": Path(args.input).name, "solution": None}
    inst_dir = out / "ot-solve" / Path(args.input).stem
    meta = _embed_worker((cfg, str(Path(args.input).parent), entry,
                          str(inst_dir)))
    if "error" in meta:
        print(f"error: {meta['error']}", file=sys.stderr)
        return 1
    ot = meta["ot"]
    row = {
        "geometry": Path(args.input).name, "n_points": meta["n_points"],
        "grid_side": meta["grid_side"], "method": ot["method"],
        "iterations": ot["iterations"], "converged": ot.get("converged", ""),
        "cost": ot.get("cost", ""), "beta_effective": ot.get("beta_effective", ""),
        "residual": ot.get("residual", ""), "final_disc": ot.get("final_disc", ""),
    }
    with open(inst_dir / "plan_summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
    print(f"ot-solve: n={meta['n_points']} m={meta['grid_side']} "
          f"method={ot['method']} iterations={ot['iterations']}"
          + (f" cost={ot['cost']:.6g}" if "cost" in ot else "")
          + f" -> {inst_dir}")
    if args.oracle:
        return _ot_solve_oracle(ot, inst_dir)
    return 0


def _ot_solve_oracle(ot: dict, inst_dir: Path) -> int:
    if "cost" not in ot:
        print("oracle: no dense plan cost to compare (method was "
              f"{ot['method']})", file=sys.stderr)
        return 1
    grid_pc = load_point_cloud(inst_dir / "grid.otg")
    cloud_pc = load_point_cloud(inst_dir / "cloud.otg")
    if grid_pc.n * cloud_pc.n > LP_ORACLE_CAP:
        print(f"oracle: skipped, {grid_pc.n}x{cloud_pc.n} exceeds the LP cap")
        return 0
    M = cost_matrix(grid_pc, cloud_pc)
    lp = exact_plan_lp(M, grid_pc.weights, cloud_pc.weights)
    gap = (ot["cost"] - lp.cost) / lp.cost if lp.cost > 0 else ot["cost"]
    print(f"oracle: lp_cost={lp.cost:.6g} plan_cost={ot['cost']:.6g} "
          f"gap={gap:.3%}")
    return 0


def _run_embed(args) -> int:
    cfg = _load_config(args)
    man = load_manifest(args.manifest)
    res = cmd_embed(man, cfg, args.out)
    hits = sum(1 for r in res.records if r.get("cache") == "hit")
    print(f"embed: {len(res.records)} ok ({hits} cached), "
          f"{len(res.failures)} failed, {res.seconds:.1f}s -> {res.cache_dir}")
    for f in res.failures:
        print(f"  failed {f['tag']}: {f['error']}", file=sys.stderr)
    return 0 if res.ok else 1


def _run_train(args) -> int:
    cfg = _load_config(args)
    man = load_manifest(args.manifest)
    ckpt, report = cmd_train(man, cfg, args.out)
    s = report.summary
    print(f"train: {s['n_train']} train / {s['n_val']} val, "
          f"{s['parameters']} parameters, "
          f"final rel_l2 {s['final']['relative_l2']:.4f} -> {ckpt}")
    return 0


def _run_eval(args) -> int:
    cfg = _load_config(args)
    man = load_manifest(args.manifest)
    report = cmd_eval(man, cfg, args.out, checkpoint=args.checkpoint,
                      split=args.split)
    s = report.summary
    print(f"eval[{s['split']}]: {s['n_instances']} instances, "
          f"mean rel_l2 {s['mean_rel_l2']:.4f}"
          + (f", cd MAE {s['cd_mae']:.4f}" if "cd_mae" in s else ""))
    return 0


def _run_sweep(args) -> int:
    cfg = _load_config(args)
    man = load_manifest(args.manifest)
    rates = [float(r) for r in args.rates.split(",")]
    report = convergence_study(man, cfg, rates, args.out)
    for row in report.rows:
        if "failure" in row:
            print(f"rate {row['rate']:g}: FAILED {row['failure']}",
                  file=sys.stderr)
        else:
            print(f"rate {row['rate']:g}: n1={row['n1']:.0f} m={row['m']:.0f} "
                  f"rel_l2={row['error']:.4f} ({row['wallclock']:.1f}s)")
    slope = report.summary["slope"]
    print("sweep: slope "
          + (f"{slope:.3f}" if slope is not None else "undefined")
          + f" -> {Path(args.out) / 'convergence_summary.json'}")
    return 0 if report.summary["failures"] == 0 else 1


def _run_synth(args) -> int:
    man = synth_dataset(args.kind, args.count, args.seed or 0, args.out,
                        n_points=args.points, test_count=args.test_count)
    print(f"synth: {len(man.entries)} instances "
          f"({len(man.entries_for('train'))} train / "
          f"{len(man.entries_for('test'))} test) -> {man.root / 'manifest.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otgeo",
                                description="OT latent embeddings for point clouds")
    p.add_argument("--version", action="version", version=f"otgeo {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        if manifest:
            sp.add_argument("--manifest", required=True, help="dataset manifest JSON")
        sp.add_argument("--config", default=None, help="pipeline config JSON")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("downsample", help="voxel-downsample one point cloud")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--voxel-size", type=float, required=True)
    sp.add_argument("--rule", choices=["centroid", "first-point"],
                    default="centroid")
    sp.add_argument("--format", choices=["raw-f64", "csv"], default="raw-f64")
    sp.set_defaults(fn=_run_downsample)

    sp = sub.add_parser("mesh-gen", help="generate a parametric latent grid")
    sp.add_argument("output")
    sp.add_argument("--shape", choices=["torus", "sphere", "plane", "hemisphere"],
                    required=True)
    sp.add_argument("--side", type=int, required=True)
    sp.add_argument("--param", action="append", metavar="KEY=VALUE")
    sp.add_argument("--format", choices=["raw-f64", "csv"], default="raw-f64")
    sp.set_defaults(fn=_run_mesh_gen)

    sp = sub.add_parser("ot-solve", help="embed a single geometry file")
    sp.add_argument("input")
    common(sp, manifest=False)
    sp.add_argument("--beta", type=float, default=None,
                    help="override the entropic regularization strength")
    sp.add_argument("--max-iters", type=int, default=None)
    sp.add_argument("--tol", type=float, default=None,
                    help="marginal L1 residual threshold")
    sp.add_argument("--strategy", choices=["matrix", "max", "mean"],
                    default=None)
    sp.add_argument("--oracle", action="store_true",
                    help="also solve the exact LP and print the cost gap")
    sp.set_defaults(fn=_run_ot_solve)

    sp = sub.add_parser("embed", help="embed every manifest instance")
    common(sp)
    sp.set_defaults(fn=_run_embed)

    sp = sub.add_parser("train", help="train the latent operator")
    common(sp)
    sp.set_defaults(fn=_run_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--split", default="test")
    sp.set_defaults(fn=_run_eval)

    sp = sub.add_parser("sweep", help="resolution convergence study")
    common(sp)
    sp.add_argument("--rates", required=True,
                    help="comma-separated sampling fractions, e.g. 0.25,0.5,1.0")
    sp.set_defaults(fn=_run_sweep)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--kind", choices=["star-2d", "bumpy-sphere-3d"],
                    required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--points", type=int, default=1000)
    sp.add_argument("--test-count", type=int, default=None)
    sp.set_defaults(fn=_run_synth)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except OtgeoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
