"""End-to-end checks of the command-line front end.

Every test drives main(argv) in-process so exit codes, printed lines and
on-disk artifacts can all be asserted without spawning interpreters.
"""

import json

import numpy as np
import pytest

from otgeo.cli import main
from otgeo.geometry import load_point_cloud
from otgeo.pipeline.manifest import load_manifest
from otgeo.pipeline.run import worker_count


def circle_csv(path, n, seed=0):
    rng = np.random.default_rng(seed)
    th = rng.uniform(0.0, 2.0 * np.pi, n)
    pts = np.c_[np.cos(th), np.sin(th), np.zeros_like(th)]
    np.savetxt(path, pts, delimiter=",", header="x,y,z", comments="")
    return path


def test_version_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "otgeo" in capsys.readouterr().out


def test_no_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_downsample_reduces_and_writes(tmp_path, capsys):
    src = tmp_path / "in.csv"
    rng = np.random.default_rng(1)
    np.savetxt(src, rng.uniform(0, 1, (400, 3)), delimiter=",",
               header="x,y,z", comments="")
    dst = tmp_path / "out.csv"
    rc = main(["downsample", str(src), str(dst),
               "--voxel-size", "0.25", "--format", "csv"])
    assert rc == 0
    out = load_point_cloud(dst)
    assert 0 < out.n < 400
    assert out.n <= 64          # at most 4x4x4 occupied cells
    assert "downsample:" in capsys.readouterr().out


def test_downsample_missing_input_returns_one(tmp_path, capsys):
    rc = main(["downsample", str(tmp_path / "nope.csv"),
               str(tmp_path / "out.csv"), "--voxel-size", "0.1"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_mesh_gen_torus_writes_grid(tmp_path):
    dst = tmp_path / "torus.otg"
    rc = main(["mesh-gen", str(dst), "--shape", "torus", "--side", "8"])
    assert rc == 0
    grid = load_point_cloud(dst)
    assert grid.n == 64
    assert grid.normals is not None


def test_mesh_gen_param_override(tmp_path):
    dst = tmp_path / "sphere.otg"
    rc = main(["mesh-gen", str(dst), "--shape", "sphere", "--side", "6",
               "--param", "radius=2.5"])
    assert rc == 0
    grid = load_point_cloud(dst)
    radii = np.linalg.norm(grid.points, axis=1)
    np.testing.assert_allclose(radii, 2.5, atol=1e-12)


def test_mesh_gen_malformed_param_returns_one(tmp_path, capsys):
    rc = main(["mesh-gen", str(tmp_path / "g.otg"), "--shape", "plane",
               "--side", "4", "--param", "R"])
    assert rc == 1
    assert "key=value" in capsys.readouterr().err


def test_ot_solve_writes_summary_and_indices(tmp_path):
    src = circle_csv(tmp_path / "c.csv", 24, seed=2)
    rc = main(["ot-solve", str(src), "--out", str(tmp_path / "o"),
               "--beta", "1e6", "--strategy", "mean"])
    assert rc == 0
    inst = tmp_path / "o" / "ot-solve" / "c"
    lines = (inst / "plan_summary.csv").read_text().strip().splitlines()
    assert len(lines) == 2
    header = lines[0].split(",")
    for col in ("cost", "iterations", "residual"):
        assert col in header
    assert (inst / "enc.idx").stat().st_size > 8
    assert (inst / "dec.idx").stat().st_size > 8
    meta = json.loads((inst / "meta.json").read_text())
    assert meta["ot"]["method"] == "plan"


def test_ot_solve_oracle_prints_cost_gap(tmp_path, capsys):
    src = circle_csv(tmp_path / "c.csv", 24, seed=3)
    rc = main(["ot-solve", str(src), "--out", str(tmp_path / "o"),
               "--beta", "1e6", "--oracle"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "oracle:" in out and "gap=" in out


def test_ot_solve_flag_overrides_land_in_meta(tmp_path):
    src = circle_csv(tmp_path / "c.csv", 20, seed=4)
    rc = main(["ot-solve", str(src), "--out", str(tmp_path / "o"),
               "--max-iters", "3", "--tol", "1e-30"])
    assert rc == 0
    meta = json.loads(
        (tmp_path / "o" / "ot-solve" / "c" / "meta.json").read_text())
    assert meta["ot"]["iterations"] == 3
    assert meta["ot"]["converged"] is False


def test_embed_missing_manifest_returns_one(tmp_path, capsys):
    rc = main(["embed", "--manifest", str(tmp_path / "absent.json"),
               "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_train_without_embed_cache_returns_one(tmp_path, capsys):
    rc = main(["synth", "--kind", "star-2d", "--count", "2", "--seed", "5",
               "--out", str(tmp_path / "d"), "--points", "80",
               "--test-count", "0"])
    assert rc == 0
    rc = main(["train", "--manifest", str(tmp_path / "d" / "manifest.json"),
               "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "cmd_embed" in capsys.readouterr().err


def test_worker_count_respects_env_cap(monkeypatch):
    monkeypatch.setenv("OTGEO_THREADS", "1")
    assert worker_count(8) == 1
    monkeypatch.setenv("OTGEO_THREADS", "3")
    assert worker_count(8) == 3
    assert worker_count(2) == 2     # never more workers than tasks


def test_synth_embed_train_eval_sweep_chain(tmp_path, capsys):
    data = tmp_path / "data"
    out = tmp_path / "out"
    rc = main(["synth", "--kind", "star-2d", "--count", "4", "--seed", "9",
               "--out", str(data), "--points", "120", "--test-count", "1"])
    assert rc == 0
    man = load_manifest(data / "manifest.json")
    assert len(man.entries) == 4

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "seed": 0,
        "operator": {"width": 4, "layers": 1, "modes": [2, 2]},
        "train": {"epochs": 2, "batch_size": 4, "lr": 1e-3},
    }))
    manifest = str(data / "manifest.json")

    rc = main(["embed", "--manifest", manifest, "--config", str(cfg_path),
               "--out", str(out)])
    assert rc == 0
    assert "embed: 4 ok" in capsys.readouterr().out

    rc = main(["train", "--manifest", manifest, "--config", str(cfg_path),
               "--out", str(out)])
    assert rc == 0
    assert "train:" in capsys.readouterr().out
    assert (out / "train_report.csv").exists()
    assert (out / "train_summary.json").exists()
    ckpts = list(out.glob("model_*.otno"))
    assert len(ckpts) == 1

    rc = main(["eval", "--manifest", manifest, "--config", str(cfg_path),
               "--out", str(out), "--split", "test"])
    assert rc == 0
    assert "eval[test]:" in capsys.readouterr().out
    rows = (out / "eval_test_report.csv").read_text().strip().splitlines()
    assert len(rows) == 2       # header plus the single test instance

    rc = main(["sweep", "--manifest", manifest, "--config", str(cfg_path),
               "--out", str(out / "sweep"), "--rates", "1.0"])
    assert rc == 0
    assert "sweep: slope" in capsys.readouterr().out
    summary = json.loads(
        (out / "sweep" / "convergence_summary.json").read_text())["summary"]
    assert summary["failures"] == 0
    assert summary["slope"] is None
