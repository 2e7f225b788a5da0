import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from surfelgs import cli, fileio
from surfelgs.trainer import (DensifyStats, TrainConfig, TrainState, load_checkpoint, new_state,
                              save_checkpoint)
from surfelgs.scene_io import load_dataset


def run(capsys, *argv):
    try:
        code = cli.main(list(argv))
    except SystemExit as e:
        code = e.code
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-scene", "--kind", "sphere", "--views", "6", "--resolution", "32",
                     "--points", "150", "--seed", "3", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), "--iters", "40"]) == 0
    return out


def test_gen_scene_layout(data_dir):
    assert (data_dir / "cameras.json").is_file() and (data_dir / "points.ply").is_file()
    assert sorted(os.listdir(data_dir / "images")) == [f"{i:03d}.png" for i in range(6)]
    ds = load_dataset(str(data_dir))
    assert list(ds.test_idx) == [0] and len(ds.init_points) == 150


def test_train_zero_iters_writes_init_only(data_dir, tmp_path, capsys):
    code, out, err = run(capsys, "train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--iters", "0")
    assert code == 0
    assert (tmp_path / "r" / "checkpoints" / "init.ckpt").is_file()
    assert not (tmp_path / "r" / "checkpoints" / "final.ckpt").exists()
    assert json.loads(out)["steps"] == 0
    echoed = json.loads(err.strip().splitlines()[0])
    assert echoed["command"] == "train" and echoed["iterations"] == 0
    manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert any(e["path"].endswith("config.ini") for e in manifest["files"])


def test_train_outputs(trained):
    st, cfg = load_checkpoint(str(trained / "checkpoints" / "final.ckpt"))
    assert st.step == 40 and cfg["iterations"] == 40
    lines = (trained / "metrics.ndjson").read_text().splitlines()
    assert len(lines) == 4 and json.loads(lines[-1])["step"] == 40
    assert (trained / "test_renders" / "000.png").is_file()
    manifest = json.loads((trained / "manifest.json").read_text())
    for e in manifest["files"]:
        digest = hashlib.sha256((trained / e["path"]).read_bytes()).hexdigest()
        assert digest == e["sha256"]


def test_render_channels(trained, data_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "render", "--ckpt", str(trained / "checkpoints" / "final.ckpt"), "--data",
                     str(data_dir), "--view", "2", "--channels", "color,depth,alpha", "--out", str(tmp_path))
    assert code == 0
    assert {"002_color.png", "002_depth.png", "002_depth.pfm", "002_alpha.png"} <= set(os.listdir(tmp_path))
    assert fileio.read_pfm(str(tmp_path / "002_depth.pfm")).shape == (32, 32)


@pytest.mark.parametrize("extra", [["--channels", ""], ["--channels", "color,bogus"], ["--view", "6"]])
def test_render_usage_errors(trained, data_dir, tmp_path, capsys, extra):
    code, _, err = run(capsys, "render", "--ckpt", str(trained / "checkpoints" / "final.ckpt"),
                       "--data", str(data_dir), "--out", str(tmp_path), *extra)
    assert code == 1 and "error" in err


def test_mesh_and_eval(trained, data_dir, tmp_path, capsys):
    ckpt = str(trained / "checkpoints" / "final.ckpt")
    code, out, _ = run(capsys, "mesh", "--ckpt", ckpt, "--data", str(data_dir), "--out", str(tmp_path / "m.ply"))
    assert code == 0
    info = json.loads(out)
    assert info["triangles"] > 0
    assert len(fileio.read_ply(str(tmp_path / "m.ply"))["faces"]) == info["triangles"]
    code, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--data", str(data_dir), "--mesh", str(tmp_path / "m.ply"))
    assert code == 0
    rows = [json.loads(l) for l in out.splitlines()]
    assert {r["metric"] for r in rows} == {"psnr", "ssim", "chamfer"}
    assert all(np.isfinite(r["value"]) for r in rows)


def test_eval_without_ground_truth_mesh(trained, data_dir, tmp_path, capsys):
    import shutil
    plain = tmp_path / "plain"
    shutil.copytree(data_dir, plain)
    doc = json.loads((plain / "cameras.json").read_text())
    del doc["ground_truth"]
    (plain / "cameras.json").write_text(json.dumps(doc))
    code, out, err = run(capsys, "eval", "--ckpt", str(trained / "checkpoints" / "final.ckpt"), "--data", str(plain))
    assert code == 0
    assert "chamfer omitted" in err
    assert "chamfer" not in out


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "0", "--scenes", "1")
    assert code == 0
    assert json.loads(out)["status"] == "pass"


def test_gradcheck_single_precision_is_usage_error(capsys):
    assert run(capsys, "gradcheck", "--precision", "single")[0] == 1


def test_usage_errors(capsys):
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "train", "--data", "x")[0] == 1
    assert run(capsys, "gen-scene", "--out", "x", "--views", "1")[0] == 1
    assert run(capsys, "mesh", "--ckpt", "a", "--data", "b", "--voxel", "0")[0] == 1


def test_missing_data_is_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
    assert code == 2 and "data error" in err


def test_corrupt_checkpoint_is_data_error(data_dir, tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"SURFELGS" + b"\0" * 10)
    assert run(capsys, "render", "--ckpt", str(tmp_path / "bad.ckpt"), "--data", str(data_dir),
               "--out", str(tmp_path))[0] == 2


def test_zero_splat_checkpoint_is_data_error(data_dir, tmp_path, capsys):
    ds = load_dataset(str(data_dir))
    st = new_state(ds, TrainConfig(iterations=0))
    none = np.zeros(len(st.model), dtype=bool)
    empty = TrainState(st.model.subset(none), st.optimizer.select(none), DensifyStats.zeros(0), st.rng,
                       st.scene_extent)
    save_checkpoint(str(tmp_path / "empty.ckpt"), empty)
    code, _, err = run(capsys, "mesh", "--ckpt", str(tmp_path / "empty.ckpt"), "--data", str(data_dir),
                       "--out", str(tmp_path / "m.ply"))
    assert code == 2 and "no splats" in err


def test_module_entry_point_exit_code(tmp_path):
    p = subprocess.run([sys.executable, "-m", "surfelgs", "eval", "--ckpt", str(tmp_path / "x.ckpt"),
                        "--data", str(tmp_path)], capture_output=True, text=True)
    assert p.returncode == 2
