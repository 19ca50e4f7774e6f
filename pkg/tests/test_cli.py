import json
import math

import numpy as np
import pytest

from staticsplat import io
from staticsplat.cli import main

SMALL = ["--frames", "6", "--mover-frames", "3", "--width", "24", "--height", "18", "--heldout", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), *SMALL]) == 0
    assert main(["init", "--data", str(root / "data"), "--out", str(root / "init.ply"), "--points", "300"]) == 0
    return root


def _fail(argv, capsys):
    code = main(argv)
    err = capsys.readouterr().err
    assert code == 2
    assert err.count("\n") == 1 and err.startswith("error: ")
    return err.split(":")[1].strip()


def test_synth_layout(workspace):
    data = workspace / "data"
    for part in ("images", "masks", "test", "truth", "cameras.json", "manifest.json"):
        assert (data / part).exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["frames"]) == 6 and len(manifest["test_frames"]) == 2
    assert not (data / ".lock").exists()
    assert len(io.load_cloud(workspace / "init.ply")) == 300


def test_train_zero_iterations_copies_cloud(workspace):
    out = workspace / "t0"
    assert main(["train", "--data", str(workspace / "data"), "--cloud", str(workspace / "init.ply"),
                 "--out", str(out), "--iterations", "0"]) == 0
    assert (out / "cloud.ply").read_bytes() == (workspace / "init.ply").read_bytes()
    assert io.read_loss_log(out / "loss_log.csv") == []
    assert "total_iterations = 0" in (out / "config.txt").read_text()


def test_train_config_file_and_flags(workspace):
    out = workspace / "tcfg"
    cfg = workspace / "train.cfg"
    cfg.write_text("total_iterations = 9\nseed = 4\nloss.lam = 0.5\n")
    assert main(["train", "--data", str(workspace / "data"), "--cloud", str(workspace / "init.ply"),
                 "--out", str(out), "--config", str(cfg), "--set", "seed=7", "--iterations", "3"]) == 0
    written = io.parse_config_text((out / "config.txt").read_text())
    assert written["total_iterations"] == 3 and written["seed"] == 7 and written["loss.lam"] == 0.5
    assert len(io.read_loss_log(out / "loss_log.csv")) == 3


def test_train_deterministic(workspace):
    outs = []
    for k in range(2):
        out = workspace / f"det{k}"
        assert main(["train", "--data", str(workspace / "data"), "--cloud", str(workspace / "init.ply"),
                     "--out", str(out), "--iterations", "6", "--seed", "3"]) == 0
        outs.append(out)
    for name in ("cloud.ply", "loss_log.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_render_and_eval(workspace, capsys):
    out = workspace / "renders"
    assert main(["render", "--cloud", str(workspace / "init.ply"), "--data", str(workspace / "data"),
                 "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.png")) == ["test_000.png", "test_001.png"]
    capsys.readouterr()
    ref = workspace / "data" / "test"
    assert main(["eval", "--rendered", str(ref), "--reference", str(ref), "--json", str(workspace / "m.json"),
                 "--csv", str(workspace / "m.csv")]) == 0
    assert "PSNR inf" in capsys.readouterr().out
    data = json.loads((workspace / "m.json").read_text())
    for frame in data["frames"]:
        assert frame["psnr"] == "inf" and frame["ssim"] == pytest.approx(1.0)
    assert main(["eval", "--rendered", str(out), "--reference", str(ref), "--json", str(workspace / "r.json")]) == 0
    report = json.loads((workspace / "r.json").read_text())
    assert all(math.isfinite(f["psnr"]) for f in report["frames"])


def test_eval_masked(workspace):
    data = workspace / "data"
    assert main(["eval", "--rendered", str(data / "images"), "--reference", str(data / "images"),
                 "--masks", str(data / "masks"), "--json", str(workspace / "mm.json")]) == 0
    frames = json.loads((workspace / "mm.json").read_text())["frames"]
    assert all(f["psnr_masked"] == "inf" for f in frames)


def test_render_camera_file(workspace):
    cams = json.loads((workspace / "data" / "cameras.json").read_text())
    path = workspace / "path.json"
    path.write_text(json.dumps([cams["frame_000"], cams["frame_001"]]))
    assert main(["render", "--cloud", str(workspace / "init.ply"), "--cameras", str(path),
                 "--out", str(workspace / "pathrender"), "--background", "1", "1", "1"]) == 0
    img = io.load_image(workspace / "pathrender" / "view_001.png")
    assert img.shape == (18, 24, 3)


def test_propagate(workspace):
    out = workspace / "prop"
    assert main(["propagate", "--data", str(workspace / "data"), "--cloud", str(workspace / "init.ply"),
                 "--out", str(out), "--debug", "--set", "neighbor_count=4"]) == 0
    spawned = json.loads((out / "spawned.json").read_text())
    assert set(spawned) == {f"frame_{i:03d}" for i in range(6)}
    assert len(io.load_cloud(out / "cloud.ply")) == 300 + sum(spawned.values())
    assert any((out / "debug").rglob("*_valid.png"))


def test_errors_single_line(workspace, tmp_path, capsys):
    assert _fail(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")], capsys) == "missing_file"
    assert _fail(["render", "--cloud", str(tmp_path / "none.ply"), "--data", str(workspace / "data"),
                  "--out", str(tmp_path / "r")], capsys) == "missing_file"
    assert _fail(["train", "--data", str(workspace / "data"), "--cloud", str(workspace / "init.ply"),
                  "--out", str(tmp_path / "o2"), "--set", "bogus=1"], capsys) == "config_error"
    assert _fail(["train", "--data", str(workspace / "data"), "--cloud", str(workspace / "init.ply"),
                  "--out", str(tmp_path / "o3"), "--set", "novalue"], capsys) == "config_error"
    assert _fail(["eval", "--rendered", str(workspace / "data" / "images"),
                  "--reference", str(workspace / "data" / "test")], capsys) == "dataset_error"
    locked = tmp_path / "busy"
    locked.mkdir()
    (locked / ".lock").write_text("1")
    assert _fail(["render", "--cloud", str(workspace / "init.ply"), "--data", str(workspace / "data"),
                  "--out", str(locked)], capsys) == "output_locked"


def test_missing_mask_is_hard_error(workspace, tmp_path, capsys):
    import shutil

    data = tmp_path / "data"
    shutil.copytree(workspace / "data", data)
    (data / "masks" / "frame_004_mask.png").unlink()
    manifest = json.loads((data / "manifest.json").read_text())
    manifest["frames"][4]["mask"] = None
    (data / "manifest.json").write_text(json.dumps(manifest))
    argv = ["train", "--data", str(data), "--cloud", str(workspace / "init.ply"), "--iterations", "1"]
    code = main(argv + ["--out", str(tmp_path / "o")])
    assert code == 2 and "frame_004" in capsys.readouterr().err
    assert main(argv + ["--out", str(tmp_path / "o2"), "--no-masks"]) == 0


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
