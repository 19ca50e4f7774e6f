import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from staticsplat import io
from staticsplat.dataset import Dataset, Frame
from staticsplat.exceptions import (
    ConfigError,
    DimensionMismatchError,
    FormatError,
    MalformedCameraError,
    MissingFileError,
    OutputLockedError,
)
from staticsplat.gaussians import Camera, GaussianCloud
from staticsplat.losses import LossWeights
from staticsplat.optim import DensifyConfig, TrainConfig, train
from staticsplat.synth import generate, standard_scene

from conftest import random_cloud
from test_optim import _quiet_config, _three_gaussian_dataset

FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "sh")


def _f32_cloud(rng, n, degree):
    cloud = random_cloud(rng, n, sh_degree=degree)
    return cloud.replace(**{k: getattr(cloud, k).astype(np.float32).astype(np.float64) for k in FIELDS})


class TestPly:
    @pytest.mark.parametrize("degree", [0, 1, 2, 3])
    def test_round_trip_bitwise(self, tmp_path, rng, degree):
        cloud = _f32_cloud(rng, 37, degree)
        io.save_cloud(tmp_path / "c.ply", cloud)
        back = io.load_cloud(tmp_path / "c.ply")
        assert back.sh_degree == degree
        for k in FIELDS:
            assert getattr(back, k).tobytes() == getattr(cloud, k).tobytes()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 3), st.integers(0, 30), st.integers(0, 2**31))
    def test_round_trip_property(self, tmp_path_factory, degree, n, seed):
        path = tmp_path_factory.mktemp("ply") / "c.ply"
        cloud = _f32_cloud(np.random.default_rng(seed), n, degree) if n else GaussianCloud.empty(degree)
        io.save_cloud(path, cloud)
        back = io.load_cloud(path)
        io.save_cloud(path.with_name("d.ply"), back)
        assert path.read_bytes() == path.with_name("d.ply").read_bytes()
        for k in FIELDS:
            np.testing.assert_array_equal(getattr(back, k), getattr(cloud, k))

    def test_empty(self, tmp_path):
        io.save_cloud(tmp_path / "e.ply", GaussianCloud.empty(3))
        raw = (tmp_path / "e.ply").read_bytes()
        assert b"element vertex 0\n" in raw and raw.endswith(b"end_header\n")
        back = io.load_cloud(tmp_path / "e.ply")
        assert len(back) == 0 and back.sh_degree == 3

    def test_hand_written_fixture(self, tmp_path):
        values = [1.0, -2.0, 0.5, 0.5, 0.5, -0.5, 0.5, -1.0, -2.0, -3.0, 1.5, 0.25, -0.25, 0.75]
        values += [float(i) / 10 for i in range(9)]  # degree 1: three rest coefficients per channel
        header = "\n".join([
            "ply", "format binary_little_endian 1.0", "element vertex 1",
            *[f"property float {p}" for p in
              "x y z rot_0 rot_1 rot_2 rot_3 scale_0 scale_1 scale_2 opacity f_dc_0 f_dc_1 f_dc_2".split()],
            *[f"property float f_rest_{i}" for i in range(9)],
            "end_header",
        ]) + "\n"
        (tmp_path / "one.ply").write_bytes(header.encode() + struct.pack("<23f", *values))
        c = io.load_cloud(tmp_path / "one.ply")
        assert c.sh_degree == 1
        np.testing.assert_array_equal(c.positions, [[1.0, -2.0, 0.5]])
        np.testing.assert_array_equal(c.rotations, [[0.5, 0.5, -0.5, 0.5]])
        np.testing.assert_array_equal(c.log_scales, [[-1.0, -2.0, -3.0]])
        np.testing.assert_array_equal(c.opacity_logits, [1.5])
        np.testing.assert_array_equal(c.sh[0, 0], [0.25, -0.25, 0.75])
        # channel-major rest block: red 0.0 0.1 0.2, green 0.3 0.4 0.5, blue 0.6 0.7 0.8
        np.testing.assert_array_equal(c.sh[0, 1:, 0], np.float32([0.0, 0.1, 0.2]))
        np.testing.assert_array_equal(c.sh[0, 2, :], np.float32([0.1, 0.4, 0.7]))

    def test_unknown_layout(self, tmp_path):
        header = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n"
        (tmp_path / "bad.ply").write_bytes(header.encode() + struct.pack("<2f", 0, 0))
        with pytest.raises(FormatError, match="version"):
            io.load_cloud(tmp_path / "bad.ply")

    def test_future_version(self, tmp_path):
        io.save_cloud(tmp_path / "c.ply", GaussianCloud.empty(0))
        raw = (tmp_path / "c.ply").read_bytes().replace(b"staticsplat-ply 1", b"staticsplat-ply 7")
        (tmp_path / "c.ply").write_bytes(raw)
        with pytest.raises(FormatError):
            io.load_cloud(tmp_path / "c.ply")

    def test_ascii_and_truncated(self, tmp_path):
        (tmp_path / "a.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(FormatError):
            io.load_cloud(tmp_path / "a.ply")
        io.save_cloud(tmp_path / "t.ply", random_cloud(np.random.default_rng(0), 3, sh_degree=0))
        (tmp_path / "t.ply").write_bytes((tmp_path / "t.ply").read_bytes()[:-4])
        with pytest.raises(FormatError):
            io.load_cloud(tmp_path / "t.ply")
        with pytest.raises(MissingFileError):
            io.load_cloud(tmp_path / "nothing.ply")


@pytest.fixture(scope="module")
def synth_ds():
    return generate(standard_scene(n_frames=6, mover_frames=3, width=24, height=18, n_heldout=1))


class TestDataset:
    def test_round_trip(self, tmp_path, synth_ds):
        io.save_dataset(tmp_path, synth_ds)
        back = io.load_dataset(tmp_path)
        assert [f.name for f in back.frames] == [f.name for f in synth_ds.frames]
        for a, b in zip(synth_ds.frames, back.frames):
            assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12
            np.testing.assert_array_equal(a.mask.astype(bool), b.mask.astype(bool))
            assert a.camera.to_dict() == b.camera.to_dict()
        for k, d in synth_ds.depths.items():
            np.testing.assert_array_equal(d, back.depths[k])
        assert back.scene == synth_ds.scene
        assert back.test_frames[0].mask is None

    def test_missing_mask_lists_frame(self, tmp_path, synth_ds):
        io.save_dataset(tmp_path, synth_ds)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["frames"][2]["mask"] = None
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(MissingFileError, match=synth_ds.frames[2].name):
            io.load_dataset(tmp_path, require_masks=True)
        assert io.load_dataset(tmp_path).frames[2].mask is None

    def test_missing_file_and_bad_camera(self, tmp_path, synth_ds):
        io.save_dataset(tmp_path, synth_ds)
        (tmp_path / "masks" / f"{synth_ds.frames[1].name}_mask.png").unlink()
        with pytest.raises(MissingFileError):
            io.load_dataset(tmp_path)
        cams = json.loads((tmp_path / "cameras.json").read_text())
        del cams[next(iter(cams))]["fx"]
        (tmp_path / "cameras.json").write_text(json.dumps(cams))
        with pytest.raises(MalformedCameraError):
            io.load_dataset(tmp_path)

    def test_dimension_mismatch(self, tmp_path, synth_ds):
        io.save_dataset(tmp_path, synth_ds)
        name = synth_ds.frames[0].name
        io.save_image(tmp_path / "images" / f"{name}.png", np.zeros((5, 5, 3)))
        with pytest.raises(DimensionMismatchError):
            io.load_dataset(tmp_path)

    def test_98_frames(self, tmp_path):
        cam = Camera.look_at([0, -3, 0], [0, 0, 0], width=4, height=3, fx=4)
        frames = [Frame(f"frame_{i:03d}", np.full((3, 4, 3), i / 97), cam, np.ones((3, 4), np.uint8))
                  for i in range(98)]
        io.save_dataset(tmp_path, Dataset(frames=frames))
        back = io.load_dataset(tmp_path, require_masks=True)
        assert len(back.frames) == 98
        assert back.frames[97].image.max() == 1.0

    def test_mask_threshold(self, tmp_path):
        from PIL import Image

        Image.fromarray(np.array([[0, 127, 128, 255]], np.uint8)).save(tmp_path / "m.png")
        np.testing.assert_array_equal(io.load_mask(tmp_path / "m.png"), [[0, 0, 1, 1]])

    def test_load_cameras(self, tmp_path):
        cam = Camera.look_at([1, -3, 0.5], [0, 0, 0], width=8, height=6, fx=7)
        (tmp_path / "l.json").write_text(json.dumps([cam.to_dict(), cam.to_dict()]))
        got = io.load_cameras(tmp_path / "l.json")
        assert [g[0] for g in got] == ["view_000", "view_001"]
        np.testing.assert_allclose(got[0][1].rotation, cam.rotation, atol=1e-15)
        (tmp_path / "bad.json").write_text("3")
        with pytest.raises(MalformedCameraError):
            io.load_cameras(tmp_path / "bad.json")


def _psnr_loop(a, b):
    total, n = 0.0, 0
    for v in range(a.shape[0]):
        for u in range(a.shape[1]):
            for c in range(a.shape[2]):
                total += (float(a[v, u, c]) - float(b[v, u, c])) ** 2
                n += 1
    return 10.0 * math.log10(n / total)


class TestMetrics:
    def test_examples(self):
        a = np.zeros((4, 4, 3))
        assert io.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
        assert io.psnr(a, a + 1.0) == 0.0
        assert io.psnr(a, a) == math.inf

    def test_loop_oracle(self, rng):
        for _ in range(5):
            a, b = rng.uniform(size=(2, 9, 11, 3))
            assert abs(io.psnr(a, b) - _psnr_loop(a, b)) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            io.psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_masked(self, rng):
        a, b = rng.uniform(size=(2, 16, 32, 3))
        mask = np.zeros((16, 32), bool)
        mask[:, :16] = True
        b2 = b.copy()
        b2[:, 16:] = a[:, 16:]
        assert io.masked_psnr(a, b, mask) == pytest.approx(io.psnr(a[:, :16], b[:, :16]), abs=1e-12)
        assert math.isnan(io.masked_psnr(a, b, np.zeros((16, 32))))
        assert io.masked_ssim(a, a, mask) == pytest.approx(1.0)
        assert io.masked_ssim(a, b2, ~mask) == pytest.approx(1.0)
        assert math.isnan(io.masked_ssim(a, b, np.zeros((16, 32))))

    def test_report_files(self, tmp_path, rng):
        a, b = rng.uniform(size=(2, 16, 16, 3))
        report = io.evaluate_images([("x", a, a), ("y", a, b)], {"y": np.ones((16, 16))})
        assert report.frames[0].psnr == math.inf and report.frames[0].ssim == pytest.approx(1.0)
        assert -1.0 <= report.frames[1].ssim <= 1.0
        report.to_csv(tmp_path / "m.csv")
        report.to_json(tmp_path / "m.json")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "frame,psnr,ssim,psnr_masked,ssim_masked" and lines[1].startswith("x,inf,")
        data = json.loads((tmp_path / "m.json").read_text())
        assert data["frames"][0]["psnr"] == "inf"
        assert data["frames"][1]["psnr_masked"] == pytest.approx(report.frames[1].psnr)


class TestConfig:
    def test_parse(self):
        got = io.parse_config_text("""
            # comment
            total_iterations = 50
            loss.lam = 0.3   # trailing
            mask_mode = "both"
            use_masks = false
            propagation_triggers = 10, 20
            background = 0.5, 0.5, 0.5
            seed = none
        """)
        assert got == {"total_iterations": 50, "loss.lam": 0.3, "mask_mode": "both", "use_masks": False,
                       "propagation_triggers": (10, 20), "background": (0.5, 0.5, 0.5), "seed": None}

    def test_bad_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            io.parse_config_text("a = 1\njust words\n")

    def test_three_layer_precedence(self):
        defaults = TrainConfig()
        file_values = {"total_iterations": 500, "seed": 3, "loss.lam": 0.4}
        overrides = {"seed": 9}
        cfg = io.resolve_config(defaults, file_values, overrides)
        assert cfg.seed == 9  # flag beats file
        assert cfg.total_iterations == 500 and cfg.loss.lam == 0.4  # file beats default
        assert cfg.mask_mode == defaults.mask_mode and cfg.loss.w_flatten == LossWeights().w_flatten
        assert io.resolve_config(defaults) == defaults

    def test_unknown_and_typed(self):
        with pytest.raises(ConfigError):
            io.apply_config(TrainConfig(), {"nonsense": 1})
        with pytest.raises(ConfigError):
            io.apply_config(TrainConfig(), {"total_iterations": "many"})
        with pytest.raises(ConfigError):
            io.apply_config(TrainConfig(), {"use_masks": 1})
        with pytest.raises(ConfigError):
            io.apply_config(TrainConfig(), {"seed.x": 1})
        cfg = io.apply_config(TrainConfig(), {"total_iterations": 4000.0, "propagation.sigma_rel": 0.5,
                                              "propagation_triggers": 100})
        assert cfg.total_iterations == 4000 and cfg.propagation.sigma_rel == 0.5
        assert cfg.propagation_triggers == (100,)

    def test_format_round_trip(self):
        cfg = TrainConfig(total_iterations=300, propagation_triggers=(100,), seed=5, mask_mode="replace",
                          densify=DensifyConfig(interval=50))
        text = io.format_config(cfg.flat())
        again = io.resolve_config(TrainConfig(), io.parse_config_text(text))
        assert io.format_config(again.flat()) == text


class TestMisc:
    def test_lock(self, tmp_path):
        with io.OutputLock(tmp_path / "out"):
            assert (tmp_path / "out" / ".lock").exists()
            with pytest.raises(OutputLockedError):
                with io.OutputLock(tmp_path / "out"):
                    pass
        assert not (tmp_path / "out" / ".lock").exists()
        with io.OutputLock(tmp_path / "out"):
            pass

    def test_loss_log_round_trip(self, tmp_path, rng):
        rows = [[i + 1, *rng.uniform(size=6), 10 + i] for i in range(5)]
        io.write_loss_log(tmp_path / "l.csv", rows)
        back = io.read_loss_log(tmp_path / "l.csv")
        np.testing.assert_array_equal(np.array(back), np.array(rows, dtype=float))
        assert (tmp_path / "l.csv").read_text().splitlines()[0].startswith("iteration,total,l1,dssim")

    def test_checkpoint_resume_matches_straight_run(self, tmp_path):
        ds, _ = _three_gaussian_dataset()
        kw = dict(total_iterations=24, densify=DensifyConfig(densify_from=4, interval=6, densify_until=20,
                                                              grad_threshold=1e-7))
        straight = train(ds, _quiet_config(**kw))
        ckpt = tmp_path / "ck"
        train(ds, _quiet_config(**{**kw, "total_iterations": 12, "checkpoint_interval": 6,
                                   "checkpoint_dir": str(ckpt)}))
        assert [p.name for p in sorted(ckpt.iterdir())] == ["ckpt_000006", "ckpt_000012"]
        state = io.load_checkpoint(io.latest_checkpoint(ckpt))
        assert state["iteration"] == 12 and len(state["log"]) == 12
        resumed = train(ds, _quiet_config(**kw), resume=state)
        assert np.array_equal(np.array(resumed.log), np.array(straight.log))
        for k in FIELDS:
            assert getattr(resumed.cloud, k).tobytes() == getattr(straight.cloud, k).tobytes()
        with pytest.raises(MissingFileError):
            io.load_checkpoint(tmp_path / "none")
        assert io.latest_checkpoint(tmp_path / "none") is None
