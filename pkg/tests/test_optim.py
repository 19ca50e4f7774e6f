import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from staticsplat.dataset import Dataset, Frame
from staticsplat.exceptions import DatasetError, InvalidParameterError
from staticsplat.gaussians import Camera, GaussianCloud
from staticsplat.losses import LossWeights, total_loss
from staticsplat.optim import (
    GROUPS,
    DensifyConfig,
    DensifyStats,
    LearningRates,
    OptimState,
    TrainConfig,
    adam_step,
    clone_candidates,
    densify_clone,
    densify_split,
    prune,
    smoothed,
    train,
    train_step,
)
from staticsplat.rasterizer import render
from staticsplat.synth import oracle_render

from conftest import random_cloud


def _zero_grads(cloud):
    return {g: np.zeros_like(getattr(cloud, g)) for g in GROUPS}


def _small_cloud(rng, n=6):
    return random_cloud(rng, n, sh_degree=1)


class TestAdam:
    def test_two_step_scalar_oracle(self):
        cloud = GaussianCloud.from_points([[0.0, 0.0, 0.0]], [0.5, 0.5, 0.5], 0.1, opacities=0.5, sh_degree=0)
        lr = LearningRates()
        state = OptimState.create(cloud, lr)
        gs = [0.3, -0.7]
        x, m, v = float(cloud.opacity_logits[0]), 0.0, 0.0
        for t, g in enumerate(gs, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.05 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-15)
            grads = _zero_grads(cloud)
            grads["opacity_logits"] = np.array([g])
            cloud, state = adam_step(state, grads, cloud)
        assert cloud.opacity_logits[0] == pytest.approx(x, abs=1e-15)
        # first Adam step moves by exactly lr
        assert x == pytest.approx(-0.05 + (-0.05 * ((0.9 * 0.03 - 0.07) / 0.19) / math.sqrt((0.999 * 0.09e-3 + 0.49e-3) / (1 - 0.999**2))), abs=1e-12)

    def test_zero_gradients(self, rng):
        cloud = _small_cloud(rng)
        cloud = cloud.replace(rotations=cloud.rotations / np.linalg.norm(cloud.rotations, axis=1, keepdims=True))
        state = OptimState.create(cloud)
        grads = _zero_grads(cloud)
        grads["positions"][0, 0] = 1.0
        cloud1, state = adam_step(state, grads, cloud)
        m_before = state.m["positions"][0, 0]
        cloud2, state = adam_step(state, _zero_grads(cloud1), cloud1)
        assert state.m["positions"][0, 0] == pytest.approx(0.9 * m_before)
        fresh = OptimState.create(cloud)
        cloud3, _ = adam_step(fresh, _zero_grads(cloud), cloud)
        for g in ("positions", "log_scales", "opacity_logits", "sh"):
            np.testing.assert_array_equal(getattr(cloud3, g), getattr(cloud, g))
        np.testing.assert_allclose(cloud3.rotations, cloud.rotations, atol=1e-15)

    def test_zero_learning_rate(self, rng):
        cloud = _small_cloud(rng)
        cloud = cloud.replace(rotations=cloud.rotations / np.linalg.norm(cloud.rotations, axis=1, keepdims=True))
        lr = LearningRates(position_init=0.0, position_final=0.0, rotation=0.0, scale=0.0, opacity=0.0, color=0.0)
        state = OptimState.create(cloud, lr)
        grads = {g: rng.normal(size=getattr(cloud, g).shape) for g in GROUPS}
        out, _ = adam_step(state, grads, cloud)
        for g in ("positions", "log_scales", "opacity_logits", "sh"):
            np.testing.assert_array_equal(getattr(out, g), getattr(cloud, g))
        np.testing.assert_allclose(out.rotations, cloud.rotations, atol=1e-15)

    def test_quaternions_renormalized(self, rng):
        cloud = _small_cloud(rng)
        state = OptimState.create(cloud)
        grads = {g: rng.normal(size=getattr(cloud, g).shape) for g in GROUPS}
        out, _ = adam_step(state, grads, cloud)
        np.testing.assert_allclose(np.linalg.norm(out.rotations, axis=1), 1.0, atol=1e-12)

    def test_non_finite_skips(self, rng, caplog):
        cloud = _small_cloud(rng)
        state = OptimState.create(cloud)
        grads = _zero_grads(cloud)
        grads["sh"][0, 0, 0] = np.nan
        out, state = adam_step(state, grads, cloud)
        assert out is cloud and state.skipped == 1 and state.step == 0
        assert "non-finite" in caplog.text

    def test_shape_checked(self, rng):
        cloud = _small_cloud(rng)
        grads = _zero_grads(cloud)
        grads["positions"] = np.zeros((2, 3))
        with pytest.raises(InvalidParameterError):
            adam_step(OptimState.create(cloud), grads, cloud)

    def test_position_schedule(self):
        lr = LearningRates()
        assert lr.position_lr(0, 2.0) == pytest.approx(3.2e-4)
        assert lr.position_lr(30000) == pytest.approx(1.6e-6)
        assert lr.position_lr(15000) == pytest.approx(1.6e-5)
        assert lr.position_lr(60000) == pytest.approx(1.6e-6)

    def test_color_group_rates(self, rng):
        state = OptimState.create(_small_cloud(rng))
        rates = state.group_lr("sh", 4)
        assert rates[0, 0, 0] == 2.5e-3 and rates[0, 1, 0] == pytest.approx(2.5e-3 / 20)


def _clone_oracle(cloud, grads, threshold, split):
    out = [i for i in range(len(cloud)) if grads[i] > threshold and max(np.exp(cloud.log_scales[i])) <= split]
    return cloud.concat(cloud.take(out)) if out else cloud


class TestDensify:
    cfg = DensifyConfig(grad_threshold=1e-3, scale_split_threshold=0.1)

    def test_clone_below_threshold(self, rng):
        cloud = random_cloud(rng, 10, scale=(0.01, 0.05))
        assert densify_clone(cloud, np.full(10, 1e-4), self.cfg) is cloud

    def test_clone_single(self, rng):
        cloud = random_cloud(rng, 5, scale=(0.01, 0.05))
        grads = np.zeros(5)
        grads[2] = 0.5
        out = densify_clone(cloud, grads, self.cfg, iteration=7)
        assert len(out) == 6
        np.testing.assert_array_equal(out.positions[:5], cloud.positions)
        np.testing.assert_array_equal(out.positions[5], cloud.positions[2])
        assert out.tags[5] == 7

    def test_clone_matches_filter_oracle(self, rng):
        cloud = random_cloud(rng, 60, scale=(0.02, 0.2))
        grads = rng.uniform(0, 2e-3, size=60)
        out = densify_clone(cloud, grads, self.cfg)
        ref = _clone_oracle(cloud, grads, 1e-3, 0.1)
        for g in GROUPS:
            np.testing.assert_array_equal(getattr(out, g), getattr(ref, g))

    def test_clone_offset_against_gradient(self, rng):
        cloud = random_cloud(rng, 3, scale=(0.01, 0.05))
        grads = np.array([1.0, 0.0, 0.0])
        dirs = np.zeros((3, 3))
        dirs[0] = [0.0, 3.0, 4.0]
        out = densify_clone(cloud, grads, self.cfg, directions=dirs, step=0.01)
        np.testing.assert_allclose(out.positions[3] - cloud.positions[0], [0.0, -0.006, -0.008])

    def test_split_none(self, rng):
        cloud = random_cloud(rng, 8, scale=(0.01, 0.05))
        assert densify_split(cloud, np.ones(8), self.cfg) is cloud

    def test_split_single(self, rng):
        cloud = random_cloud(rng, 5, scale=(0.01, 0.05))
        ls = cloud.log_scales.copy()
        ls[1] = np.log([0.3, 0.2, 0.05])
        cloud = cloud.replace(log_scales=ls)
        grads = np.zeros(5)
        grads[1] = 1.0
        out = densify_split(cloud, grads, self.cfg, rng=np.random.default_rng(0))
        assert len(out) == 6
        np.testing.assert_array_equal(out.positions[:4], cloud.positions[[0, 2, 3, 4]])
        np.testing.assert_allclose(out.scales()[4:], np.tile([0.3, 0.2, 0.05], (2, 1)) / 1.6)
        np.testing.assert_array_equal(out.sh[4], cloud.sh[1])

    def test_split_children_sample_parent_density(self):
        rng = np.random.default_rng(5)
        q = np.array([0.9, 0.2, -0.3, 0.1])
        scales = np.array([0.4, 0.2, 0.15])
        parent = GaussianCloud.from_points([[0.3, -0.2, 1.0]], [0.5, 0.5, 0.5], scales[None], sh_degree=0,
                                           rotations=[q])
        samples = []
        for _ in range(1000):
            out = densify_split(parent, np.ones(1), self.cfg, rng=rng)
            samples.append(out.positions)
        samples = np.concatenate(samples)
        cov = parent.covariances()[0]
        se = np.sqrt(np.diag(cov) / len(samples))
        err = np.abs(samples.mean(axis=0) - parent.positions[0])
        assert np.all(err <= 3 * se)
        np.testing.assert_allclose(np.cov(samples.T), cov, atol=0.15 * cov.max())

    def test_prune(self, rng):
        cloud = random_cloud(rng, 6, opacity=(0.0, 2.0))
        cfg = DensifyConfig()
        assert prune(cloud, cfg) is cloud
        logits = cloud.opacity_logits.copy()
        logits[3] = -8.0
        out = prune(cloud.replace(opacity_logits=logits), cfg)
        assert len(out) == 5
        np.testing.assert_array_equal(out.positions, np.delete(cloud.positions, 3, axis=0))

    def test_prune_by_radius(self, rng):
        cloud = random_cloud(rng, 4, opacity=(0.0, 2.0))
        radii = np.array([3, 70, 5, 64])
        assert len(prune(cloud, DensifyConfig(), radii=radii, radius_bound=64)) == 3
        assert len(prune(cloud, DensifyConfig(max_screen_radius=4), radii=radii, radius_bound=64)) == 1

    def test_prune_clone_state_lockstep(self, rng):
        cloud = random_cloud(rng, 20, scale=(0.01, 0.2), opacity=(-7, 2))
        state = OptimState.create(cloud)
        for g in GROUPS:
            state.m[g] = rng.normal(size=state.m[g].shape)
        marker = state.m["opacity_logits"].copy()
        keep = np.flatnonzero(cloud.opacities() >= 0.005)
        out = prune(cloud, DensifyConfig(), state=state)
        np.testing.assert_array_equal(state.m["opacity_logits"], marker[keep])
        assert state.congruent_with(out)
        out = densify_clone(out, np.ones(len(out)), self.cfg, state=state)
        assert state.congruent_with(out)
        out = densify_split(out, np.ones(len(out)), self.cfg, state=state)
        assert state.congruent_with(out)

    def test_config_validation(self):
        with pytest.raises(InvalidParameterError):
            DensifyConfig(grad_threshold=0)
        with pytest.raises(InvalidParameterError):
            DensifyConfig(interval=0)


class CongruenceMachine(RuleBasedStateMachine):
    def __init__(self):
        super().__init__()
        self.rng = np.random.default_rng(0)
        self.cloud = random_cloud(self.rng, 12, sh_degree=1, scale=(0.01, 0.3), opacity=(-6, 2))
        self.state = OptimState.create(self.cloud)
        self.cfg = DensifyConfig(grad_threshold=0.5, scale_split_threshold=0.1, opacity_prune_threshold=0.01)

    def _grads(self, p):
        return (self.rng.uniform(size=len(self.cloud)) < p).astype(float)

    @rule(p=st.floats(0, 1))
    def clone(self, p):
        self.cloud = densify_clone(self.cloud, self._grads(p), self.cfg, state=self.state)

    @rule(p=st.floats(0, 1))
    def split(self, p):
        if len(self.cloud) < 200:
            self.cloud = densify_split(self.cloud, self._grads(p), self.cfg, rng=self.rng, state=self.state)

    @rule()
    def prune(self):
        self.cloud = prune(self.cloud, self.cfg, state=self.state)

    @rule()
    def step(self):
        grads = {g: self.rng.normal(size=getattr(self.cloud, g).shape) for g in GROUPS}
        self.cloud, self.state = adam_step(self.state, grads, self.cloud)

    @invariant()
    def congruent(self):
        assert self.state.congruent_with(self.cloud)


TestCongruence = CongruenceMachine.TestCase
TestCongruence.settings = settings(max_examples=25, stateful_step_count=15, deadline=None)


def _cams(n, w=24, h=20):
    out = []
    for k in range(n):
        a = -np.pi / 2 + (k - (n - 1) / 2) * 0.25
        eye = [2.5 * np.cos(a), 2.5 * np.sin(a), 0.6]
        out.append(Camera.look_at(eye, [0, 0, 0], width=w, height=h, fx=w * 1.1))
    return out


def _three_gaussian_dataset():
    truth = GaussianCloud.from_points(
        [[-0.35, 0.0, 0.1], [0.3, 0.1, -0.1], [0.0, -0.1, 0.35]],
        [[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.2, 0.3, 0.9]],
        [[0.25, 0.2, 0.15], [0.2, 0.3, 0.2], [0.18, 0.18, 0.25]],
        opacities=0.85, sh_degree=0,
    )
    frames = [Frame(f"v{k}", oracle_render(truth, cam, (0.1, 0.1, 0.1)).color, cam) for k, cam in enumerate(_cams(4))]
    start = truth.replace(positions=truth.positions + [[0.06, -0.04, 0.05]] * 3,
                          opacity_logits=np.zeros(3), sh=truth.sh * 0.4)
    return Dataset(frames=frames, initial_cloud=start), truth


def _quiet_config(**kw):
    base = dict(total_iterations=200, use_masks=False, propagation_triggers=(), background=(0.1, 0.1, 0.1),
                densify=DensifyConfig(densify_from=10**9))
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_zero_iterations(self):
        ds, _ = _three_gaussian_dataset()
        res = train(ds, _quiet_config(total_iterations=0))
        for g in GROUPS:
            np.testing.assert_array_equal(getattr(res.cloud, g), getattr(ds.initial_cloud, g))
        assert res.log == []

    def test_three_gaussians_converge(self):
        ds, _ = _three_gaussian_dataset()
        res = train(ds, _quiet_config())
        l1 = [row[2] for row in res.log]
        assert len(l1) == 200
        assert np.mean(l1[-10:]) < l1[0]
        s = smoothed([row[1] for row in res.log])
        assert s[-1] <= 0.9 * s[0]

    def test_deterministic(self):
        ds, _ = _three_gaussian_dataset()
        cfg = _quiet_config(total_iterations=40, densify=DensifyConfig(densify_from=5, interval=10, grad_threshold=1e-6))
        a, b = train(ds, cfg), train(ds, cfg)
        assert a.log == b.log
        for g in GROUPS:
            assert getattr(a.cloud, g).tobytes() == getattr(b.cloud, g).tobytes()
        c = train(ds, replace(cfg, seed=3))
        assert c.log != a.log

    def test_needs_two_views(self):
        ds, _ = _three_gaussian_dataset()
        with pytest.raises(DatasetError):
            train(Dataset(frames=ds.frames[:1], initial_cloud=ds.initial_cloud), _quiet_config())

    def test_missing_mask_aborts(self):
        ds, _ = _three_gaussian_dataset()
        with pytest.raises(DatasetError):
            train(ds, _quiet_config(use_masks=True))

    def test_empty_cloud_rejected(self):
        ds, _ = _three_gaussian_dataset()
        with pytest.raises(DatasetError):
            train(ds, _quiet_config(), initial=GaussianCloud.empty(0))

    def test_callback_and_log_columns(self):
        ds, _ = _three_gaussian_dataset()
        seen = []
        res = train(ds, _quiet_config(total_iterations=5), callback=lambda it, cloud, terms: seen.append(it))
        assert seen == [1, 2, 3, 4, 5]
        assert [len(r) for r in res.log] == [8] * 5 and res.log[-1][7] == 3

    def test_densification_grows_cloud(self):
        ds, _ = _three_gaussian_dataset()
        cfg = _quiet_config(total_iterations=30, densify=DensifyConfig(densify_from=5, interval=10, grad_threshold=1e-7))
        res = train(ds, cfg)
        assert len(res.cloud) > 3
        assert res.state.congruent_with(res.cloud)
        res.cloud.validate(iteration=30)

    @pytest.mark.parametrize("kw", [dict(mask_mode="bogus"), dict(total_iterations=100, propagation_triggers=(50, 40)),
                                    dict(total_iterations=100, propagation_triggers=(100,)), dict(total_iterations=-1)])
    def test_config_validation(self, kw):
        with pytest.raises(InvalidParameterError):
            TrainConfig(**kw)

    def test_default_triggers_filtered(self):
        assert TrainConfig(total_iterations=30000).triggers() == (3000, 6000, 9000)
        assert TrainConfig(total_iterations=5000).triggers() == (3000,)
        assert TrainConfig(total_iterations=30000, propagation_stages=2).triggers() == (3000, 6000)


class TestMaskedPixels:
    def _setup(self):
        cam = Camera(20, 20, 12, 10, np.eye(3), np.zeros(3), 24, 20)
        # one Gaussian on the left (masked), one on the right
        cloud = GaussianCloud.from_points([[-0.7, 0, 2.0], [0.5, 0, 2.0]], [[0.9, 0.1, 0.1], [0.1, 0.9, 0.1]],
                                          [[0.06, 0.06, 0.06]] * 2, opacities=0.8, sh_degree=0)
        mask = np.ones((20, 24), np.uint8)
        mask[:, :12] = 0
        target = np.full((20, 24, 3), 0.3)
        return cam, cloud, mask, target

    def test_gradients_zero_on_masked_pixels(self):
        cam, cloud, mask, target = self._setup()
        out = render(cloud, cam)
        _, g = total_loss(out, target, cloud, LossWeights(), validity=mask.astype(float), grad=True)
        assert np.all(g["color"][mask == 0] == 0)
        assert np.any(g["color"][mask == 1] != 0)

    @pytest.mark.parametrize("mode", ["exclude", "both", "replace"])
    def test_probe(self, mode):
        cam, cloud, mask, target = self._setup()
        assert render(cloud.take([0]), cam).alpha[:, 12:].max() == 0.0
        frame = Frame("f", target, cam, mask)
        cfg = TrainConfig(total_iterations=1, mask_mode=mode, propagation_triggers=())
        base = train_step(cloud, frame, cfg, mask, 0)[0]
        sh = cloud.sh.copy()
        sh[0] += 0.7
        moved = cloud.positions.copy()
        moved[0] += [0.02, -0.05, 0.0]
        for probe in (cloud.replace(sh=sh), cloud.replace(positions=moved)):
            terms, grads, _, _ = train_step(probe, frame, cfg, mask, 0)
            assert terms.l1 == base.l1 and terms.dssim == base.dssim
        grads = train_step(cloud, frame, cfg, mask, 0)[1]
        assert np.all(grads["sh"][0] == 0) and np.all(grads["positions"][0] == 0)
