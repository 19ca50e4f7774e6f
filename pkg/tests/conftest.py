import numpy as np
import pytest

from staticsplat.gaussians import Camera, GaussianCloud


def random_cloud(rng, n, sh_degree=3, spread=0.8, scale=(0.03, 0.25), opacity=(-2.0, 2.5), sh_std=0.3):
    k = (sh_degree + 1) ** 2
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, size=(n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(*scale, size=(n, 3))),
        opacity_logits=rng.uniform(*opacity, size=n),
        sh=rng.normal(size=(n, k, 3)) * sh_std,
        sh_degree=sh_degree,
    )


def random_camera(rng, width, height):
    eye = rng.normal(size=3) * 0.1 + np.array([0.0, -3.0, 0.5])
    return Camera.look_at(eye, [0.0, 0.0, 0.0], width=width, height=height, fx=width * 0.9)


def random_scene(rng, n, width, height, **kw):
    return random_cloud(rng, n, **kw), random_camera(rng, width, height)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose_camera(rng, width=64, height=48, f=60.0):
    rot = random_rotation(rng)
    return Camera(fx=f, fy=f * 1.1, cx=width / 2 - 0.3, cy=height / 2 + 0.2, rotation=rot,
                  translation=rng.normal(size=3), width=width, height=height)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
