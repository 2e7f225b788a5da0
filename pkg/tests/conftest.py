import time

import numpy as np
import pytest

from surfelgs.geometry import CameraModel, SplatGeometry
from surfelgs.model import SplatModel
from surfelgs.meshing import TriangleMesh, chamfer_distance, mesh_from_model
from surfelgs.scene_io import generate_synthetic_scene, look_at
from surfelgs.trainer import TrainConfig, train


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_splat(rng, spread=0.5):
    R = random_rotation(rng)
    return SplatGeometry(rng.normal(0, spread, 3), R[:, 0], R[:, 1], *rng.uniform(0.05, 0.5, 2))


def random_camera(rng, size=64, dist=(2.5, 4.0)):
    d = rng.normal(size=3)
    eye = rng.uniform(*dist) * d / np.linalg.norm(d)
    f = rng.uniform(0.8, 1.5) * size
    return CameraModel(f, f, size / 2, size / 2, size, size, look_at(eye))


def random_model(rng, n, spread=0.4, sh_degree=0, opacity=(0.3, 0.95)):
    q = rng.normal(size=(n, 4))
    sh = rng.normal(0, 0.3, (n, (sh_degree + 1) ** 2, 3))
    op = rng.uniform(*opacity, n)
    return SplatModel(rng.normal(0, spread, (n, 3)), q, np.log(rng.uniform(0.03, 0.25, (n, 2))),
                      np.log(op / (1 - op)), sh, sh_degree=sh_degree)


def front_camera(size=32, dist=3.0, f=None):
    """Camera on the -z axis looking at the origin (world and camera axes aligned)."""
    E = np.eye(4)
    E[2, 3] = dist
    f = size if f is None else f
    return CameraModel(f, f, size / 2, size / 2, size, size, E)


def facing_model(depths, opacities, colors, scale=0.5, center_xy=(0.0, 0.0)):
    """Splats parallel to the image plane of ``front_camera`` at world z = depth - 3."""
    n = len(depths)
    means = np.zeros((n, 3))
    means[:, :2] = center_xy
    means[:, 2] = np.asarray(depths, float) - 3.0
    op = np.asarray(opacities, float)
    sh = np.zeros((n, 1, 3))
    sh[:, 0] = (np.asarray(colors, float) - 0.5) / 0.28209479177387814
    return SplatModel(means, np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 2), np.log(scale)),
                      np.log(op / (1 - op)), sh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------ shared sphere trainings (slow)

SPHERE_DIAMETER = 2.0
SPHERE_CONFIG = dict(max_splats=6000)


@pytest.fixture(scope="session")
def sphere():
    ds = generate_synthetic_scene("sphere", n_views=24, resolution=128, seed=0)
    gt = TriangleMesh(ds.ground_truth.mesh_vertices, ds.ground_truth.mesh_faces)
    return ds, gt


def _train_and_mesh(ds, gt, **overrides):
    cfg = TrainConfig.for_iterations(3000, **SPHERE_CONFIG, **overrides)
    t0 = time.perf_counter()
    st = train(ds, cfg)
    seconds = time.perf_counter() - t0
    cams = [ds.cameras[i] for i in ds.train_idx]
    res = dict(state=st, config=cfg, train_seconds=seconds)
    for mode in ("median", "expected"):
        t1 = time.perf_counter()
        mesh, _ = mesh_from_model(st.model, cams, mode)
        res[mode] = chamfer_distance(mesh, gt) if not mesh.empty else np.inf
        res[mode + "_seconds"] = time.perf_counter() - t1
    return res


@pytest.fixture(scope="session")
def sphere_full(sphere):
    return _train_and_mesh(*sphere)


@pytest.fixture(scope="session")
def sphere_no_normal(sphere):
    return _train_and_mesh(*sphere, use_normal=False)


# PASS/FAIL lines recorded by test_acceptance.py, repeated in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
