import numpy as np
import pytest

from conftest import random_camera, random_rotation, random_splat
from surfelgs.geometry import (CameraModel, Degenerate, SplatGeometry, build_splat_transform,
                               filtered_value, intersect, pixel_planes, quat_to_rotmat, ray_splat,
                               rotmat_grad_to_quat, screen_bounds, transform_planes, world_to_screen)
from surfelgs.scene_io import look_at


def ray_plane_oracle(g, cam, x, y):
    """Textbook ray / plane intersection in world space."""
    d = np.array([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0]) @ cam.rotation
    o = cam.center
    n = g.normal
    t = n @ (g.center - o) / (n @ d)
    X = o + t * d
    return g.tangent_u @ (X - g.center) / g.scale_u, g.tangent_v @ (X - g.center) / g.scale_v, t


def sample_triple(rng):
    while True:
        g, cam = random_splat(rng), random_camera(rng)
        x, y = rng.uniform(0, cam.width), rng.uniform(0, cam.height)
        d = np.array([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0]) @ cam.rotation
        if abs(g.normal @ d) / np.linalg.norm(d) > 0.05:
            return g, cam, x, y


def test_intersection_matches_ray_plane(rng):
    for _ in range(200):
        g, cam, x, y = sample_triple(rng)
        u, v, z, val = ray_splat(g, cam, x, y)
        uo, vo, zo = ray_plane_oracle(g, cam, x, y)
        assert abs(u - uo) <= 1e-9 * max(1, abs(uo))
        assert abs(v - vo) <= 1e-9 * max(1, abs(vo))
        assert abs(z - zo) <= 1e-9 * max(1, abs(zo))
        assert val == pytest.approx(np.exp(-0.5 * (u * u + v * v)))


def test_fronto_parallel_disk_center_hit():
    E = np.eye(4)
    E[2, 3] = 2.0
    cam = CameraModel(50, 50, 16, 16, 32, 32, E)
    g = SplatGeometry([0, 0, 0], [1, 0, 0], [0, 1, 0], 0.3, 0.3)
    u, v, z, val = ray_splat(g, cam, 16.0, 16.0)
    assert (u, v, z, val) == pytest.approx((0.0, 0.0, 2.0, 1.0), abs=1e-15)
    # one scale away along u: 0.3 world units at depth 2 is 7.5 pixels
    u, v, _, val = ray_splat(g, cam, 23.5, 16.0)
    assert u == pytest.approx(1.0) and v == pytest.approx(0.0, abs=1e-12)
    assert val == pytest.approx(np.exp(-0.5))


def test_edge_on_raises_degenerate():
    E = np.eye(4)
    E[2, 3] = 2.0
    cam = CameraModel(50, 50, 16, 16, 32, 32, E)
    g = SplatGeometry([0, 0, 0], [1, 0, 0], [0, 0, 1], 0.3, 0.3)   # plane contains the view axis
    with pytest.raises(Degenerate):
        ray_splat(g, cam, 16.0, 16.0)


def test_intersect_degenerate_threshold():
    with pytest.raises(Degenerate):
        intersect(np.array([1.0, 2.0, 0, 3.0]), np.array([2.0, 4.0, 0, 1.0]))
    u, v = intersect(np.array([1.0, 0, 0, -2.0]), np.array([0, 1.0, 0, -3.0]))
    assert (u, v) == (2.0, 3.0)


def test_multi_view_consistency(rng):
    g = random_splat(rng, spread=0.0)
    world = g.center + 0.7 * g.scale_u * g.tangent_u - 0.4 * g.scale_v * g.tangent_v
    vals = []
    for _ in range(12):
        cam = random_camera(rng)
        (x, y), _ = cam.project(world)
        vals.append(ray_splat(g, cam, x, y)[3])
    assert np.ptp(vals) <= 1e-9
    assert vals[0] == pytest.approx(np.exp(-0.5 * (0.7 ** 2 + 0.4 ** 2)), abs=1e-9)


def test_filtered_value_floor():
    assert filtered_value(0.0, (3.0, 4.0), (3.0, 4.0)) == 1.0
    assert filtered_value(0.9, (10.0, 0.0), (0.0, 0.0)) == 0.9
    s = np.sqrt(2) / 2
    assert filtered_value(0.0, (1.0, 0.0), (0.0, 0.0)) == pytest.approx(np.exp(-1 / (2 * s * s)))
    with pytest.raises(ValueError):
        filtered_value(0.0, (0, 0), (0, 0), sigma=0.0)


def test_plane_transform_is_inverse_transpose():
    rng = np.random.default_rng(3)
    g, cam = random_splat(rng), random_camera(rng)
    W, H = world_to_screen(cam), build_splat_transform(g)
    hx, hy = pixel_planes(10.5, 20.5)
    hu, hv = transform_planes(W, H, hx, hy)
    # a point on the splat plane that lies on both screen planes maps to x=10.5, y=20.5
    u, v = intersect(hu, hv)
    s = W @ H @ np.array([u, v, 1.0, 1.0])
    assert s[0] / s[3] == pytest.approx(10.5) and s[1] / s[3] == pytest.approx(20.5)


def test_quaternion_rotation_and_gradient(rng):
    q = rng.normal(size=(5, 4))
    R = quat_to_rotmat(q)
    assert np.allclose(R @ np.swapaxes(R, 1, 2), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0)
    G = rng.normal(size=(5, 3, 3))
    analytic = rotmat_grad_to_quat(q, G)
    h = 1e-6
    for k in range(4):
        dq = np.zeros(4)
        dq[k] = h
        num = (np.sum(quat_to_rotmat(q + dq) * G, (1, 2)) - np.sum(quat_to_rotmat(q - dq) * G, (1, 2))) / (2 * h)
        assert np.allclose(analytic[:, k], num, atol=1e-8)


def test_splat_geometry_validation():
    with pytest.raises(ValueError):
        SplatGeometry([0, 0, 0], [1, 0, 0], [1, 0, 0], 0.1, 0.1)
    with pytest.raises(ValueError):
        SplatGeometry([0, 0, 0], [2, 0, 0], [0, 1, 0], 0.1, 0.1)
    with pytest.raises(ValueError):
        SplatGeometry([0, 0, 0], [1, 0, 0], [0, 1, 0], 0.0, 0.1)


def test_camera_validation():
    E = np.eye(4)
    E[0, 0] = 1.1
    with pytest.raises(ValueError):
        CameraModel(10, 10, 5, 5, 10, 10, E)
    with pytest.raises(ValueError):
        CameraModel(10, 10, 5, 5, 10, 10, np.eye(4), near=1.0, far=0.5)
    with pytest.raises(ValueError):
        CameraModel(10, 10, 5, 5, 0, 10)
    cam = CameraModel(10, 10, 5, 5, 10, 10, look_at([0, -3, 0]))
    assert np.allclose(cam.center, [0, -3, 0])


def test_screen_bounds_contain_footprint(rng):
    for _ in range(30):
        g, cam = random_splat(rng), random_camera(rng)
        rect = screen_bounds(g, cam)
        if rect is None:
            continue
        x0, y0, x1, y1 = rect
        # every pixel whose 3-sigma ellipse value or low-pass floor is significant lies inside
        for iy in range(cam.height):
            for ix in range(cam.width):
                try:
                    u, v, _, _ = ray_splat(g, cam, ix + 0.5, iy + 0.5)
                except Degenerate:
                    continue
                if u * u + v * v < 8.9 and cam.to_camera(g.center)[2] > cam.near:
                    assert x0 <= ix <= x1 and y0 <= iy <= y1


def test_screen_bounds_culls_behind_camera():
    cam = CameraModel(50, 50, 16, 16, 32, 32, np.eye(4))
    g = SplatGeometry([0, 0, -1.0], [1, 0, 0], [0, 1, 0], 0.3, 0.3)
    assert screen_bounds(g, cam) is None
    far_off = SplatGeometry([100.0, 0, 2.0], [1, 0, 0], [0, 1, 0], 0.1, 0.1)
    assert screen_bounds(far_off, cam) is None
    with pytest.raises(ValueError):
        screen_bounds(far_off, cam, k_sigma=0)
