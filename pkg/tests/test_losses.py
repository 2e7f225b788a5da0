import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import front_camera, random_camera, random_model
from surfelgs.losses import (DistortionAccumulators, LossWeights, depth_normals,
                             distortion_absolute, distortion_nested, distortion_single_pass,
                             ndc_depth, ndc_depth_grad, normal_consistency_loss, normal_target,
                             photometric_loss, ssim, total_loss)
from surfelgs.rasterizer import render


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=0, max_size=64))
def test_single_pass_distortion_equals_nested(pairs):
    w = [p[0] for p in pairs]
    m = [p[1] for p in pairs]
    a, b = distortion_single_pass(w, m), distortion_nested(w, m)
    assert abs(a - b) <= 1e-12 * max(abs(b), 1e-300) or abs(a - b) < 1e-15


def test_distortion_zero_for_single_depth():
    # the expanded form cancels to rounding level only
    assert distortion_single_pass([0.3, 0.5, 0.2], [0.7, 0.7, 0.7]) == pytest.approx(0.0, abs=1e-15)
    acc = DistortionAccumulators()
    acc.step(0.5, 0.1)
    assert acc.step(0.5, 0.3) == pytest.approx(0.25 * 0.04)
    assert distortion_absolute([0.5, 0.5], [0.1, 0.3]) == pytest.approx(0.25 * 0.2)


def test_rendered_distortion_matches_replay(rng):
    m = random_model(rng, 40)
    cam = random_camera(rng, size=32)
    out = render(m, cam)
    iy, ix = np.unravel_index(np.argmax(out.n_contrib), out.n_contrib.shape)
    lst = out.replay.pixel(iy, ix)
    w = [e[1] for e in lst]
    mz = [ndc_depth(e[2], cam.near, cam.far) for e in lst]
    assert out.distortion[iy, ix] == pytest.approx(distortion_nested(w, mz), rel=1e-10, abs=1e-300)


def test_ndc_depth_ends_and_slope():
    assert ndc_depth(0.2, 0.2, 100.0) == pytest.approx(0.0)
    assert ndc_depth(100.0, 0.2, 100.0) == pytest.approx(1.0)
    z, h = 3.0, 1e-6
    num = (ndc_depth(z + h, 0.2, 100) - ndc_depth(z - h, 0.2, 100)) / (2 * h)
    assert ndc_depth_grad(z, 0.2, 100) == pytest.approx(num, rel=1e-7)


def test_ssim_identity_and_gradient(rng):
    a = rng.uniform(size=(12, 10, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    b = rng.uniform(size=a.shape)
    _, g = ssim(a, b, return_grad=True)
    h = 1e-6
    for idx in [(0, 0, 0), (5, 4, 1), (11, 9, 2), (6, 0, 2)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        assert g[idx] == pytest.approx((ssim(ap, b) - ssim(am, b)) / (2 * h), rel=1e-5, abs=1e-10)
    with pytest.raises(ValueError):
        ssim(a, b[:5])


def test_photometric_loss_gradient(rng):
    a = rng.uniform(size=(8, 8, 3))
    b = rng.uniform(size=(8, 8, 3))
    v, g = photometric_loss(a, b, 0.2)
    assert v == pytest.approx(0.8 * np.abs(a - b).mean() + 0.2 * (1 - ssim(a, b)) / 2)
    h = 1e-7
    for idx in [(1, 2, 0), (7, 7, 2)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        num = (photometric_loss(ap, b, 0.2)[0] - photometric_loss(am, b, 0.2)[0]) / (2 * h)
        assert g[idx] == pytest.approx(num, rel=1e-5)


def test_depth_normals_of_tilted_plane():
    cam = front_camera(size=24)
    # plane z_cam = 3 + 0.5 x_cam: depth along each ray
    rays = cam.pixel_rays()
    depth = 3.0 / (1 - 0.5 * rays[..., 0])
    n, valid = depth_normals(depth, cam)
    expect = np.array([0.5, 0, -1]) / np.linalg.norm([0.5, 0, -1])
    assert valid[1:-1, 1:-1].all() and not valid[0].any() and not valid[:, -1].any()
    assert np.allclose(n[valid], expect, atol=1e-12)
    depth[5, 5] = 0
    _, valid = depth_normals(depth, cam)
    assert not valid[5, 5] and not valid[5, 6] and not valid[4, 5]


def test_normal_loss_equals_per_splat_sum(rng):
    m = random_model(rng, 30, opacity=(0.8, 0.99))
    cam = random_camera(rng, size=32)
    out = render(m, cam)
    tgt = normal_target(out, cam)
    value, d_alpha, d_nsum = normal_consistency_loss(out, tgt)
    assert tgt.mask.any()
    total = 0.0
    for iy, ix in zip(*np.nonzero(tgt.mask)):
        for sid, w, *_ in out.replay.pixel(iy, ix):
            total += w * (1 - out.proj.normals[sid] @ tgt.normals[iy, ix])
    assert value == pytest.approx(total / out.alpha.size, rel=1e-10)
    assert d_alpha.shape == out.alpha.shape and d_nsum.shape == out.normal_sum.shape


def test_total_loss_composition(rng):
    m = random_model(rng, 20)
    cam = random_camera(rng, size=32)
    out = render(m, cam)
    target = rng.uniform(size=(32, 32, 3))
    w = LossWeights(10.0, 0.5, 0.2)
    t = total_loss(out, target, cam, w)
    assert t.total == pytest.approx(t.photometric + 10.0 * t.distortion + 0.5 * t.normal)
    only_c = total_loss(out, target, cam, w, use_distortion=False, use_normal=False)
    assert only_c.total == t.photometric and set(only_c.grads) == {"color"}
    with pytest.raises(ValueError):
        LossWeights(-1.0)
