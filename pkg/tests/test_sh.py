import numpy as np
import pytest

from surfelgs.sh import C0, eval_sh, num_coeffs, rgb_to_sh0, sh_basis


def sphere_quadrature(n=12):
    """Gauss-Legendre in cos(theta) x uniform phi; exact for polynomials of degree < 2n."""
    x, w = np.polynomial.legendre.leggauss(n)
    phi = 2 * np.pi * np.arange(2 * n) / (2 * n)
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1 - ct ** 2)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], -1).reshape(-1, 3)
    weights = np.repeat(w, 2 * n) * (2 * np.pi / (2 * n))
    return dirs, weights


def test_basis_is_orthonormal():
    dirs, w = sphere_quadrature()
    Y, _ = sh_basis(3, dirs)
    gram = (Y * w[:, None]).T @ Y
    assert np.allclose(gram, np.eye(16), atol=1e-12)


def test_basis_gradient_finite_difference(rng):
    d = rng.normal(size=(6, 3))
    _, dY = sh_basis(3, d, with_grad=True)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        num = (sh_basis(3, d + e)[0] - sh_basis(3, d - e)[0]) / (2 * h)
        assert np.allclose(dY[:, :, k], num, atol=1e-8)


def test_degree_zero_and_offset():
    rgb = np.array([[0.1, 0.5, 0.9]])
    sh = np.zeros((1, 16, 3))
    sh[:, 0] = rgb_to_sh0(rgb)
    for deg in range(4):
        assert np.allclose(eval_sh(deg, sh, np.array([[0, 0, 1.0]])), rgb)
    assert eval_sh(0, np.zeros((1, 1, 3)), np.array([[1.0, 0, 0]]))[0] == pytest.approx([0.5] * 3)
    assert C0 == pytest.approx(0.5 / np.sqrt(np.pi))


def test_higher_degree_is_view_dependent(rng):
    sh = rng.normal(size=(1, 16, 3))
    a = eval_sh(3, sh, np.array([[1.0, 0, 0]]))
    b = eval_sh(3, sh, np.array([[-1.0, 0, 0]]))
    assert not np.allclose(a, b)
    assert num_coeffs(3) == 16
    with pytest.raises(ValueError):
        sh_basis(4, np.zeros((1, 3)))
