"""Training objectives: photometric L1 + D-SSIM, depth distortion, normal consistency.

Every loss returns its value together with the gradient on the rendered
channels it reads, ready to hand to :func:`surfelgs.gradients.render_backward`.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    alpha_d: float = 1000.0   # depth distortion (bounded scenes)
    beta_n: float = 0.05      # normal consistency
    lambda_ssim: float = 0.2

    def __post_init__(self):
        if min(self.alpha_d, self.beta_n, self.lambda_ssim) < 0 or self.lambda_ssim > 1:
            raise ValueError("loss weights must be >= 0 and lambda_ssim <= 1")


@dataclass
class DistortionAccumulators:
    """Running state along one ray: A = sum w, mu = weighted mean of m and
    V = sum w (m - mu)^2. Centered sums avoid the cancellation of the raw
    moment form m^2 A + sum w m^2 - 2 m sum w m."""

    A: float = 0.0
    mu: float = 0.0
    V: float = 0.0

    def step(self, w, m):
        """Distortion increment of appending (w, m), then absorb it."""
        dm = m - self.mu
        e = self.A * dm * dm + self.V
        self.A += w
        if self.A > 0:
            self.mu += dm * w / self.A
        self.V += w * dm * (m - self.mu)
        return w * e


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _blur(img, win):
    out = correlate1d(img, win, axis=0, mode="constant")
    return correlate1d(out, win, axis=1, mode="constant")


def ssim(a, b, return_grad=False):
    """Mean SSIM over pixels and channels; zero-padded 11x11 Gaussian window.

    With ``return_grad`` also returns d(mean SSIM)/d(a).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    win = gaussian_window()
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    e_aa, e_bb, e_ab = _blur(a * a, win), _blur(b * b, win), _blur(a * b, win)
    s_aa = e_aa - mu_a * mu_a
    s_bb = e_bb - mu_b * mu_b
    s_ab = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * s_ab + SSIM_C2
    B1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    B2 = s_aa + s_bb + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(smap.mean())
    if not return_grad:
        return value
    up = 1.0 / smap.size
    inv = 1.0 / (B1 * B2)
    # partials with respect to mu_a, E[a^2], E[ab]
    d_mu = up * (2 * mu_b * A2 * inv - 2 * mu_b * A1 * inv - smap / B1 * 2 * mu_a + smap / B2 * 2 * mu_a)
    d_eaa = up * (-smap / B2)
    d_eab = up * (2 * A1 * inv)
    grad = _blur(d_mu, win) + 2 * a * _blur(d_eaa, win) + b * _blur(d_eab, win)
    return value, grad


def photometric_loss(rendered, target, lambda_ssim=0.2):
    """(1 - lambda) * L1 + lambda * (1 - SSIM) / 2, with d/d(rendered)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same(rendered, target)
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    grad = (1 - lambda_ssim) * np.sign(diff) / diff.size
    value = (1 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, ds = ssim(rendered, target, return_grad=True)
        value += lambda_ssim * (1 - s) / 2
        grad = grad - lambda_ssim / 2 * ds
    return value, grad


def ndc_depth(z, near, far):
    return far * (z - near) / (z * (far - near))


def ndc_depth_grad(z, near, far):
    return far * near / ((far - near) * z * z)


def distortion_single_pass(w, m):
    """sum_i w_i (A_{i-1} (m_i - mu_{i-1})^2 + V_{i-1}) in one sweep."""
    acc = DistortionAccumulators()
    total = 0.0
    for wi, mi in zip(w, m):
        total += acc.step(wi, mi)
    return total


def distortion_nested(w, m):
    """Direct O(N^2) double sum; used as an oracle."""
    total = 0.0
    for i in range(len(w)):
        for j in range(i):
            total += w[i] * w[j] * (m[i] - m[j]) ** 2
    return total


def distortion_absolute(w, m):
    """Variant with |m_i - m_j| instead of the square (study flag only)."""
    w = np.asarray(w, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    return float(np.sum(np.tril(np.outer(w, w) * np.abs(m[:, None] - m[None, :]), -1)))


def depth_distortion_loss(out, weight=1.0):
    """Mean per-pixel distortion of a render; gradient lands on the distortion channel."""
    value = float(out.distortion.mean())
    return value, np.full(out.distortion.shape, weight / out.distortion.size)


def depth_normals(depth, cam):
    """World-space normals from a depth map by central differences, facing the camera.

    Returns (normals (H, W, 3), valid (H, W)); border pixels and pixels with a
    zero-depth neighbour (or themselves) are invalid.
    """
    pts = depth[..., None] * cam.pixel_rays()
    gx = np.zeros_like(pts)
    gy = np.zeros_like(pts)
    gx[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    gy[1:-1] = pts[2:] - pts[:-2]
    # image y points down, so dy x dx faces the eye for a visible surface
    n = np.cross(gy, gx)
    norm = np.linalg.norm(n, axis=-1)
    valid = np.zeros(depth.shape, dtype=bool)
    valid[1:-1, 1:-1] = ((depth[1:-1, 1:-1] > 0) & (depth[1:-1, 2:] > 0) & (depth[1:-1, :-2] > 0)
                         & (depth[2:, 1:-1] > 0) & (depth[:-2, 1:-1] > 0))
    valid &= norm > 0
    n = np.where(valid[..., None], n / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    return n @ cam.rotation, valid


@dataclass
class NormalTarget:
    """Depth-derived normals and the pixel mask, held fixed during a backward pass."""

    normals: np.ndarray
    mask: np.ndarray


def normal_target(out, cam, min_alpha=0.5):
    N, valid = depth_normals(out.median_depth, cam)
    return NormalTarget(N, valid & (out.alpha >= min_alpha))


def normal_consistency_loss(out, target, weight=1.0):
    """mean over pixels of sum_i w_i (1 - n_i . N), skipping masked pixels.

    Per pixel the sum collapses to A - S . N where S = sum_i w_i n_i, so the
    gradient goes to the alpha and unnormalized-normal channels.
    """
    mask = target.mask
    per_pixel = np.where(mask, out.alpha - np.sum(out.normal_sum * target.normals, -1), 0.0)
    scale = weight / mask.size
    d_alpha = np.where(mask, scale, 0.0)
    d_nsum = -scale * target.normals * mask[..., None]
    return float(per_pixel.mean()), d_alpha, d_nsum


@dataclass
class LossTerms:
    photometric: float
    distortion: float
    normal: float
    total: float
    grads: dict = field(repr=False, default_factory=dict)
    normal_target: NormalTarget = field(repr=False, default=None)


def total_loss(out, target_image, cam, weights, normal_tgt=None, use_distortion=True,
               use_normal=True):
    """L_c + alpha_d L_d + beta_n L_n with per-channel upstream gradients.

    ``normal_tgt`` freezes the depth-derived normals; by default they are
    computed from this render's median depth and treated as constant.
    """
    lc, d_color = photometric_loss(out.color, target_image, weights.lambda_ssim)
    H, W = out.alpha.shape
    grads = dict(color=d_color)
    ld = ln = 0.0
    if use_distortion:
        ld, grads["distortion"] = depth_distortion_loss(out, weights.alpha_d)
    if use_normal:
        if normal_tgt is None:
            normal_tgt = normal_target(out, cam)
        ln, grads["alpha"], grads["normal_sum"] = normal_consistency_loss(out, normal_tgt, weights.beta_n)
    total = lc + (weights.alpha_d * ld if use_distortion else 0.0) + (weights.beta_n * ln if use_normal else 0.0)
    return LossTerms(lc, ld, ln, total, grads, normal_tgt)
