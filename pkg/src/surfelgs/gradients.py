"""Reverse-mode derivatives of the rasterizer and a finite-difference oracle."""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import _backend
from . import _kernels_numpy as knp
from .geometry import LOWPASS_SIGMA, CameraModel, rotmat_grad_to_quat
from .losses import LossWeights, total_loss
from .model import PARAM_NAMES, SplatModel
from .rasterizer import NGRAD, render
from .sh import sh_basis

CHANNELS = ("color", "alpha", "mean_depth", "median_depth", "distortion", "normal", "normal_sum")


class NonFiniteGradient(FloatingPointError):
    """An upstream gradient contained NaN or Inf."""


@dataclass
class ParamGrads:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    screen_grad_norm: np.ndarray

    def params(self):
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def flat(self):
        return np.concatenate([getattr(self, k).ravel() for k in PARAM_NAMES])

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.params().values())


def _upstream(out, grads):
    h, w = out.alpha.shape
    unknown = set(grads) - set(CHANNELS)
    if unknown:
        raise KeyError(f"unknown channels {sorted(unknown)}")
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteGradient(f"non-finite upstream gradient on {k!r}")

    def get(name, shape):
        g = grads.get(name)
        return np.zeros(shape) if g is None else np.ascontiguousarray(np.broadcast_to(g, shape), dtype=np.float64)

    d_nsum = get("normal_sum", (h, w, 3)).copy()
    if "normal" in grads:
        # through n = S / |S|
        dn = get("normal", (h, w, 3))
        S = out.normal_sum
        norm = np.linalg.norm(S, axis=-1, keepdims=True)
        nhat = out.normal
        proj = dn - nhat * np.sum(nhat * dn, -1, keepdims=True)
        d_nsum += np.where(norm > 0, proj / np.where(norm > 0, norm, 1.0), 0.0)
    return (get("color", (h, w, 3)), get("alpha", (h, w)), get("mean_depth", (h, w)),
            get("median_depth", (h, w)), get("distortion", (h, w)), d_nsum)


def render_backward(model, cam, out, grads, backend=None):
    """Gradients of ``sum(grads[c] * out.c)`` with respect to every model parameter.

    ``grads`` maps channel names (see ``CHANNELS``) to upstream gradient arrays;
    missing channels count as zero.
    """
    backend = _backend.resolve(backend)
    proj, grid, rp = out.proj, out.grid, out.replay
    dC, dA, dMean, dMed, dDist, dN = _upstream(out, grads)
    partial = np.zeros((len(grid.entries), NGRAD))
    inv2var = 1.0 / (2.0 * LOWPASS_SIGMA ** 2)
    args_common = (proj.Tm, proj.cpix, proj.opacity, proj.colors, proj.normals, out.background,
                   cam.near, cam.far, inv2var, rp.count, rp.median_index, rp.slot, rp.w, rp.z, rp.T,
                   dC, dA, dMean, dMed, dDist, dN, partial)
    if backend == "numba":
        from . import _kernels_numba as knb
        knb.backward(grid.ranges, grid.entries, grid.tiles_x, grid.tile_size, cam.width, cam.height,
                     *args_common)
    else:
        knp.backward(grid.entries, *args_common)
    per_splat = np.zeros((len(model), NGRAD))
    np.add.at(per_splat, grid.entries, partial)
    return chain_to_params(model, cam, proj, per_splat)


def chain_to_params(model, cam, proj, per_splat):
    """Map per-splat gradients on (W@H columns, opacity, color, normal) to parameters."""
    n = len(model)
    dTm = per_splat[:, :12].reshape(n, 4, 3)
    d_opacity = per_splat[:, 12]
    d_color = per_splat[:, 13:16]
    d_normal = per_splat[:, 16:19]
    W3 = proj.W[:, :3]
    R, s = proj.R, proj.scales
    d_su_tu = dTm[:, :, 0] @ W3
    d_sv_tv = dTm[:, :, 1] @ W3
    d_center_geo = dTm[:, :, 2] @ W3

    dR = np.empty((n, 3, 3))
    dR[:, :, 0] = s[:, :1] * d_su_tu
    dR[:, :, 1] = s[:, 1:] * d_sv_tv
    dR[:, :, 2] = proj.flip[:, None] * d_normal
    d_quats = rotmat_grad_to_quat(model.quats, dR)
    d_scales = np.stack([np.sum(R[:, :, 0] * d_su_tu, 1), np.sum(R[:, :, 1] * d_sv_tv, 1)], 1)
    d_log_scales = d_scales * s
    op = proj.opacity
    d_logits = d_opacity * op * (1 - op)

    deg = proj.sh_degree
    Y, dY = sh_basis(deg, proj.view_dirs, with_grad=True)
    K = Y.shape[1]
    d_sh = np.zeros_like(model.sh)
    d_sh[:, :K] = Y[:, :, None] * d_color[:, None, :]
    d_dir = np.einsum("nkc,nc,nkd->nd", model.sh[:, :K], d_color, dY)
    dirs = proj.view_dirs
    d_center = d_center_geo + (d_dir - dirs * np.sum(dirs * d_dir, 1, keepdims=True)) / proj.view_dist[:, None]

    # d loss / d(projected center) for motion parallel to the image plane, in NDC units
    rx, ry = cam.rotation[0], cam.rotation[1]
    gx = proj.depth / cam.fx * (d_center_geo @ rx) * (cam.width / 2.0)
    gy = proj.depth / cam.fy * (d_center_geo @ ry) * (cam.height / 2.0)
    screen = np.where(proj.visible, np.hypot(gx, gy), 0.0)
    return ParamGrads(d_center, d_quats, d_log_scales, d_logits, d_sh, screen)


def finite_difference_oracle(model, loss_fn, step=1e-6, indices=None):
    """Central differences of ``loss_fn(model)`` for every flat parameter.

    The step for parameter ``theta`` is ``step * max(1, |theta|)``. With
    ``indices`` only those flat entries are computed (others are NaN).
    """
    x0 = model.flat()
    grad = np.full(x0.size, np.nan)
    idx = range(x0.size) if indices is None else indices
    for i in idx:
        h = step * max(1.0, abs(x0[i]))
        xp = x0.copy()
        xp[i] += h
        fp = loss_fn(model.with_flat(xp))
        xp[i] = x0[i] - h
        fm = loss_fn(model.with_flat(xp))
        grad[i] = (fp - fm) / (2 * h)
    return grad


def render_signature(out):
    """Hash of the discrete structure of a render: blend lists, branches, median picks."""
    rp = out.replay
    h = hashlib.sha1()
    h.update(rp.count.tobytes())
    h.update(rp.median_index.tobytes())
    mask = np.arange(rp.slot.shape[2])[None, None, :] < rp.count[..., None]
    h.update(np.where(mask, rp.slot, -1).tobytes())
    # which side of the low-pass max each recorded entry took
    proj = out.proj
    iy, ix, k = np.nonzero(mask)
    s = rp.entries[rp.slot[iy, ix, k]]
    _, _, branch, *_ = knp.eval_splat(proj.Tm, proj.cpix, s, ix + 0.5, iy + 0.5,
                                      1.0 / (2.0 * LOWPASS_SIGMA ** 2))
    h.update(branch.tobytes())
    h.update(proj.visible.tobytes())
    h.update(proj.rect.tobytes())
    return h.hexdigest()


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    excluded: np.ndarray
    rtol: float
    atol: float

    @property
    def checked(self):
        return ~self.excluded

    @property
    def pass_fraction(self):
        ok = self.rel_err[self.checked] <= self.rtol
        return float(ok.mean()) if ok.size else 1.0

    @property
    def max_rel_err(self):
        e = self.rel_err[self.checked]
        return float(e.max()) if e.size else 0.0


def relative_error(analytic, numeric, atol):
    """|a - f| / max(|a|, |f|, atol): relative where gradients are resolvable, absolute below atol."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)


def gradcheck_scene(model, cam, target, weights, step=1e-4, rtol=1e-5, atol=1e-7, backend=None):
    """Compare analytic total-loss gradients with central differences.

    The depth-derived normals are frozen at the unperturbed render, as in
    the backward pass. A parameter is excluded when perturbing it by
    +-10 steps changes the render's discrete structure (blend lists,
    low-pass branch, median pick, culling): those are the non-differentiable
    points.
    """
    out = render(model, cam, backend=backend)
    terms = total_loss(out, target, cam, weights)
    ntgt = terms.normal_target
    g = render_backward(model, cam, out, terms.grads, backend=backend)
    analytic = g.flat()
    base_sig = render_signature(out)

    def loss_fn(m):
        o = render(m, cam, backend=backend)
        return total_loss(o, target, cam, weights, normal_tgt=ntgt).total

    numeric = finite_difference_oracle(model, loss_fn, step)
    x0 = model.flat()
    excluded = np.zeros(x0.size, dtype=bool)
    for i in range(x0.size):
        h = 10 * step * max(1.0, abs(x0[i]))
        for sgn in (1.0, -1.0):
            xp = x0.copy()
            xp[i] += sgn * h
            if render_signature(render(model.with_flat(xp), cam, backend=backend)) != base_sig:
                excluded[i] = True
                break
    return GradCheckResult(analytic, numeric, relative_error(analytic, numeric, atol), excluded, rtol, atol)


def random_gradcheck_scene(seed, n_splats=8, size=16, sh_degree=3):
    """Small random scene for gradient checks: (model, camera, target image)."""
    rng = np.random.default_rng(seed)
    n = n_splats
    model = SplatModel(rng.normal(0, 0.3, (n, 3)), rng.normal(size=(n, 4)),
                       np.log(rng.uniform(0.1, 0.4, (n, 2))), rng.normal(1, 1, size=n),
                       rng.normal(0, 0.3, (n, (sh_degree + 1) ** 2, 3)), sh_degree=sh_degree)
    E = np.eye(4)
    E[2, 3] = 2.5
    f = 1.25 * size
    cam = CameraModel(f, f, size / 2, size / 2, size, size, E)
    return model, cam, rng.uniform(0, 1, (size, size, 3))


def gradcheck_suite(seeds, weights=None, backend=None, **kw):
    """gradcheck_scene over random scenes; distortion weight 1 and normal weight 0.05 by default."""
    weights = LossWeights(1.0, 0.05, 0.2) if weights is None else weights
    return [gradcheck_scene(*random_gradcheck_scene(s), weights, backend=backend, **kw) for s in seeds]
