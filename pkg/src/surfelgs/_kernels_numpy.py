"""Pure-numpy blending kernels.

Forward is splat-major: walk the visible splats in global (depth, index) order
and update every still-active pixel inside the splat's rectangle at once. The
global order restricted to one tile is that tile's order, so the per-pixel
sequence matches the tile kernels. Backward is list-major over the replay
lists, back to front.
"""

import numpy as np

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
DEG_RTOL = 1e-9
EPS_DEPTH = 1e-6


def eval_splat(Tm, cpix, s, px, py, inv2var):
    """Vectorized twin of the numba ``eval_splat``; ``s``, ``px``, ``py`` are equal-length arrays."""
    M = Tm[s]
    a0 = -M[:, 0, 0] + px * M[:, 3, 0]
    a1 = -M[:, 0, 1] + px * M[:, 3, 1]
    a2 = -M[:, 0, 2] + px * M[:, 3, 2]
    b0 = -M[:, 1, 0] + py * M[:, 3, 0]
    b1 = -M[:, 1, 1] + py * M[:, 3, 1]
    b2 = -M[:, 1, 2] + py * M[:, 3, 2]
    den = a0 * b1 - a1 * b0
    n1, n2, n3, n4 = a1 * b2, a2 * b1, a2 * b0, a0 * b2
    big = np.maximum(np.maximum(np.abs(n1), np.abs(n2)), np.maximum(np.abs(n3), np.abs(n4)))
    ok = np.abs(den) > DEG_RTOL * big
    safe = np.where(ok, den, 1.0)
    u = np.where(ok, (n1 - n2) / safe, 0.0)
    v = np.where(ok, (n3 - n4) / safe, 0.0)
    g_ray = np.where(ok, np.exp(-0.5 * (u * u + v * v)), 0.0)
    ex = cpix[s, 0] - px
    ey = cpix[s, 1] - py
    g_lp = np.exp(-(ex * ex + ey * ey) * inv2var)
    ray = g_ray >= g_lp
    g = np.where(ray, g_ray, g_lp)
    z = np.where(ray, M[:, 2, 0] * u + M[:, 2, 1] * v + M[:, 2, 2], M[:, 2, 2])
    return g, z, (~ray).astype(np.int8), u, v, (a0, a1, a2), (b0, b1, b2), den


def ndc(z, near, far):
    return far * (z - near) / (z * (far - near))


def forward(order, slot_of, width, height, Tm, cpix, opac, colors, normals, rect, bg,
            near, far, K, inv2var, out):
    """Fill ``out`` (dict of preallocated arrays, as for the numba kernel)."""
    T = np.ones((height, width))
    A = np.zeros((height, width))
    mu = np.zeros((height, width))
    V = np.zeros((height, width))
    zs = np.zeros((height, width))
    cnt = out["count"]
    done = np.zeros((height, width), dtype=bool)
    col, nsum, dist, med, medk = out["color"], out["nsum"], out["dist"], out["median"], out["medk"]
    col[:] = 0.0
    nsum[:] = 0.0
    dist[:] = 0.0
    med[:] = 0.0
    medk[:] = -1
    cnt[:] = 0
    capped = out["capped"]
    capped[:] = False
    for s in order:
        x0, y0, x1, y1 = rect[s]
        sub = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        live = ~done[sub]
        if not live.any():
            continue
        iy, ix = np.nonzero(live)
        iy = iy + y0
        ix = ix + x0
        # a pixel already at the cap sees one more candidate: that is the capped marker
        full = cnt[iy, ix] >= K
        if full.any():
            capped[iy[full], ix[full]] = True
            done[iy[full], ix[full]] = True
            iy, ix = iy[~full], ix[~full]
        ss = np.full(iy.shape, s)
        g, z, branch, *_ = eval_splat(Tm, cpix, ss, ix + 0.5, iy + 0.5, inv2var)
        a = opac[s] * g
        keep = ~((branch == 0) & (z <= near)) & (a >= ALPHA_MIN)
        if not keep.any():
            continue
        iy, ix, g, z, a = iy[keep], ix[keep], g[keep], z[keep], a[keep]
        Tp = T[iy, ix]
        w = a * Tp
        m = ndc(z, near, far)
        Ap, mup, Vp = A[iy, ix], mu[iy, ix], V[iy, ix]
        dm = m - mup
        dist[iy, ix] += w * (Ap * dm * dm + Vp)
        An = Ap + w
        mun = mup + dm * w / An
        A[iy, ix] = An
        mu[iy, ix] = mun
        V[iy, ix] = Vp + w * dm * (m - mun)
        for c in range(3):
            col[iy, ix, c] += w * colors[s, c]
            nsum[iy, ix, c] += w * normals[s, c]
        zs[iy, ix] += w * z
        k = cnt[iy, ix]
        vis = Tp > 0.5
        med[iy[vis], ix[vis]] = z[vis]
        medk[iy[vis], ix[vis]] = k[vis]
        out["slot"][iy, ix, k] = slot_of(s, iy, ix)
        out["w"][iy, ix, k] = w
        out["z"][iy, ix, k] = z
        out["g"][iy, ix, k] = g
        out["T"][iy, ix, k] = Tp
        cnt[iy, ix] = k + 1
        Tn = Tp * (1.0 - a)
        T[iy, ix] = Tn
        done[iy, ix] |= Tn < T_MIN
    for c in range(3):
        col[..., c] += T * bg[c]
    out["alpha"][:] = A
    out["mean"][:] = zs / (A + EPS_DEPTH)


def backward(entries, Tm, cpix, opac, colors, normals, bg, near, far, inv2var, count, medk,
             l_slot, l_w, l_z, l_T, d_color, d_alpha, d_mean, d_median, d_dist, d_nsum, partial):
    H, W = count.shape
    kmax = int(count.max()) if count.size else 0
    valid = np.arange(l_w.shape[2])[None, None, :kmax] < count[..., None]
    w_all = np.where(valid, l_w[..., :kmax], 0.0)
    z_all = np.where(valid, l_z[..., :kmax], 1.0)
    m_all = ndc(z_all, near, far)
    # same streaming order as the forward pass
    A = np.zeros((H, W))
    mu = np.zeros((H, W))
    V = np.zeros((H, W))
    for k in range(kmax):
        wk, mk = w_all[..., k], m_all[..., k]
        dm = mk - mu
        An = A + wk
        mun = mu + np.where(An > 0, dm * wk / np.where(An > 0, An, 1.0), 0.0)
        V = V + wk * dm * (mk - mun)
        A, mu = An, mun
    Aeps = A + EPS_DEPTH
    MD = (w_all * z_all).sum(-1) / Aeps
    S = d_color @ bg
    coef = far * near / (far - near)
    ys, xs = np.mgrid[0:H, 0:W]
    for k in range(kmax - 1, -1, -1):
        sel = count > k
        iy, ix = ys[sel], xs[sel]
        slot = l_slot[iy, ix, k]
        s = entries[slot]
        px, py = ix + 0.5, iy + 0.5
        g, z, branch, u, v, a, b, den = eval_splat(Tm, cpix, s, px, py, inv2var)
        alpha = opac[s]
        ah = alpha * g
        w = l_w[iy, ix, k]
        T = l_T[iy, ix, k]
        m = ndc(z, near, far)
        dmdz = coef / (z * z)
        dC = d_color[iy, ix]
        dN = d_nsum[iy, ix]
        Ap, mup, Vp, Ae = A[iy, ix], mu[iy, ix], V[iy, ix], Aeps[iy, ix]
        dDist = d_dist[iy, ix]
        gi = (np.sum(dC * colors[s], 1) + d_alpha[iy, ix] + d_mean[iy, ix] * (z - MD[iy, ix]) / Ae
              + dDist * (Ap * (m - mup) * (m - mup) + Vp) + np.sum(dN * normals[s], 1))
        dz = d_mean[iy, ix] * w / Ae + dDist * 2.0 * w * Ap * (m - mup) * dmdz
        dz = dz + np.where(medk[iy, ix] == k, d_median[iy, ix], 0.0)
        Sp = S[iy, ix]
        dah = T * (gi - Sp)
        S[iy, ix] = gi * ah + (1.0 - ah) * Sp
        dg = dah * alpha
        p = np.zeros((slot.size, 19))
        p[:, 12] = dah * g
        p[:, 13:16] = dC * w[:, None]
        p[:, 16:19] = dN * w[:, None]
        Ms = Tm[s]
        ray = branch == 0
        du = -u * g * dg + dz * Ms[:, 2, 0]
        dv = -v * g * dg + dz * Ms[:, 2, 1]
        safe = np.where(ray, den, 1.0)
        lam0 = (b[1] * du - b[0] * dv) / safe
        lam1 = (a[0] * dv - a[1] * du) / safe
        uv1 = np.stack([u, v, np.ones_like(u)], 1)
        da = -lam0[:, None] * uv1
        db = -lam1[:, None] * uv1
        r = ray[:, None]
        p[:, 0:3] = np.where(r, -da, 0.0)
        p[:, 3:6] = np.where(r, -db, 0.0)
        p[:, 6:9] = np.where(r, dz[:, None] * uv1, 0.0)
        p[:, 9:12] = np.where(r, px[:, None] * da + py[:, None] * db, 0.0)
        lp = ~ray
        if lp.any():
            ex = cpix[s, 0] - px
            ey = cpix[s, 1] - py
            dcx = -2.0 * inv2var * ex * g * dg
            dcy = -2.0 * inv2var * ey * g * dg
            T32 = Ms[:, 3, 2]
            p[lp, 2] = (dcx / T32)[lp]
            p[lp, 5] = (dcy / T32)[lp]
            p[lp, 11] = (-(dcx * cpix[s, 0] + dcy * cpix[s, 1]) / T32)[lp]
            p[lp, 8] = dz[lp]
        np.add.at(partial, slot, p)
