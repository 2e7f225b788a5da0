"""Numba per-tile blending kernels.

One tile is processed by one thread and every pixel blends its splats
sequentially, so results do not depend on the thread count. The reverse pass
writes per-entry partial gradients into disjoint slots of the tile's range.
"""

import math

import numpy as np
from numba import njit, prange

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
DEG_RTOL = 1e-9
EPS_DEPTH = 1e-6
NGRAD = 19  # 12 (rows 0-3 x cols u, v, center of W@H) + opacity + rgb + normal


@njit(cache=True, inline="always")
def eval_splat(Tm, cpix, s, px, py, inv2var):
    """Filtered Gaussian and depth of splat ``s`` at screen point (px, py).

    Returns (g, z, branch, u, v, a0, a1, a2, b0, b1, b2, den); branch 0 is the
    ray-splat intersection, 1 the screen-space low-pass (ties go to 0).
    """
    a0 = -Tm[s, 0, 0] + px * Tm[s, 3, 0]
    a1 = -Tm[s, 0, 1] + px * Tm[s, 3, 1]
    a2 = -Tm[s, 0, 2] + px * Tm[s, 3, 2]
    b0 = -Tm[s, 1, 0] + py * Tm[s, 3, 0]
    b1 = -Tm[s, 1, 1] + py * Tm[s, 3, 1]
    b2 = -Tm[s, 1, 2] + py * Tm[s, 3, 2]
    den = a0 * b1 - a1 * b0
    n1 = a1 * b2
    n2 = a2 * b1
    n3 = a2 * b0
    n4 = a0 * b2
    big = max(max(abs(n1), abs(n2)), max(abs(n3), abs(n4)))
    u = 0.0
    v = 0.0
    g_ray = 0.0
    if abs(den) > DEG_RTOL * big:
        u = (n1 - n2) / den
        v = (n3 - n4) / den
        g_ray = math.exp(-0.5 * (u * u + v * v))
    ex = cpix[s, 0] - px
    ey = cpix[s, 1] - py
    g_lp = math.exp(-(ex * ex + ey * ey) * inv2var)
    if g_ray >= g_lp:
        z = Tm[s, 2, 0] * u + Tm[s, 2, 1] * v + Tm[s, 2, 2]
        return g_ray, z, 0, u, v, a0, a1, a2, b0, b1, b2, den
    return g_lp, Tm[s, 2, 2], 1, u, v, a0, a1, a2, b0, b1, b2, den


@njit(cache=True, inline="always")
def ndc(z, near, far):
    return far * (z - near) / (z * (far - near))


@njit(cache=True, inline="always")
def blend_pixel(ix, iy, start, end, entries, Tm, cpix, opac, colors, normals, rect,
                near, far, K, inv2var, acc, l_slot, l_w, l_z, l_g, l_T):
    """Front-to-back blend of one pixel over entries[start:end].

    ``acc`` receives (r, g, b, A, sum w z, nx, ny, nz, distortion, T_final,
    median depth). Returns (count, median list index, capped).
    """
    px = ix + 0.5
    py = iy + 0.5
    T = 1.0
    A = 0.0
    mu = 0.0     # weighted mean of m so far
    V = 0.0      # weighted centered sum of squares of m so far
    dist = 0.0
    cr = 0.0
    cg = 0.0
    cb = 0.0
    zs = 0.0
    nx = 0.0
    ny = 0.0
    nz = 0.0
    med = 0.0
    medk = -1
    cnt = 0
    capped = False
    for j in range(start, end):
        s = entries[j]
        if ix < rect[s, 0] or ix > rect[s, 2] or iy < rect[s, 1] or iy > rect[s, 3]:
            continue
        g, z, branch, u, v, a0, a1, a2, b0, b1, b2, den = eval_splat(Tm, cpix, s, px, py, inv2var)
        if branch == 0 and z <= near:
            continue
        a = opac[s] * g
        if a < ALPHA_MIN:
            continue
        w = a * T
        m = ndc(z, near, far)
        dm = m - mu
        dist += w * (A * dm * dm + V)
        A += w
        mu += dm * w / A
        V += w * dm * (m - mu)
        cr += w * colors[s, 0]
        cg += w * colors[s, 1]
        cb += w * colors[s, 2]
        zs += w * z
        nx += w * normals[s, 0]
        ny += w * normals[s, 1]
        nz += w * normals[s, 2]
        if T > 0.5:
            med = z
            medk = cnt
        l_slot[cnt] = j
        l_w[cnt] = w
        l_z[cnt] = z
        l_g[cnt] = g
        l_T[cnt] = T
        cnt += 1
        T = T * (1.0 - a)
        if T < T_MIN:
            break
        if cnt == K:
            for jj in range(j + 1, end):
                q = entries[jj]
                if rect[q, 0] <= ix <= rect[q, 2] and rect[q, 1] <= iy <= rect[q, 3]:
                    capped = True
                    break
            break
    acc[0] = cr
    acc[1] = cg
    acc[2] = cb
    acc[3] = A
    acc[4] = zs
    acc[5] = nx
    acc[6] = ny
    acc[7] = nz
    acc[8] = dist
    acc[9] = T
    acc[10] = med
    return cnt, medk, capped


@njit(cache=True, parallel=True)
def forward(ranges, entries, tiles_x, tile_size, width, height, Tm, cpix, opac, colors,
            normals, rect, bg, near, far, K, inv2var,
            out_color, out_alpha, out_mean, out_median, out_nsum, out_dist, out_count,
            out_medk, out_capped, l_slot, l_w, l_z, l_g, l_T):
    n_tiles = ranges.shape[0]
    for t in prange(n_tiles):
        start = ranges[t, 0]
        end = ranges[t, 1]
        tx = t % tiles_x
        ty = t // tiles_x
        acc = np.empty(11)
        for iy in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for ix in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                cnt, medk, capped = blend_pixel(
                    ix, iy, start, end, entries, Tm, cpix, opac, colors, normals, rect,
                    near, far, K, inv2var, acc,
                    l_slot[iy, ix], l_w[iy, ix], l_z[iy, ix], l_g[iy, ix], l_T[iy, ix])
                Tf = acc[9]
                for c in range(3):
                    out_color[iy, ix, c] = acc[c] + Tf * bg[c]
                    out_nsum[iy, ix, c] = acc[5 + c]
                out_alpha[iy, ix] = acc[3]
                out_mean[iy, ix] = acc[4] / (acc[3] + EPS_DEPTH)
                out_median[iy, ix] = acc[10]
                out_dist[iy, ix] = acc[8]
                out_count[iy, ix] = cnt
                out_medk[iy, ix] = medk
                out_capped[iy, ix] = capped


@njit(cache=True, inline="always")
def backward_pixel(ix, iy, n, medk, entries, Tm, cpix, opac, colors, normals, bg, near, far,
                   inv2var, slots, ws, zs_, Ts, dC, dA, dMean, dMed, dDist, dN, partial):
    px = ix + 0.5
    py = iy + 0.5
    A = 0.0
    mu = 0.0
    V = 0.0
    zsum = 0.0
    for k in range(n):
        w = ws[k]
        m = ndc(zs_[k], near, far)
        dm = m - mu
        A += w
        mu += dm * w / A
        V += w * dm * (m - mu)
        zsum += w * zs_[k]
    Aeps = A + EPS_DEPTH
    MD = zsum / Aeps
    S = dC[0] * bg[0] + dC[1] * bg[1] + dC[2] * bg[2]
    coef = far * near / (far - near)
    for k in range(n - 1, -1, -1):
        slot = slots[k]
        s = entries[slot]
        g, z, branch, u, v, a0, a1, a2, b0, b1, b2, den = eval_splat(Tm, cpix, s, px, py, inv2var)
        alpha = opac[s]
        ah = alpha * g
        w = ws[k]
        T = Ts[k]
        m = ndc(z, near, far)
        dmdz = coef / (z * z)
        gi = (dC[0] * colors[s, 0] + dC[1] * colors[s, 1] + dC[2] * colors[s, 2]
              + dA + dMean * (z - MD) / Aeps + dDist * (A * (m - mu) * (m - mu) + V)
              + dN[0] * normals[s, 0] + dN[1] * normals[s, 1] + dN[2] * normals[s, 2])
        dz = dMean * w / Aeps + dDist * 2.0 * w * A * (m - mu) * dmdz
        if k == medk:
            dz += dMed
        dah = T * (gi - S)
        S = gi * ah + (1.0 - ah) * S
        dg = dah * alpha
        p = partial[slot]
        p[12] += dah * g
        for c in range(3):
            p[13 + c] += dC[c] * w
            p[16 + c] += dN[c] * w
        if branch == 0:
            du = -u * g * dg + dz * Tm[s, 2, 0]
            dv = -v * g * dg + dz * Tm[s, 2, 1]
            p[6] += dz * u
            p[7] += dz * v
            p[8] += dz
            lam0 = (b1 * du - b0 * dv) / den
            lam1 = (a0 * dv - a1 * du) / den
            da0 = -lam0 * u
            da1 = -lam0 * v
            da2 = -lam0
            db0 = -lam1 * u
            db1 = -lam1 * v
            db2 = -lam1
            p[0] -= da0
            p[1] -= da1
            p[2] -= da2
            p[3] -= db0
            p[4] -= db1
            p[5] -= db2
            p[9] += px * da0 + py * db0
            p[10] += px * da1 + py * db1
            p[11] += px * da2 + py * db2
        else:
            ex = cpix[s, 0] - px
            ey = cpix[s, 1] - py
            dcx = -2.0 * inv2var * ex * g * dg
            dcy = -2.0 * inv2var * ey * g * dg
            T32 = Tm[s, 3, 2]
            p[2] += dcx / T32
            p[5] += dcy / T32
            p[11] -= (dcx * cpix[s, 0] + dcy * cpix[s, 1]) / T32
            p[8] += dz


@njit(cache=True, parallel=True)
def backward(ranges, entries, tiles_x, tile_size, width, height, Tm, cpix, opac, colors,
             normals, bg, near, far, inv2var, count, medk, l_slot, l_w, l_z, l_T,
             d_color, d_alpha, d_mean, d_median, d_dist, d_nsum, partial):
    n_tiles = ranges.shape[0]
    for t in prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        for iy in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for ix in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                backward_pixel(ix, iy, count[iy, ix], medk[iy, ix], entries, Tm, cpix, opac,
                               colors, normals, bg, near, far, inv2var,
                               l_slot[iy, ix], l_w[iy, ix], l_z[iy, ix], l_T[iy, ix],
                               d_color[iy, ix], d_alpha[iy, ix], d_mean[iy, ix],
                               d_median[iy, ix], d_dist[iy, ix], d_nsum[iy, ix], partial)


@njit(cache=True)
def reference(order, width, height, Tm, cpix, opac, colors, normals, rect, bg, near, far,
              K, inv2var, out_color, out_alpha, out_mean, out_median, out_dist, out_count):
    """Brute force: every pixel scans every visible splat in global depth order.

    Written independently of the tile path; only the per-splat evaluation is shared.
    """
    for iy in range(height):
        for ix in range(width):
            px = ix + 0.5
            py = iy + 0.5
            T = 1.0
            ws = np.zeros(K)
            ms = np.zeros(K)
            zl = np.zeros(K)
            col = np.zeros(3)
            med = 0.0
            n = 0
            for j in range(order.shape[0]):
                s = order[j]
                inside = rect[s, 0] <= ix <= rect[s, 2] and rect[s, 1] <= iy <= rect[s, 3]
                if not inside:
                    continue
                res = eval_splat(Tm, cpix, s, px, py, inv2var)
                g = res[0]
                z = res[1]
                if res[2] == 0 and z <= near:
                    continue
                a = opac[s] * g
                if a < ALPHA_MIN:
                    continue
                w = a * T
                for c in range(3):
                    col[c] += w * colors[s, c]
                if T > 0.5:
                    med = z
                ws[n] = w
                ms[n] = ndc(z, near, far)
                zl[n] = z
                n += 1
                T = T * (1.0 - a)
                if T < T_MIN or n == K:
                    break
            A = 0.0
            mu = 0.0
            V = 0.0
            dist = 0.0
            zsum = 0.0
            for i in range(n):
                dm = ms[i] - mu
                dist += ws[i] * (A * dm * dm + V)
                A += ws[i]
                mu += dm * ws[i] / A
                V += ws[i] * dm * (ms[i] - mu)
                zsum += ws[i] * zl[i]
            for c in range(3):
                out_color[iy, ix, c] = col[c] + T * bg[c]
            out_alpha[iy, ix] = A
            out_mean[iy, ix] = zsum / (A + EPS_DEPTH)
            out_median[iy, ix] = med
            out_dist[iy, ix] = dist
            out_count[iy, ix] = n
