"""numba kernels for tile-binned splatting (forward and reverse mode).

Per-pixel work is independent; each tile writes only its own pixels and its
own slice of the per-entry gradient buffer, so results do not depend on the
number of worker threads. The final reduction over entries is serial.
"""
import numpy as np
from numba import njit, prange


def alpha_cut(opac, min_alpha):
    """Per-primitive exponent below which alpha is certainly under ``min_alpha``.

    The margin keeps the early exit strictly inside the region the explicit
    alpha test would reject anyway, so outputs are unchanged.
    """
    with np.errstate(divide="ignore"):
        return np.log(min_alpha / np.maximum(opac, 1e-300)) - 1e-6


@njit(cache=True)
def bin_tiles(x0, x1, y0, y1, order, tile_size, tiles_x, tiles_y):
    """Build per-tile Gaussian lists in the given (depth) order.

    x0..y1 are inclusive pixel bounds per Gaussian. Returns (ranges, entries)
    where ranges[t] = (start, end) into entries.
    """
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles, dtype=np.int64)
    for i in range(order.shape[0]):
        g = order[i]
        tx0 = x0[g] // tile_size
        tx1 = x1[g] // tile_size
        ty0 = y0[g] // tile_size
        ty1 = y1[g] // tile_size
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx] += 1
    ranges = np.zeros((n_tiles, 2), dtype=np.int64)
    total = 0
    for t in range(n_tiles):
        ranges[t, 0] = total
        total += counts[t]
        ranges[t, 1] = total
    entries = np.empty(total, dtype=np.int32)
    fill = ranges[:, 0].copy()
    for i in range(order.shape[0]):
        g = order[i]
        tx0 = x0[g] // tile_size
        tx1 = x1[g] // tile_size
        ty0 = y0[g] // tile_size
        ty1 = y1[g] // tile_size
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * tiles_x + tx
                entries[fill[t]] = g
                fill[t] += 1
    return ranges, entries


@njit(parallel=True, cache=True)
def forward(mean2d, conic, opac, cut, feats, ranges, entries, H, W, tile_size, tiles_x,
            bg, alpha_max, min_alpha, t_min):
    F = feats.shape[1]
    out = np.zeros((H, W, F))
    final_T = np.ones((H, W))
    n_last = np.zeros((H, W), dtype=np.int32)
    n_contrib = np.zeros((H, W), dtype=np.int32)
    n_tiles = ranges.shape[0]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ranges[t, 0]
        end = ranges[t, 1]
        for py in range(ty * tile_size, min(H, (ty + 1) * tile_size)):
            for px in range(tx * tile_size, min(W, (tx + 1) * tile_size)):
                T = 1.0
                last = 0
                cnt = 0
                for e in range(start, end):
                    g = entries[e]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0 or power < cut[g]:
                        continue
                    a = opac[g] * np.exp(power)
                    if a > alpha_max:
                        a = alpha_max
                    if a < min_alpha:
                        continue
                    test_T = T * (1.0 - a)
                    if test_T < t_min:
                        break
                    w = a * T
                    for f in range(F):
                        out[py, px, f] += feats[g, f] * w
                    T = test_T
                    last = e - start + 1
                    cnt += 1
                final_T[py, px] = T
                n_last[py, px] = last
                n_contrib[py, px] = cnt
                for c in range(3):
                    out[py, px, c] += T * bg[c]
    return out, final_T, n_last, n_contrib


@njit(parallel=True, cache=True)
def backward(mean2d, conic, opac, cut, feats, ranges, entries, n_last, final_T, grad_out,
             H, W, tile_size, tiles_x, bg, alpha_max, min_alpha):
    """Per-entry gradients: [d mean_x, d mean_y, d conic00, d conic01, d conic11, d opacity, d feats...]."""
    F = feats.shape[1]
    K = 6 + F
    n_entries = entries.shape[0]
    eg = np.zeros((n_entries, K))
    n_tiles = ranges.shape[0]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ranges[t, 0]
        acc = np.empty(F)
        for py in range(ty * tile_size, min(H, (ty + 1) * tile_size)):
            for px in range(tx * tile_size, min(W, (tx + 1) * tile_size)):
                T = final_T[py, px]
                for f in range(F):
                    acc[f] = 0.0
                for c in range(3):
                    acc[c] = bg[c] * T
                for e in range(start + n_last[py, px] - 1, start - 1, -1):
                    g = entries[e]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0 or power < cut[g]:
                        continue
                    G = np.exp(power)
                    a = opac[g] * G
                    clamped = False
                    if a > alpha_max:
                        a = alpha_max
                        clamped = True
                    if a < min_alpha:
                        continue
                    T = T / (1.0 - a)
                    w = a * T
                    dL_da = 0.0
                    inv = 1.0 / (1.0 - a)
                    for f in range(F):
                        gf = grad_out[py, px, f]
                        eg[e, 6 + f] += gf * w
                        dL_da += gf * (feats[g, f] * T - acc[f] * inv)
                        acc[f] += feats[g, f] * w
                    if not clamped:
                        dp = dL_da * a
                        eg[e, 5] += dL_da * G
                        eg[e, 0] += dp * (conic[g, 0] * dx + conic[g, 1] * dy)
                        eg[e, 1] += dp * (conic[g, 1] * dx + conic[g, 2] * dy)
                        eg[e, 2] += dp * (-0.5 * dx * dx)
                        eg[e, 3] += dp * (-dx * dy)
                        eg[e, 4] += dp * (-0.5 * dy * dy)
    return eg


@njit(cache=True)
def reduce_entries(entries, eg, P):
    out = np.zeros((P, eg.shape[1]))
    for e in range(entries.shape[0]):
        g = entries[e]
        for k in range(eg.shape[1]):
            out[g, k] += eg[e, k]
    return out


@njit(cache=True)
def pixel_contributors(mean2d, conic, opac, cut, ranges, entries, tile, px, py, n_last, alpha_max, min_alpha):
    """Ordered (local index, alpha, transmittance-before) records of one pixel."""
    start = ranges[tile, 0]
    out_idx = []
    out_a = []
    out_T = []
    T = 1.0
    for e in range(start, start + n_last):
        g = entries[e]
        dx = px - mean2d[g, 0]
        dy = py - mean2d[g, 1]
        power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
        if power > 0.0 or power < cut[g]:
            continue
        a = opac[g] * np.exp(power)
        if a > alpha_max:
            a = alpha_max
        if a < min_alpha:
            continue
        out_idx.append(g)
        out_a.append(a)
        out_T.append(T)
        T = T * (1.0 - a)
    return out_idx, out_a, out_T


@njit(parallel=True, cache=True)
def photometric(ref_gray, src_gray, A, bvec, Kinv, N, D, weight, k, freeze, cell_x, cell_y, svalid, var_floor):
    """Per-pixel 1 - NCC between the reference patch and its homography warp.

    The homography for pixel p is h(q) = A q + bvec (v . Kinv q) with
    v = N[p] / D[p]. Returns cost, usable flag and d cost / d(N, D).
    Sample cells/validity are recorded, or replayed when ``freeze``.
    """
    H, W = ref_gray.shape
    Hs, Ws = src_gray.shape
    half = k // 2
    k2 = k * k
    cost = np.zeros((H, W))
    usable = np.zeros((H, W), dtype=np.bool_)
    gN = np.zeros((H, W, 3))
    gD = np.zeros((H, W))
    for y in prange(H):
        av = np.empty(k2)
        bv = np.empty(k2)
        du = np.empty(k2)
        dw = np.empty(k2)
        uu = np.empty(k2)
        ww = np.empty(k2)
        hz = np.empty(k2)
        rr = np.empty((k2, 3))
        ok = np.empty(k2, dtype=np.bool_)
        for x in range(W):
            if weight[y, x] <= 0.0:
                continue
            Dp = D[y, x]
            if abs(Dp) < 1e-12:
                continue
            v0 = N[y, x, 0] / Dp
            v1 = N[y, x, 1] / Dp
            v2 = N[y, x, 2] / Dp
            n = 0
            for j in range(k2):
                ok[j] = False
                qx = x + (j % k) - half
                qy = y + (j // k) - half
                if qx < 0 or qx >= W or qy < 0 or qy >= H:
                    if not freeze:
                        svalid[y, x, j] = False
                    continue
                r0 = Kinv[0, 0] * qx + Kinv[0, 1] * qy + Kinv[0, 2]
                r1 = Kinv[1, 0] * qx + Kinv[1, 1] * qy + Kinv[1, 2]
                r2 = Kinv[2, 0] * qx + Kinv[2, 1] * qy + Kinv[2, 2]
                s = v0 * r0 + v1 * r1 + v2 * r2
                h0 = A[0, 0] * qx + A[0, 1] * qy + A[0, 2] + bvec[0] * s
                h1 = A[1, 0] * qx + A[1, 1] * qy + A[1, 2] + bvec[1] * s
                h2 = A[2, 0] * qx + A[2, 1] * qy + A[2, 2] + bvec[2] * s
                if freeze:
                    valid = svalid[y, x, j] and h2 > 1e-9
                else:
                    valid = h2 > 1e-9
                if not valid:
                    if not freeze:
                        svalid[y, x, j] = False
                    continue
                u = h0 / h2
                w = h1 / h2
                if freeze:
                    cx = cell_x[y, x, j]
                    cy = cell_y[y, x, j]
                else:
                    if u < 0.0 or u > Ws - 1 or w < 0.0 or w > Hs - 1:
                        svalid[y, x, j] = False
                        continue
                    cx = min(max(int(np.floor(u)), 0), Ws - 2)
                    cy = min(max(int(np.floor(w)), 0), Hs - 2)
                    cell_x[y, x, j] = cx
                    cell_y[y, x, j] = cy
                    svalid[y, x, j] = True
                fx = u - cx
                fy = w - cy
                p00 = src_gray[cy, cx]
                p01 = src_gray[cy, cx + 1]
                p10 = src_gray[cy + 1, cx]
                p11 = src_gray[cy + 1, cx + 1]
                top = p00 + fx * (p01 - p00)
                bot = p10 + fx * (p11 - p10)
                bv[j] = top + fy * (bot - top)
                du[j] = (p01 - p00) + fy * ((p11 - p10) - (p01 - p00))
                dw[j] = bot - top
                av[j] = ref_gray[qy, qx]
                uu[j] = u
                ww[j] = w
                hz[j] = h2
                rr[j, 0] = r0
                rr[j, 1] = r1
                rr[j, 2] = r2
                ok[j] = True
                n += 1
            if 2 * n < k2:
                continue
            usable[y, x] = True
            ma = 0.0
            mb = 0.0
            for j in range(k2):
                if ok[j]:
                    ma += av[j]
                    mb += bv[j]
            ma /= n
            mb /= n
            saa = 0.0
            sbb = 0.0
            sab = 0.0
            for j in range(k2):
                if ok[j]:
                    da = av[j] - ma
                    db = bv[j] - mb
                    saa += da * da
                    sbb += db * db
                    sab += da * db
            if saa / n < var_floor or sbb / n < var_floor:
                cost[y, x] = 1.0
                continue
            den = np.sqrt(saa * sbb)
            c = sab / den
            cost[y, x] = 1.0 - c
            gv0 = 0.0
            gv1 = 0.0
            gv2 = 0.0
            for j in range(k2):
                if not ok[j]:
                    continue
                g_b = -((av[j] - ma) / den - c * (bv[j] - mb) / sbb)
                ih = 1.0 / hz[j]
                gh0 = g_b * du[j] * ih
                gh1 = g_b * dw[j] * ih
                gh2 = -g_b * (du[j] * uu[j] + dw[j] * ww[j]) * ih
                gs = gh0 * bvec[0] + gh1 * bvec[1] + gh2 * bvec[2]
                gv0 += gs * rr[j, 0]
                gv1 += gs * rr[j, 1]
                gv2 += gs * rr[j, 2]
            gN[y, x, 0] = gv0 / Dp
            gN[y, x, 1] = gv1 / Dp
            gN[y, x, 2] = gv2 / Dp
            gD[y, x] = -(gv0 * v0 + gv1 * v1 + gv2 * v2) / Dp
    return cost, usable, gN, gD
