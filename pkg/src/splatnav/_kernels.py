"""Jitted tile rasterization kernels (front-to-back alpha compositing).

Tiles carry CSR-style splat index lists in global front-to-back order; each
pixel walks its tile's list until transmittance drops below the cutoff. The
backward kernel replays the walk twice per pixel to form the suffix sums the
compositing gradients need. Both kernels are serial and deterministic.
"""

import numba
import numpy as np

TILE = 16
TRANSMITTANCE_EPS = 1e-4
CUTOFF_SIGMA = 3.0


@numba.njit(cache=True)
def tile_csr(uv, r2d, width, height):
    """CSR splat lists per 16px tile (indices stay in given front-to-back order)."""
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    n = uv.shape[0]
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for i in range(n):
        m = CUTOFF_SIGMA * r2d[i]
        x0 = max(0, min(ntx - 1, int((uv[i, 0] - m) // TILE)))
        x1 = max(0, min(ntx - 1, int((uv[i, 0] + m) // TILE)))
        y0 = max(0, min(nty - 1, int((uv[i, 1] - m) // TILE)))
        y1 = max(0, min(nty - 1, int((uv[i, 1] + m) // TILE)))
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * ntx + tx + 1] += 1
    off = np.cumsum(counts)
    idx = np.empty(off[-1], dtype=np.int64)
    cur = off[:-1].copy()
    for i in range(n):
        m = CUTOFF_SIGMA * r2d[i]
        x0 = max(0, min(ntx - 1, int((uv[i, 0] - m) // TILE)))
        x1 = max(0, min(ntx - 1, int((uv[i, 0] + m) // TILE)))
        y0 = max(0, min(nty - 1, int((uv[i, 1] - m) // TILE)))
        y1 = max(0, min(nty - 1, int((uv[i, 1] + m) // TILE)))
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                t = ty * ntx + tx
                idx[cur[t]] = i
                cur[t] += 1
    return idx, off, ntx


@numba.njit(cache=True)
def forward_kernel(width, height, ntx, csr_idx, csr_off,
                   uv, r2d, depth, col, opa, lab,
                   out_c, out_d, out_s, out_l):
    nty = (height + TILE - 1) // TILE
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            lo, hi = csr_off[t], csr_off[t + 1]
            if lo == hi:
                continue
            y1 = min((ty + 1) * TILE, height)
            x1 = min((tx + 1) * TILE, width)
            for py in range(ty * TILE, y1):
                cy = py + 0.5
                for px in range(tx * TILE, x1):
                    cx = px + 0.5
                    trans = 1.0
                    acc_r = 0.0
                    acc_g = 0.0
                    acc_b = 0.0
                    acc_d = 0.0
                    acc_s = 0.0
                    acc_l = 0.0
                    for k in range(lo, hi):
                        if trans < TRANSMITTANCE_EPS:
                            break
                        i = csr_idx[k]
                        dx = cx - uv[i, 0]
                        dy = cy - uv[i, 1]
                        rho2 = dx * dx + dy * dy
                        cut = CUTOFF_SIGMA * r2d[i]
                        if rho2 > cut * cut:
                            continue
                        o = opa[i]
                        if o < 0.0:
                            o = 0.0
                        elif o > 1.0:
                            o = 1.0
                        f = o * np.exp(-rho2 / (2.0 * r2d[i] * r2d[i]))
                        w = f * trans
                        acc_r += w * col[i, 0]
                        acc_g += w * col[i, 1]
                        acc_b += w * col[i, 2]
                        acc_d += w * depth[i]
                        acc_s += w
                        acc_l += w * lab[i]
                        trans *= 1.0 - f
                    out_c[py, px, 0] = acc_r
                    out_c[py, px, 1] = acc_g
                    out_c[py, px, 2] = acc_b
                    out_d[py, px] = acc_d
                    out_s[py, px] = acc_s
                    out_l[py, px] = acc_l


@numba.njit(cache=True)
def backward_kernel(width, height, ntx, csr_idx, csr_off,
                    uv, r2d, depth, col, opa,
                    grad_c, grad_d, grad_s,
                    a_uv, a_sig, a_dep, a_col, a_opa,
                    f_buf):
    """Accumulates pixel-space gradients per splat.

    a_uv: d/d(u,v); a_sig: d/d(r2d); a_dep: d/d(depth value);
    a_col: d/d(color); a_opa: d/d(clamped opacity) pre clamp-subgradient.
    f_buf is scratch of length >= the longest tile list.
    """
    nty = (height + TILE - 1) // TILE
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            lo, hi = csr_off[t], csr_off[t + 1]
            if lo == hi:
                continue
            y1 = min((ty + 1) * TILE, height)
            x1 = min((tx + 1) * TILE, width)
            for py in range(ty * TILE, y1):
                cy = py + 0.5
                for px in range(tx * TILE, x1):
                    cx = px + 0.5
                    gr = grad_c[py, px, 0]
                    gg = grad_c[py, px, 1]
                    gb = grad_c[py, px, 2]
                    gd = grad_d[py, px]
                    gs = grad_s[py, px]
                    if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0 and gs == 0.0:
                        continue
                    # pass 1: weights and total upstream-weighted sum
                    trans = 1.0
                    total = 0.0
                    n_seen = 0
                    for k in range(lo, hi):
                        if trans < TRANSMITTANCE_EPS:
                            break
                        i = csr_idx[k]
                        dx = cx - uv[i, 0]
                        dy = cy - uv[i, 1]
                        rho2 = dx * dx + dy * dy
                        cut = CUTOFF_SIGMA * r2d[i]
                        if rho2 > cut * cut:
                            f_buf[k - lo] = 0.0
                            n_seen = k - lo + 1
                            continue
                        o = opa[i]
                        if o < 0.0:
                            o = 0.0
                        elif o > 1.0:
                            o = 1.0
                        f = o * np.exp(-rho2 / (2.0 * r2d[i] * r2d[i]))
                        f_buf[k - lo] = f
                        n_seen = k - lo + 1
                        u_i = gr * col[i, 0] + gg * col[i, 1] + gb * col[i, 2] \
                            + gd * depth[i] + gs
                        total += u_i * f * trans
                        trans *= 1.0 - f
                    # pass 2: df via prefix subtraction, chain into accumulators
                    trans = 1.0
                    prefix = 0.0
                    for k in range(lo, lo + n_seen):
                        i = csr_idx[k]
                        f = f_buf[k - lo]
                        if f == 0.0:
                            continue
                        u_i = gr * col[i, 0] + gg * col[i, 1] + gb * col[i, 2] \
                            + gd * depth[i] + gs
                        w = f * trans
                        prefix += u_i * w
                        suffix = total - prefix
                        one_mf = 1.0 - f
                        if one_mf > 1e-12:
                            df = u_i * trans - suffix / one_mf
                        else:
                            df = u_i * trans
                        o = opa[i]
                        if o < 0.0:
                            o = 0.0
                        elif o > 1.0:
                            o = 1.0
                        dx = cx - uv[i, 0]
                        dy = cy - uv[i, 1]
                        rho2 = dx * dx + dy * dy
                        g = np.exp(-rho2 / (2.0 * r2d[i] * r2d[i]))
                        dg = o * df
                        sig2 = r2d[i] * r2d[i]
                        common = dg * g / sig2
                        a_uv[i, 0] += common * dx
                        a_uv[i, 1] += common * dy
                        a_sig[i] += dg * g * rho2 / (sig2 * r2d[i])
                        a_dep[i] += gd * w
                        a_col[i, 0] += w * gr
                        a_col[i, 1] += w * gg
                        a_col[i, 2] += w * gb
                        a_opa[i] += g * df
                        trans *= 1.0 - f
