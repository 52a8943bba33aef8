"""Numba kernels for tile compositing, its adjoint, and gradient streaming.

Layout shared by all kernels: tile ``t`` owns the sorted contributor slice
``lists[ranges[t]:ranges[t+1]]``.  Per-(pixel, contributor) buffers live in a
flat array; pixel ``j`` (row-major inside the tile) of tile ``t`` with ``L``
contributors starts at ``offsets[t] + j * L``.
"""

import os

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old for numba and warns on every pool start
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

TILE = 16
T_EPS = 1e-4
# columns of the per-tile partial buffer
P_DU, P_DV, P_DA, P_DB, P_DC, P_DO, P_DR, P_DG, P_DBL, P_MAXW = range(10)
P_COLS = 10

_opts = dict(cache=True, nogil=True, fastmath=False)


@njit(**_opts)
def _forward_tile(t, tiles_x, width, height, ranges, lists, mean2d, conic, opac, rgb, bg,
                  img, t_final, n_contrib, wbuf, tbuf, offsets):
    start = ranges[t]
    count = ranges[t + 1] - start
    x0 = (t % tiles_x) * TILE
    y0 = (t // tiles_x) * TILE
    for ly in range(TILE):
        py = y0 + ly
        if py >= height:
            break
        for lx in range(TILE):
            px = x0 + lx
            if px >= width:
                break
            base = offsets[t] + (ly * TILE + lx) * count
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            done = 0
            for i in range(count):
                k = lists[start + i]
                dx = px + 0.5 - mean2d[k, 0]
                dy = py + 0.5 - mean2d[k, 1]
                power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                alpha = opac[k] * np.exp(power)
                w = alpha * T
                wbuf[base + i] = w
                tbuf[base + i] = T
                c0 += w * rgb[k, 0]
                c1 += w * rgb[k, 1]
                c2 += w * rgb[k, 2]
                T = T * (1.0 - alpha)
                done = i + 1
                if T < T_EPS:
                    break
            img[py, px, 0] = c0 + T * bg[0]
            img[py, px, 1] = c1 + T * bg[1]
            img[py, px, 2] = c2 + T * bg[2]
            t_final[py, px] = T
            n_contrib[py, px] = done


@njit(**_opts)
def forward_seq(tiles_x, width, height, ranges, lists, mean2d, conic, opac, rgb, bg,
                img, t_final, n_contrib, wbuf, tbuf, offsets):
    for t in range(len(ranges) - 1):
        _forward_tile(t, tiles_x, width, height, ranges, lists, mean2d, conic, opac, rgb, bg,
                      img, t_final, n_contrib, wbuf, tbuf, offsets)


@njit(parallel=True, **_opts)
def forward_par(tiles_x, width, height, ranges, lists, mean2d, conic, opac, rgb, bg,
                img, t_final, n_contrib, wbuf, tbuf, offsets):
    for t in prange(len(ranges) - 1):
        _forward_tile(t, tiles_x, width, height, ranges, lists, mean2d, conic, opac, rgb, bg,
                      img, t_final, n_contrib, wbuf, tbuf, offsets)


@njit(**_opts)
def _backward_tile(t, tiles_x, width, height, ranges, lists, mean2d, conic, opac, rgb, bg,
                   dl_dimg, t_final, n_contrib, wbuf, tbuf, offsets, part,
                   exact, raw_grad, min_w, ex_n, ex_mean, ex_m2):
    start = ranges[t]
    count = ranges[t + 1] - start
    x0 = (t % tiles_x) * TILE
    y0 = (t // tiles_x) * TILE
    for ly in range(TILE):
        py = y0 + ly
        if py >= height:
            break
        for lx in range(TILE):
            px = x0 + lx
            if px >= width:
                break
            base = offsets[t] + (ly * TILE + lx) * count
            g0 = dl_dimg[py, px, 0]
            g1 = dl_dimg[py, px, 1]
            g2 = dl_dimg[py, px, 2]
            # colour behind the current contributor, normalised by its transmittance
            b0 = bg[0]
            b1 = bg[1]
            b2 = bg[2]
            for i in range(n_contrib[py, px] - 1, -1, -1):
                k = lists[start + i]
                dx = px + 0.5 - mean2d[k, 0]
                dy = py + 0.5 - mean2d[k, 1]
                ca = conic[k, 0]
                cb = conic[k, 1]
                cc = conic[k, 2]
                gauss = np.exp(-0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy)
                alpha = opac[k] * gauss
                T = tbuf[base + i]
                w = wbuf[base + i]
                r0 = rgb[k, 0]
                r1 = rgb[k, 1]
                r2 = rgb[k, 2]
                part[t, k, P_DR] += w * g0
                part[t, k, P_DG] += w * g1
                part[t, k, P_DBL] += w * g2
                dl_dalpha = T * (g0 * (r0 - b0) + g1 * (r1 - b1) + g2 * (r2 - b2))
                part[t, k, P_DO] += gauss * dl_dalpha
                dl_dpower = alpha * dl_dalpha
                part[t, k, P_DU] += dl_dpower * (ca * dx + cb * dy)
                part[t, k, P_DV] += dl_dpower * (cb * dx + cc * dy)
                part[t, k, P_DA] += -0.5 * dx * dx * dl_dpower
                part[t, k, P_DB] += -dx * dy * dl_dpower
                part[t, k, P_DC] += -0.5 * dy * dy * dl_dpower
                if w > part[t, k, P_MAXW]:
                    part[t, k, P_MAXW] = w
                if exact and w > min_w:
                    s = 1.0 if raw_grad else w
                    ex_n[t, k] += 1
                    for c in range(3):
                        g = s * dl_dimg[py, px, c]
                        d = g - ex_mean[t, k, c]
                        ex_mean[t, k, c] += d / ex_n[t, k]
                        ex_m2[t, k, c] += d * (g - ex_mean[t, k, c])
                b0 = alpha * r0 + (1.0 - alpha) * b0
                b1 = alpha * r1 + (1.0 - alpha) * b1
                b2 = alpha * r2 + (1.0 - alpha) * b2


@njit(**_opts)
def backward_seq(tiles_x, width, height, ranges, lists, mean2d, conic, opac, rgb, bg,
                 dl_dimg, t_final, n_contrib, wbuf, tbuf, offsets, part,
                 exact, raw_grad, min_w, ex_n, ex_mean, ex_m2):
    for t in range(len(ranges) - 1):
        _backward_tile(t, tiles_x, width, height, ranges, lists, mean2d, conic, opac, rgb, bg,
                       dl_dimg, t_final, n_contrib, wbuf, tbuf, offsets, part,
                       exact, raw_grad, min_w, ex_n, ex_mean, ex_m2)


@njit(parallel=True, **_opts)
def backward_par(tiles_x, width, height, ranges, lists, mean2d, conic, opac, rgb, bg,
                 dl_dimg, t_final, n_contrib, wbuf, tbuf, offsets, part,
                 exact, raw_grad, min_w, ex_n, ex_mean, ex_m2):
    for t in prange(len(ranges) - 1):
        _backward_tile(t, tiles_x, width, height, ranges, lists, mean2d, conic, opac, rgb, bg,
                       dl_dimg, t_final, n_contrib, wbuf, tbuf, offsets, part,
                       exact, raw_grad, min_w, ex_n, ex_mean, ex_m2)


@njit(**_opts)
def merge_tile_partials(ex_n, ex_mean, ex_m2, live_n, live_mean, live_m2):
    """Chan-merge per-tile partials into the live stats, tiles in ascending order."""
    n_tiles, n_gauss = ex_n.shape
    for t in range(n_tiles):
        for k in range(n_gauss):
            nb = ex_n[t, k]
            if nb == 0:
                continue
            na = live_n[k]
            n = na + nb
            for c in range(3):
                d = ex_mean[t, k, c] - live_mean[k, c]
                live_mean[k, c] += d * (nb / n)
                live_m2[k, c] += ex_m2[t, k, c] + d * d * (na * nb / n)
            live_n[k] = n


@njit(**_opts)
def stream_recursive(tiles_x, width, height, ranges, lists, dl_dimg, n_contrib, wbuf, offsets,
                 raw_grad, min_w, live_n, live_mean, live_var):
    """Recursive mean/variance update over pixels in global row-major order."""
    for py in range(height):
        for px in range(width):
            t = (py // TILE) * tiles_x + px // TILE
            start = ranges[t]
            count = ranges[t + 1] - start
            base = offsets[t] + ((py % TILE) * TILE + px % TILE) * count
            for i in range(n_contrib[py, px]):
                w = wbuf[base + i]
                if not w > min_w:
                    continue
                k = lists[start + i]
                s = 1.0 if raw_grad else w
                n = live_n[k]
                if n == 0:
                    for c in range(3):
                        live_mean[k, c] = s * dl_dimg[py, px, c]
                        live_var[k, c] = 0.0
                else:
                    beta_next = 1.0 / (n + 1)
                    beta_cur = 1.0 / n
                    for c in range(3):
                        d = s * dl_dimg[py, px, c] - live_mean[k, c]
                        live_var[k, c] = (1.0 - beta_cur) * live_var[k, c] + beta_next * d * d
                        live_mean[k, c] = live_mean[k, c] + beta_next * d
                live_n[k] = n + 1
