"""Tile-based EWA splatting: projection, front-to-back compositing and its analytic adjoint.

Pixel ``(i, j)`` has its centre at continuous image coordinate ``(i + 0.5, j + 0.5)``;
NDC is ``2 u / W - 1`` so one pixel spans ``2 / W`` NDC units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .core import Camera, GaussianSet, quat_to_rotmat, sigmoid
from .gradstats import VISIBLE_WEIGHT, GradAccum

NEAR = 0.01
LOW_PASS = 0.3
TILE = K.TILE


@dataclass
class Projected2D:
    index: int
    ndc_xy: np.ndarray
    pixel_xy: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: int


@dataclass
class Projection:
    """Batched projection of every Gaussian; rows with ``valid == False`` were culled."""

    valid: np.ndarray
    t_cam: np.ndarray
    depth: np.ndarray
    mean2d: np.ndarray
    ndc: np.ndarray
    cov3d: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    jac: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    radius: np.ndarray
    opacity: np.ndarray
    quats: np.ndarray


def _project(gs: GaussianSet, cam: Camera) -> Projection:
    n = len(gs)
    t = cam.world_to_camera(gs.positions) if n else np.zeros((0, 3))
    z = t[:, 2]
    valid = z >= NEAR
    zs = np.where(valid, z, 1.0)
    rot = quat_to_rotmat(gs.rotations) if n else np.zeros((0, 3, 3))
    scales = np.exp(gs.log_scales)
    m = rot * scales[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * t[:, 0] / zs**2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * t[:, 1] / zs**2
    tm = jac @ cam.rotation
    cov2d = tm @ cov3d @ np.swapaxes(tm, 1, 2)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    a, b, c = cov2d[:, 0, 0], 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0]), cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(3.0 * np.sqrt(lam)).astype(np.int64)

    mean2d = np.stack([cam.fx * t[:, 0] / zs + cam.cx, cam.fy * t[:, 1] / zs + cam.cy], axis=1)
    ndc = np.stack([2.0 * mean2d[:, 0] / cam.width - 1.0, 2.0 * mean2d[:, 1] / cam.height - 1.0], axis=1)
    return Projection(valid, t, z, mean2d, ndc, cov3d, rot, scales, jac, cov2d, conic, radius,
                      sigmoid(gs.opacity_logits), gs.rotations.copy())


def project(gaussians: GaussianSet, camera: Camera) -> list[Projected2D]:
    """Project every Gaussian in front of the near plane (z >= 0.01) into ``camera``."""
    p = _project(gaussians, camera)
    return [
        Projected2D(int(i), p.ndc[i].copy(), p.mean2d[i].copy(), p.cov2d[i].copy(),
                    float(p.depth[i]), int(p.radius[i]))
        for i in np.flatnonzero(p.valid)
    ]


def _bin_tiles(p: Projection, width: int, height: int):
    tiles_x = -(-width // TILE)
    tiles_y = -(-height // TILE)
    n_tiles = tiles_x * tiles_y
    idx = np.flatnonzero(p.valid)
    u, v = p.mean2d[idx, 0], p.mean2d[idx, 1]
    r = p.radius[idx]
    x0 = np.clip(np.floor((u - r) / TILE), 0, tiles_x).astype(np.int64)
    x1 = np.clip(np.floor((u + r) / TILE) + 1, 0, tiles_x).astype(np.int64)
    y0 = np.clip(np.floor((v - r) / TILE), 0, tiles_y).astype(np.int64)
    y1 = np.clip(np.floor((v + r) / TILE) + 1, 0, tiles_y).astype(np.int64)
    wx = np.maximum(x1 - x0, 0)
    counts = wx * np.maximum(y1 - y0, 0)
    total = int(counts.sum())
    gid = np.repeat(idx, counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    wrep = np.repeat(wx, counts)
    tile = (np.repeat(y0, counts) + local // np.maximum(wrep, 1)) * tiles_x + np.repeat(x0, counts) + local % np.maximum(wrep, 1)
    order = np.lexsort((gid, p.depth[gid], tile))
    lists = gid[order].astype(np.int64)
    ranges = np.zeros(n_tiles + 1, dtype=np.int64)
    ranges[1:] = np.cumsum(np.bincount(tile, minlength=n_tiles))
    lengths = np.diff(ranges)
    offsets = np.zeros(n_tiles, dtype=np.int64)
    offsets[1:] = np.cumsum(TILE * TILE * lengths)[:-1]
    return tiles_x, tiles_y, ranges, lists, offsets, int(TILE * TILE * lengths.sum())


@dataclass
class RenderContext:
    camera: Camera
    proj: Projection
    rgb: np.ndarray
    background: np.ndarray
    tiles_x: int
    tiles_y: int
    ranges: np.ndarray
    lists: np.ndarray
    offsets: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray
    final_transmittance: np.ndarray
    image: np.ndarray
    parallel: bool = False

    @property
    def n(self) -> int:
        return len(self.rgb)

    def pixel_contributors(self, py: int, px: int) -> tuple[np.ndarray, np.ndarray]:
        """(Gaussian indices, compositing weights) at a pixel, front to back."""
        t = (py // TILE) * self.tiles_x + px // TILE
        start, count = self.ranges[t], self.ranges[t + 1] - self.ranges[t]
        base = self.offsets[t] + ((py % TILE) * TILE + px % TILE) * count
        m = self.n_contrib[py, px]
        return self.lists[start:start + m].copy(), self.weights[base:base + m].copy()


def render(gaussians: GaussianSet, camera: Camera, per_gaussian_rgb, background=(0.0, 0.0, 0.0),
           parallel: bool = False) -> tuple[np.ndarray, RenderContext]:
    """Composite Gaussians front to back; returns an HxWx3 image and the backward context."""
    rgb = np.ascontiguousarray(per_gaussian_rgb, dtype=np.float64).reshape(-1, 3)
    if len(rgb) != len(gaussians):
        raise ValueError(f"per_gaussian_rgb has {len(rgb)} rows for {len(gaussians)} Gaussians")
    bg = np.ascontiguousarray(background, dtype=np.float64).reshape(3)
    p = _project(gaussians, camera)
    w, h = camera.width, camera.height
    tiles_x, tiles_y, ranges, lists, offsets, buf = _bin_tiles(p, w, h)
    img = np.empty((h, w, 3))
    t_final = np.empty((h, w))
    n_contrib = np.zeros((h, w), dtype=np.int64)
    wbuf = np.zeros(buf)
    tbuf = np.zeros(buf)
    fwd = K.forward_par if parallel else K.forward_seq
    fwd(tiles_x, w, h, ranges, lists, np.ascontiguousarray(p.mean2d), np.ascontiguousarray(p.conic),
        p.opacity, rgb, bg, img, t_final, n_contrib, wbuf, tbuf, offsets)
    ctx = RenderContext(camera, p, rgb, bg, tiles_x, tiles_y, ranges, lists, offsets, wbuf, tbuf,
                        n_contrib, t_final, img, parallel)
    return img, ctx


@dataclass
class ParamGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    rgb: np.ndarray
    mean2d: np.ndarray
    ndc: np.ndarray
    visible: np.ndarray


@dataclass
class StreamConfig:
    """How per-pixel colour gradients are streamed into the accumulator."""

    raw_grad: bool = False
    min_weight: float = VISIBLE_WEIGHT


def backward(ctx: RenderContext, dl_dimage, accum: GradAccum | None = None,
             stream: StreamConfig | None = None, finalize: bool = True) -> ParamGrads:
    """Adjoint of :func:`render`.

    When ``accum`` is given the per-pixel colour gradients are streamed into
    its live statistics and, with ``finalize``, every visible Gaussian is
    folded into the interval sums (NDC gradient norm, summed channel variance).
    """
    stream = stream or StreamConfig()
    cam = ctx.camera
    dl = np.ascontiguousarray(dl_dimage, dtype=np.float64)
    if dl.shape != (cam.height, cam.width, 3):
        raise ValueError(f"dL/dimage shape {dl.shape} does not match {(cam.height, cam.width, 3)}")
    n = ctx.n
    if accum is not None and accum.n != n:
        raise ValueError(f"accumulator sized {accum.n} for {n} Gaussians")
    n_tiles = len(ctx.ranges) - 1
    part = np.zeros((n_tiles, n, K.P_COLS))
    exact = accum is not None and accum.mode == "exact"
    shape = (n_tiles, n) if exact else (1, 1)
    ex_n = np.zeros(shape, dtype=np.int64)
    ex_mean = np.zeros(shape + (3,))
    ex_m2 = np.zeros(shape + (3,))
    p = ctx.proj
    bwd = K.backward_par if ctx.parallel else K.backward_seq
    bwd(ctx.tiles_x, cam.width, cam.height, ctx.ranges, ctx.lists, np.ascontiguousarray(p.mean2d),
        np.ascontiguousarray(p.conic), p.opacity, ctx.rgb, ctx.background, dl, ctx.final_transmittance,
        ctx.n_contrib, ctx.weights, ctx.transmittance, ctx.offsets, part,
        exact, stream.raw_grad, stream.min_weight, ex_n, ex_mean, ex_m2)
    sums = part.sum(axis=0)
    max_w = part[:, :, K.P_MAXW].max(axis=0) if n_tiles and n else np.zeros(n)

    d_mean2d = sums[:, [K.P_DU, K.P_DV]]
    ndc_grad = d_mean2d * np.array([0.5 * cam.width, 0.5 * cam.height])
    visible = max_w > VISIBLE_WEIGHT

    if accum is not None:
        accum.begin_view()
        if exact:
            K.merge_tile_partials(ex_n, ex_mean, ex_m2, accum.live_n, accum.live_mean, accum.live_m2)
        else:
            K.stream_recursive(ctx.tiles_x, cam.width, cam.height, ctx.ranges, ctx.lists, dl, ctx.n_contrib,
                           ctx.weights, ctx.offsets, stream.raw_grad, stream.min_weight,
                           accum.live_n, accum.live_mean, accum.live_var)
        if finalize:
            accum.max_radii = np.maximum(accum.max_radii, np.where(visible, p.radius, 0))
            accum.finalize_visible(visible, ndc_grad)

    grads = _chain(ctx, sums)
    return ParamGrads(*grads, rgb=sums[:, [K.P_DR, K.P_DG, K.P_DBL]], mean2d=d_mean2d, ndc=ndc_grad,
                      visible=visible)


def _chain(ctx: RenderContext, sums: np.ndarray):
    """Propagate per-Gaussian screen-space gradients to the 3D parameters."""
    cam = ctx.camera
    p = ctx.proj
    n = ctx.n
    d_pos = np.zeros((n, 3))
    d_ls = np.zeros((n, 3))
    d_rot = np.zeros((n, 4))
    d_op = sums[:, K.P_DO] * p.opacity * (1.0 - p.opacity)
    if n == 0:
        return d_pos, d_ls, d_rot, d_op
    v = p.valid
    conic = p.conic[v]
    q_mat = np.empty((len(conic), 2, 2))
    q_mat[:, 0, 0] = conic[:, 0]
    q_mat[:, 0, 1] = q_mat[:, 1, 0] = conic[:, 1]
    q_mat[:, 1, 1] = conic[:, 2]
    g_conic = np.empty_like(q_mat)
    g_conic[:, 0, 0] = sums[v, K.P_DA]
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = 0.5 * sums[v, K.P_DB]
    g_conic[:, 1, 1] = sums[v, K.P_DC]
    g_cov2 = -q_mat @ g_conic @ q_mat

    W = cam.rotation
    jac = p.jac[v]
    tm = jac @ W
    cov3 = p.cov3d[v]
    g_sigma = np.swapaxes(tm, 1, 2) @ g_cov2 @ tm
    g_tm = 2.0 * g_cov2 @ tm @ cov3
    g_j = g_tm @ W.T

    tx, ty, tz = p.t_cam[v].T
    du, dv = sums[v, K.P_DU], sums[v, K.P_DV]
    fx, fy = cam.fx, cam.fy
    iz, iz2, iz3 = 1.0 / tz, 1.0 / tz**2, 1.0 / tz**3
    g_t = np.stack([
        g_j[:, 0, 2] * (-fx * iz2) + du * fx * iz,
        g_j[:, 1, 2] * (-fy * iz2) + dv * fy * iz,
        g_j[:, 0, 0] * (-fx * iz2) + g_j[:, 0, 2] * (2 * fx * tx * iz3)
        + g_j[:, 1, 1] * (-fy * iz2) + g_j[:, 1, 2] * (2 * fy * ty * iz3)
        - du * fx * tx * iz2 - dv * fy * ty * iz2,
    ], axis=1)
    d_pos[v] = g_t @ W

    rot = p.rot[v]
    s = p.scales[v]
    m = rot * s[:, None, :]
    g_m = 2.0 * g_sigma @ m
    g_r = g_m * s[:, None, :]
    d_ls[v] = np.einsum("nij,nij->nj", g_m, rot) * s

    q_raw = p.quats[v]
    qn = np.linalg.norm(q_raw, axis=1, keepdims=True)
    w, x, y, z = (q_raw / qn).T
    G = g_r
    gw = 2 * z * (G[:, 1, 0] - G[:, 0, 1]) + 2 * y * (G[:, 0, 2] - G[:, 2, 0]) + 2 * x * (G[:, 2, 1] - G[:, 1, 2])
    gx = (2 * y * (G[:, 0, 1] + G[:, 1, 0]) + 2 * z * (G[:, 0, 2] + G[:, 2, 0])
          + 2 * w * (G[:, 2, 1] - G[:, 1, 2]) - 4 * x * (G[:, 1, 1] + G[:, 2, 2]))
    gy = (2 * x * (G[:, 0, 1] + G[:, 1, 0]) + 2 * w * (G[:, 0, 2] - G[:, 2, 0])
          + 2 * z * (G[:, 1, 2] + G[:, 2, 1]) - 4 * y * (G[:, 0, 0] + G[:, 2, 2]))
    gz = (2 * w * (G[:, 1, 0] - G[:, 0, 1]) + 2 * x * (G[:, 0, 2] + G[:, 2, 0])
          + 2 * y * (G[:, 1, 2] + G[:, 2, 1]) - 4 * z * (G[:, 0, 0] + G[:, 1, 1]))
    gq = np.stack([gw, gx, gy, gz], axis=1)
    qhat = q_raw / qn
    d_rot[v] = (gq - qhat * np.sum(qhat * gq, axis=1, keepdims=True)) / qn
    return d_pos, d_ls, d_rot, d_op

