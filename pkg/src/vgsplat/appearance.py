"""View-direction hash encoding and the colour MLP.

Directions live on the unit sphere, so the grid's bounding box is fixed to
[-1, 1]^3.  At level ``l`` a point ``x`` falls in cell ``floor(x * N_l / 2)``
(cell edge ``2 / N_l``) and its eight corners are hashed into a table of
``2**log2_T`` slots with ``F`` features each.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRIMES = (1, 2654435761, 805459861)
# corner c has offsets (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


def level_resolutions(levels: int, base_res: int, max_res: int) -> np.ndarray:
    if levels == 1:
        return np.array([base_res], dtype=np.int64)
    growth = np.exp((np.log(max_res) - np.log(base_res)) / (levels - 1))
    # the epsilon keeps exact powers (e.g. the finest level) from flooring one below
    res = np.floor(base_res * growth ** np.arange(levels) + 1e-9).astype(np.int64)
    if np.any(np.diff(res) <= 0):
        raise ValueError(f"level resolutions not strictly increasing: {res.tolist()}")
    return res


def hash_index(cells, log2_T: int = 19) -> np.ndarray:
    """Spatial hash of integer cells, ``(x*p1 ^ y*p2 ^ z*p3) mod 2**log2_T`` on uint32."""
    c = np.asarray(cells, dtype=np.int64).astype(np.uint32)
    h = c[..., 0] * np.uint32(PRIMES[0])
    h ^= c[..., 1] * np.uint32(PRIMES[1])
    h ^= c[..., 2] * np.uint32(PRIMES[2])
    return (h & np.uint32((1 << log2_T) - 1)).astype(np.int64)


@dataclass
class DirHashGrid:
    levels: int = 8
    base_res: int = 8
    max_res: int = 64
    log2_T: int = 19
    n_features: int = 2
    tables: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.resolutions = level_resolutions(self.levels, self.base_res, self.max_res)
        # bumped whenever the tables change; encoding contexts record it
        self.version = 0
        shape = (self.levels, 1 << self.log2_T, self.n_features)
        if self.tables is None:
            rng = np.random.default_rng(self.seed)
            self.tables = rng.uniform(-1e-4, 1e-4, size=shape)
        else:
            self.tables = np.ascontiguousarray(self.tables, dtype=np.float64)
            if self.tables.shape != shape:
                raise ValueError(f"table shape {self.tables.shape} does not match grid shape {shape}")

    @property
    def table_size(self) -> int:
        return 1 << self.log2_T

    @property
    def out_dim(self) -> int:
        return self.levels * self.n_features

    def hash_index(self, cell, level: int) -> np.ndarray:
        """Table slot of ``cell``; every level shares the same table size."""
        return hash_index(cell, self.log2_T)


@dataclass
class EncodeContext:
    index: np.ndarray  # (M, L, 8) slots
    weight: np.ndarray  # (M, L, 8) trilinear weights
    table_shape: tuple
    version: int = 0


@dataclass
class SparseTableGrad:
    level: np.ndarray
    index: np.ndarray
    values: np.ndarray

    def to_dense(self, shape) -> np.ndarray:
        out = np.zeros(shape)
        np.add.at(out, (self.level, self.index), self.values)
        return out


def interpolate_level(table: np.ndarray, resolution: int, points: np.ndarray, log2_T: int):
    """Trilinear lookup of ``points`` (M, 3) in one level; returns (features, slots, weights)."""
    pos = np.asarray(points, dtype=np.float64) * (0.5 * resolution)
    base = np.floor(pos)
    frac = pos - base
    cells = base.astype(np.int64)[:, None, :] + CORNERS[None]
    slots = hash_index(cells, log2_T)
    wsel = np.where(CORNERS[None].astype(bool), frac[:, None, :], 1.0 - frac[:, None, :])
    weights = wsel[..., 0] * wsel[..., 1] * wsel[..., 2]
    feats = np.einsum("mc,mcf->mf", weights, table[slots])
    return feats, slots, weights


def encode(grid: DirHashGrid, dirs, check_unit: bool = True) -> tuple[np.ndarray, EncodeContext]:
    """Concatenated per-level features, level 0 first, shape (M, L*F)."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if check_unit and len(d) and np.max(np.abs(np.linalg.norm(d, axis=1) - 1.0)) > 1e-6:
        raise ValueError("encode expects unit-length directions")
    m = len(d)
    feats = np.empty((m, grid.levels * grid.n_features))
    index = np.empty((m, grid.levels, 8), dtype=np.int64)
    weight = np.empty((m, grid.levels, 8))
    f = grid.n_features
    for lvl, res in enumerate(grid.resolutions):
        out, slots, w = interpolate_level(grid.tables[lvl], int(res), d, grid.log2_T)
        feats[:, lvl * f:(lvl + 1) * f] = out
        index[:, lvl] = slots
        weight[:, lvl] = w
    return feats, EncodeContext(index, weight, grid.tables.shape, grid.version)


def encode_backward(ctx: EncodeContext, dl_dfeatures, grid: DirHashGrid | None = None) -> SparseTableGrad:
    """Scatter feature gradients onto the 8 corners of every level, scaled by the trilinear weights."""
    if grid is not None and (grid.tables.shape != ctx.table_shape or grid.version != ctx.version):
        raise ValueError("stale encoding context")
    g = np.asarray(dl_dfeatures, dtype=np.float64)
    m, n_levels, _ = ctx.index.shape
    f = ctx.table_shape[2]
    if g.shape != (m, n_levels * f):
        raise ValueError(f"gradient shape {g.shape} does not match encoding {(m, n_levels * f)}")
    g = g.reshape(m, n_levels, 1, f)
    vals = ctx.weight[..., None] * g  # (M, L, 8, F)
    level = np.broadcast_to(np.arange(n_levels)[None, :, None], ctx.index.shape)
    return SparseTableGrad(level.reshape(-1), ctx.index.reshape(-1), vals.reshape(-1, f))


def sphere_slots(grid: DirHashGrid, tol: float = 1e-9) -> list[np.ndarray]:
    """Per level, the table slots of corners of cells that intersect the unit sphere."""
    out = []
    for res in grid.resolutions:
        r = 0.5 * res  # sphere radius in cell units
        lo, hi = int(np.floor(-r)) - 1, int(np.ceil(r)) + 1
        ax = np.arange(lo, hi)
        i, j, k = np.meshgrid(ax, ax, ax, indexing="ij")
        cells = np.stack([i, j, k], -1).reshape(-1, 3)
        nearest = np.clip(0.0, cells, cells + 1)
        far = np.maximum(np.abs(cells), np.abs(cells + 1))
        dmin = np.linalg.norm(nearest, axis=1)
        dmax = np.linalg.norm(far, axis=1)
        hit = cells[(dmin <= r + tol) & (dmax >= r - tol)]
        corners = hit[:, None, :] + CORNERS[None]
        out.append(np.unique(hash_index(corners, grid.log2_T)))
    return out


def view_direction(position, camera_center) -> np.ndarray:
    """Unit vector from the camera centre to each position."""
    diff = np.asarray(position, dtype=np.float64) - np.asarray(camera_center, dtype=np.float64)
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("position coincides with the camera centre")
    return diff / norm


def perturb_direction(dirs, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    d = np.asarray(dirs, dtype=np.float64)
    if noise_std == 0:
        return d.copy()
    noisy = d + rng.normal(0.0, noise_std, size=d.shape)
    return noisy / np.linalg.norm(noisy, axis=-1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ColorMLP:
    """Two ReLU hidden layers and a sigmoid output; weights stored as ``x @ W + b``."""

    in_dim: int
    hidden: int = 64
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            rng = np.random.default_rng(self.seed)
            dims = [self.in_dim, self.hidden, self.hidden, 3]
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
                self.params[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
                self.params[f"b{i}"] = np.zeros(b)
        if self.params["W1"].shape[0] != self.in_dim:
            raise ValueError("W1 does not match in_dim")

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"MLP expects input of width {self.in_dim}, got {x.shape}")
        p = self.params
        z1 = x @ p["W1"] + p["b1"]
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ p["W2"] + p["b2"]
        h2 = np.maximum(z2, 0.0)
        out = _sigmoid(h2 @ p["W3"] + p["b3"])
        return out, (x, z1, h1, z2, h2, out)

    def backward(self, cache, dl_dout):
        x, z1, h1, z2, h2, out = cache
        p = self.params
        d3 = dl_dout * out * (1.0 - out)
        grads = {"W3": h2.T @ d3, "b3": d3.sum(0)}
        d2 = (d3 @ p["W3"].T) * (z2 > 0)
        grads["W2"] = h1.T @ d2
        grads["b2"] = d2.sum(0)
        d1 = (d2 @ p["W2"].T) * (z1 > 0)
        grads["W1"] = x.T @ d1
        grads["b1"] = d1.sum(0)
        return grads, d1 @ p["W1"].T


def color(mlp: ColorMLP, feature_embed, dir_encoding):
    """RGB in (0, 1) from ``[feature_embed | dir_encoding]``; returns (rgb, cache)."""
    fe = np.atleast_2d(feature_embed)
    de = np.atleast_2d(dir_encoding)
    if fe.shape[1] + de.shape[1] != mlp.in_dim:
        raise ValueError(f"input width {fe.shape[1]} + {de.shape[1]} != {mlp.in_dim}")
    rgb, cache = mlp.forward(np.concatenate([fe, de], axis=1))
    return rgb, (cache, fe.shape[1])


def color_backward(mlp: ColorMLP, cache, dl_drgb):
    """Returns (weight grads, dL/dfeature_embed, dL/ddir_encoding)."""
    inner, f_dim = cache
    grads, dx = mlp.backward(inner, dl_drgb)
    return grads, dx[:, :f_dim], dx[:, f_dim:]
