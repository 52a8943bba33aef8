"""Gaussian, camera and scene containers plus parameter activations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

FEATURE_DIM = 16
MIN_SCALE = 1e-7
INIT_OPACITY = 0.1


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


@dataclass
class GaussianSet:
    """Structure-of-arrays store for N Gaussians.

    ``log_scales`` hold the log of the per-axis standard deviation and
    ``rotations`` are (w, x, y, z) quaternions, renormalized on use.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != n:
            raise ValueError(f"features must have shape (N, F), got {self.features.shape} for N={n}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> GaussianSet:
        return GaussianSet(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.features.copy(),
        )

    def subset(self, idx) -> GaussianSet:
        return GaussianSet(
            self.positions[idx],
            self.log_scales[idx],
            self.rotations[idx],
            self.opacity_logits[idx],
            self.features[idx],
        )

    @classmethod
    def concat(cls, parts) -> GaussianSet:
        parts = list(parts)
        return cls(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.log_scales for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.opacity_logits for p in parts]),
            np.concatenate([p.features for p in parts]),
        )

    @classmethod
    def empty(cls, feature_dim: int = FEATURE_DIM) -> GaussianSet:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, feature_dim)))

    def check(self) -> None:
        """Raise if any array is non-finite or a quaternion is degenerate."""
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "features"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if len(self) and np.any(np.linalg.norm(self.rotations, axis=1) == 0):
            raise ValueError("zero quaternion")


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.width < 1 or self.height < 1:
            raise ValueError(f"camera size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-9:
            raise ValueError("world_to_camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> Camera:
        """Camera at ``eye`` looking at ``target`` (camera +z forward, +y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(
            fx, fy,
            width / 2 if cx is None else cx,
            height / 2 if cy is None else cy,
            width, height, rot, -rot @ eye,
        )


@dataclass
class Scene:
    gaussians: GaussianSet
    train_views: list  # (Camera, image HxWx3)
    test_views: list = field(default_factory=list)

    def __post_init__(self):
        if not self.train_views:
            raise ValueError("scene needs at least one training camera")
        for cam, img in list(self.train_views) + list(self.test_views):
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"image shape {img.shape[:2]} does not match camera {cam.height}x{cam.width}")


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z), normalized first."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def build_covariance(log_scale, rotation) -> np.ndarray:
    """Sigma = R diag(exp(2 log_scale)) R^T, batched over leading axes."""
    R = quat_to_rotmat(rotation)
    M = R * np.exp(np.asarray(log_scale, dtype=np.float64))[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def init_from_points(points, colors=None, seed: int = 0, feature_dim: int = FEATURE_DIM) -> GaussianSet:
    """One isotropic Gaussian per point, sized by the mean distance to its 3 nearest neighbours.

    ``colors`` is accepted for interface parity; appearance comes from the
    feature embedding so the colours are not stored.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot initialize from an empty point set")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    n = len(pts)
    if n == 1:
        # no neighbours at all; fall back to the clamp
        mean_dist = np.array([MIN_SCALE])
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(pts).query(pts, k=k + 1)
        mean_dist = dist[:, 1:].mean(axis=1)
    mean_dist = np.maximum(mean_dist, MIN_SCALE)
    rng = np.random.default_rng(seed)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianSet(
        positions=pts.copy(),
        log_scales=np.repeat(np.log(mean_dist)[:, None], 3, axis=1),
        rotations=rotations,
        opacity_logits=np.full(n, logit(INIT_OPACITY)),
        features=rng.normal(0.0, 0.1, size=(n, feature_dim)),
    )
