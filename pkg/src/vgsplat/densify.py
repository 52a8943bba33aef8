"""Adaptive density control: selection, clone/split, pruning and opacity reset."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DensifyConfig
from .core import GaussianSet, logit, quat_to_rotmat, sigmoid
from .gradstats import GradAccum, densify_mask


def select(accum: GradAccum, cfg: DensifyConfig, gamma: float | None = None) -> np.ndarray:
    """Ascending indices whose gamma-scaled variance plus mean gradient norm exceeds tau_th."""
    g = cfg.gamma if gamma is None else gamma
    return np.flatnonzero(densify_mask(accum, g, cfg.tau_th))


def select_baseline(accum: GradAccum, cfg: DensifyConfig) -> np.ndarray:
    return select(accum, cfg, gamma=0.0)


def scene_extent(camera_centers) -> float:
    """1.1 x the radius of the bounding sphere of the camera centres (about their mean)."""
    c = np.asarray(camera_centers, dtype=np.float64).reshape(-1, 3)
    center = c.mean(axis=0)
    return 1.1 * float(np.max(np.linalg.norm(c - center, axis=1)))


def densify_gaussians(gs: GaussianSet, indices, cfg: DensifyConfig, extent: float, seed: int,
                      position_grad=None, step: float = 0.0):
    """Clone small and split large selected Gaussians.

    Returns ``(new_set, source, fresh)``: row ``i`` of the new set derives from
    old row ``source[i]``; ``fresh`` marks rows created here (clones, split
    children).  Row order: unsplit originals, then clones, then split children.
    """
    idx = np.asarray(indices, dtype=np.int64)
    n = len(gs)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"densify index out of range for {n} Gaussians")
    idx = np.unique(idx)
    big = np.max(gs.scales[idx], axis=1) >= cfg.percent_dense * extent if idx.size else np.zeros(0, bool)
    clone_idx = idx[~big]
    split_idx = idx[big]

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    kept = np.flatnonzero(keep)

    clones = gs.subset(clone_idx)
    if position_grad is not None and len(clone_idx):
        clones.positions -= step * np.sign(np.asarray(position_grad)[clone_idx])

    rng = np.random.default_rng(seed)
    parents = np.repeat(split_idx, 2)
    children = gs.subset(parents)
    if len(parents):
        local = rng.normal(0.0, 1.0, size=(len(parents), 3)) * gs.scales[parents]
        rot = quat_to_rotmat(gs.rotations[parents])
        children.positions = gs.positions[parents] + np.einsum("nij,nj->ni", rot, local)
        children.log_scales = gs.log_scales[parents] - np.log(cfg.split_factor)

    out = GaussianSet.concat([gs.subset(kept), clones, children])
    source = np.concatenate([kept, clone_idx, parents])
    fresh = np.concatenate([np.zeros(len(kept), bool), np.ones(len(clone_idx) + len(parents), bool)])
    return out, source, fresh


def clone_or_split(gs: GaussianSet, indices, cfg: DensifyConfig, scene_extent: float, seed: int = 0,
                   position_grad=None, step: float = 0.0) -> GaussianSet:
    return densify_gaussians(gs, indices, cfg, scene_extent, seed, position_grad, step)[0]


def prune_mask(gs: GaussianSet, prune_opacity: float, max_screen_radius=None, radii=None) -> np.ndarray:
    """True for survivors."""
    keep = gs.opacities >= prune_opacity
    if max_screen_radius is not None and radii is not None:
        keep &= np.asarray(radii) <= max_screen_radius
    return keep


def prune(gs: GaussianSet, prune_opacity: float, max_screen_radius=None, radii=None) -> GaussianSet:
    return gs.subset(prune_mask(gs, prune_opacity, max_screen_radius, radii))


def reset_opacity(gs: GaussianSet, ceiling: float = 0.01) -> GaussianSet:
    out = gs.copy()
    out.opacity_logits = np.minimum(out.opacity_logits, logit(ceiling))
    return out


@dataclass
class DensifyEvent:
    step: int
    n_before: int
    n_selected_vgd_only: int
    n_selected_baseline: int
    n_after: int

    HEADER = "step,n_before,n_selected_vgd_only,n_selected_baseline,n_after"

    def row(self) -> str:
        return f"{self.step},{self.n_before},{self.n_selected_vgd_only},{self.n_selected_baseline},{self.n_after}"


def densify_and_prune(gs: GaussianSet, accum: GradAccum, cfg: DensifyConfig, gamma: float, extent: float,
                      step: int, seed: int, position_grad=None, nudge: float = 0.0):
    """One controller pass. Returns (new_set, source, fresh, keep, event) and zeroes ``accum``.

    ``source``/``fresh`` describe the densified set, ``keep`` the pruning of it.
    """
    chosen = select(accum, cfg, gamma)
    baseline = select_baseline(accum, cfg)
    dense, source, fresh = densify_gaussians(gs, chosen, cfg, extent, seed, position_grad, nudge)
    radii = accum.max_radii[source]
    radii = np.where(fresh, 0.0, radii)
    keep = prune_mask(dense, cfg.prune_opacity, cfg.max_screen_radius, radii)
    out = dense.subset(keep)
    event = DensifyEvent(step, len(gs), int(np.setdiff1d(chosen, baseline).size), int(baseline.size), len(out))
    accum.reset(len(out))
    return out, source, fresh, keep, event
