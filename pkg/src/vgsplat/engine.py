"""Training loop, evaluation and statistics replay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import appearance as app
from .config import TrainConfig
from .core import Camera, GaussianSet, Scene
from .densify import DensifyEvent, densify_and_prune, reset_opacity, scene_extent
from .gradstats import GradAccum
from .metrics import loss as image_loss
from .metrics import psnr, ssim
from .optim import AdamState, adam_step, remap_rows, reset_rows
from .raster import StreamConfig, backward, render

log = logging.getLogger(__name__)

GAUSSIAN_PARAMS = ("positions", "log_scales", "rotations", "opacity_logits", "features")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Model:
    """Everything a checkpoint stores: Gaussians, colour MLP, direction grid."""

    gaussians: GaussianSet
    mlp: app.ColorMLP
    grid: app.DirHashGrid
    lhe: bool = True
    iteration: int = 0
    config: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def create(cls, gaussians: GaussianSet, cfg: TrainConfig) -> Model:
        if gaussians.feature_dim != cfg.feature_dim:
            raise ValueError(f"Gaussians carry {gaussians.feature_dim} features, config expects {cfg.feature_dim}")
        grid = app.DirHashGrid(cfg.hash_levels, cfg.hash_base_res, cfg.hash_max_res, cfg.hash_log2_T,
                               cfg.hash_features, seed=cfg.seed + 1)
        in_dim = gaussians.feature_dim + (grid.out_dim if cfg.lhe else 3)
        mlp = app.ColorMLP(in_dim, cfg.mlp_hidden, seed=cfg.seed + 2)
        return cls(gaussians, mlp, grid, cfg.lhe, 0, cfg)

    def colors(self, camera: Camera, noise_std: float = 0.0, rng=None):
        """Per-Gaussian RGB for ``camera``; returns (rgb, cache for :meth:`colors_backward`)."""
        dirs = app.view_direction(self.gaussians.positions, camera.center)
        ectx = None
        if self.lhe:
            if noise_std > 0:
                dirs = app.perturb_direction(dirs, noise_std, rng)
            enc, ectx = app.encode(self.grid, dirs)
        else:
            enc = dirs
        rgb, mcache = app.color(self.mlp, self.gaussians.features, enc)
        return rgb, (mcache, ectx)

    def colors_backward(self, cache, dl_drgb):
        mcache, ectx = cache
        mlp_grads, d_feat, d_enc = app.color_backward(self.mlp, mcache, dl_drgb)
        table_grad = app.encode_backward(ectx, d_enc, self.grid) if ectx is not None else None
        return mlp_grads, d_feat, table_grad

    def render(self, camera: Camera, noise_std: float = 0.0, rng=None):
        rgb, cache = self.colors(camera, noise_std, rng)
        img, ctx = render(self.gaussians, camera, rgb, self.config.background, self.config.parallel)
        return img, ctx, cache


@dataclass
class TrainResult:
    model: Model
    metrics: list = field(default_factory=list)  # (iter, loss, psnr_train, n_gaussians)
    curves: list = field(default_factory=list)  # (iter, q1, q2, q3, q4)
    events: list = field(default_factory=list)  # DensifyEvent
    accum: GradAccum | None = None

    METRICS_HEADER = "iter,loss,psnr_train,n_gaussians"
    CURVES_HEADER = "iter,q1_dbar,q2_dbar,q3_dbar,q4_dbar"


def quartile_means(values: np.ndarray) -> tuple[float, float, float, float]:
    """Means of the four ascending quartile groups (q4 = highest values)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    groups = np.array_split(v, 4)
    return tuple(float(g.mean()) if g.size else float("nan") for g in groups)


def position_lr(cfg: TrainConfig, step: int, extent: float) -> float:
    t = np.clip(step / max(cfg.iterations, 1), 0.0, 1.0)
    return float(np.exp(np.log(cfg.lr_position) * (1 - t) + np.log(cfg.lr_position_final) * t)) * extent


class _EpochSampler:
    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.queue: list = []

    def next(self) -> int:
        if not self.queue:
            self.queue = list(self.rng.permutation(self.n))
        return int(self.queue.pop())


def train(scene: Scene, cfg: TrainConfig, model: Model | None = None) -> TrainResult:
    """Optimize a model on ``scene.train_views``; deterministic given ``cfg.seed``."""
    cfg.validate()
    model = model or Model.create(scene.gaussians.copy(), cfg)
    result = TrainResult(model)
    gs = model.gaussians
    rng = np.random.default_rng(cfg.seed)
    noise_rng = np.random.default_rng(cfg.seed + 101)
    sampler = _EpochSampler(len(scene.train_views), rng)
    extent = scene_extent([cam.center for cam, _ in scene.train_views]) or 1.0
    accum = GradAccum(len(gs), cfg.estimator)
    stream_cfg = StreamConfig(raw_grad=cfg.color_grad == "raw")
    state = AdamState()
    lr = {
        "log_scales": cfg.lr_log_scales, "rotations": cfg.lr_rotations, "opacity_logits": cfg.lr_opacity,
        "features": cfg.lr_features, "tables": cfg.lr_hash,
    }
    lr.update({k: cfg.lr_mlp for k in model.mlp.params})
    gamma = cfg.effective_gamma
    dcfg = cfg.densify
    noise = cfg.noise_std if cfg.lhe else 0.0

    for it in range(1, cfg.iterations + 1):
        cam, target = scene.train_views[sampler.next()]
        img, ctx, cache = model.render(cam, noise, noise_rng)
        value, dl = image_loss(img, target, cfg.lambda_dssim)
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: n={len(gs)}, "
                f"finite params={[bool(np.all(np.isfinite(getattr(gs, k)))) for k in GAUSSIAN_PARAMS]}"
            )
        pg = backward(ctx, dl, accum, stream_cfg)
        mlp_grads, d_feat, table_grad = model.colors_backward(cache, pg.rgb)

        params = {k: getattr(gs, k) for k in GAUSSIAN_PARAMS}
        grads = {"positions": pg.positions, "log_scales": pg.log_scales, "rotations": pg.rotations,
                 "opacity_logits": pg.opacity_logits, "features": d_feat}
        params.update(model.mlp.params)
        grads.update(mlp_grads)
        if table_grad is not None:
            params["tables"] = model.grid.tables
            grads["tables"] = table_grad.to_dense(model.grid.tables.shape)
        lr["positions"] = position_lr(cfg, it, extent)
        adam_step(state, params, grads, lr)
        model.grid.version += 1

        result.metrics.append((it, value, psnr(img, target), len(gs)))

        if cfg.stats_interval and it % cfg.stats_interval == 0:
            _, dbar = accum.statistics()
            result.curves.append((it, *quartile_means(dbar[accum.view_count > 0])))

        if dcfg.start_step < it <= cfg.densify_end and it % dcfg.interval == 0:
            gs, source, fresh, keep, event = densify_and_prune(
                gs, accum, dcfg, gamma, extent, it, seed=cfg.seed * 1_000_003 + it,
                position_grad=pg.positions, nudge=lr["positions"],
            )
            remap_rows(state, GAUSSIAN_PARAMS, source, fresh)
            remap_rows(state, GAUSSIAN_PARAMS, np.flatnonzero(keep), np.zeros(keep.sum(), bool))
            model.gaussians = gs
            result.events.append(event)
            log.debug("densify @%d: %s", it, event)

        if dcfg.opacity_reset_interval and it % dcfg.opacity_reset_interval == 0:
            gs.opacity_logits[:] = reset_opacity(gs, dcfg.opacity_reset_value).opacity_logits
            reset_rows(state, "opacity_logits")

    model.iteration += cfg.iterations
    result.accum = accum
    return result


def evaluate(model: Model, views) -> dict:
    """Per-view and mean PSNR/SSIM with direction noise disabled."""
    views = list(views)
    if not views:
        raise ValueError("evaluate needs at least one view")
    rows = []
    for i, (cam, target) in enumerate(views):
        img, _, _ = model.render(cam)
        rows.append((i, psnr(img, target), ssim(img, target)))
    return {
        "views": rows,
        "psnr": float(np.mean([r[1] for r in rows])),
        "ssim": float(np.mean([r[2] for r in rows])),
    }


def replay_stats(model: Model, views, estimator: str = "recursive", color_grad: str = "weighted",
                 lambda_dssim: float | None = None) -> GradAccum:
    """Accumulate gradient statistics over ``views`` once, without updating anything."""
    lam = model.config.lambda_dssim if lambda_dssim is None else lambda_dssim
    accum = GradAccum(len(model.gaussians), estimator)
    stream_cfg = StreamConfig(raw_grad=color_grad == "raw")
    for cam, target in views:
        img, ctx, _ = model.render(cam)
        _, dl = image_loss(img, target, lam)
        backward(ctx, dl, accum, stream_cfg)
    return accum
