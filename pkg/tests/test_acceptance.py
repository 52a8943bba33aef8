"""Acceptance criteria 1-9. Each test records one pass/fail line in the terminal summary."""

import time
from contextlib import contextmanager

import numpy as np
import pytest
import test_appearance as hash_suite
import test_io as io_suite
from conftest import ACCEPTANCE, central_difference, random_camera, random_gaussians

from vgsplat import experiments
from vgsplat.config import DensifyConfig, TrainConfig
from vgsplat.core import Camera, GaussianSet, Scene, logit
from vgsplat.densify import select, select_baseline
from vgsplat.engine import Model, train
from vgsplat.gradstats import VISIBLE_WEIGHT, GradAccum, merge_exact, stream
from vgsplat.metrics import loss as image_loss
from vgsplat.raster import backward, project, render

RTOL, ATOL = 1e-4, 1e-8
TAU = 0.0004
GAMMA = 2.0**11


@contextmanager
def criterion(number, label, budget=None):
    """Time a criterion and record its outcome; ``info['detail']`` is appended to the line."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
        secs = time.perf_counter() - t0
        if budget is not None:
            assert secs < budget, f"took {secs:.1f}s, budget {budget}s"
    except BaseException as exc:
        secs = time.perf_counter() - t0
        line = f"({secs:.1f}s) {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE.append((number, label, False, line))
        print(f"criterion {number} [{label}]: FAIL {line}")
        raise
    line = f"({secs:.1f}s) {info['detail']}".rstrip()
    ACCEPTANCE.append((number, label, True, line))
    print(f"criterion {number} [{label}]: PASS {line}")


# ---------------------------------------------------------------- 1. gradients

def _check(analytic, f, x, h):
    np.testing.assert_allclose(analytic, central_difference(f, x, h), rtol=RTOL, atol=ATOL)


def _gradient_scene(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    size = int(rng.integers(8, 17))
    gs = random_gaussians(rng, n, feature_dim=4)
    cam = random_camera(rng, size, size)
    target = rng.uniform(size=(size, size, 3))
    return rng, gs, cam, target


def _geometry_oracle(rng, gs, cam, target):
    rgb = rng.uniform(size=(len(gs), 3))

    def f():
        return image_loss(render(gs, cam, rgb)[0], target, 0.0)[0]

    img, ctx = render(gs, cam, rgb)
    g = backward(ctx, image_loss(img, target, 0.0)[1])
    for name, analytic in [("positions", g.positions), ("log_scales", g.log_scales),
                           ("rotations", g.rotations), ("opacity_logits", g.opacity_logits)]:
        _check(analytic, f, getattr(gs, name), 1e-6)
    _check(g.rgb, f, rgb, 1e-6)


def _appearance_oracle(rng, gs, cam, target):
    cfg = TrainConfig(feature_dim=4, mlp_hidden=8, hash_levels=4, hash_max_res=32, hash_log2_T=10,
                      lambda_dssim=0.0, seed=int(rng.integers(100)))
    model = Model.create(gs, cfg)
    model.grid.tables = rng.normal(0.0, 0.5, model.grid.tables.shape)
    # zero biases put ReLU inputs exactly on the kink when a whole hidden layer is dead
    for name in ("b1", "b2", "b3"):
        model.mlp.params[name] = rng.normal(0.0, 0.1, model.mlp.params[name].shape)

    def f():
        return image_loss(model.render(cam)[0], target, 0.0)[0]

    img, ctx, cache = model.render(cam)
    pg = backward(ctx, image_loss(img, target, 0.0)[1])
    mlp_grads, d_feat, table_grad = model.colors_backward(cache, pg.rgb)
    for name, arr in model.mlp.params.items():
        _check(mlp_grads[name], f, arr, 1e-6)
    _check(d_feat, f, gs.features, 1e-6)
    dense = table_grad.to_dense(model.grid.tables.shape)
    ectx = cache[1]
    for lvl in range(model.grid.levels):
        for slot in np.unique(ectx.index[:, lvl].ravel()):
            _check(dense[lvl, slot], f, model.grid.tables[lvl, slot], 1e-6)


def test_criterion_1_gradient_oracle():
    with criterion(1, "gradient oracle", budget=60) as info:
        scenes = 0
        for seed in range(24):
            rng, gs, cam, target = _gradient_scene(seed)
            if render(gs, cam, np.zeros((len(gs), 3)))[1].n_contrib.sum() == 0:
                continue
            _geometry_oracle(rng, gs, cam, target)
            _appearance_oracle(rng, gs, cam, target)
            scenes += 1
        assert scenes >= 20, f"only {scenes} scenes had a visible Gaussian"
        info["detail"] = f"{scenes} scenes"


# ---------------------------------------------------------------- 2. streaming statistics

def test_criterion_2_streaming_oracle():
    with criterion(2, "streaming statistics", budget=10) as info:
        rng = np.random.default_rng(0)
        worst_var = worst_merge = 0.0
        for _ in range(1000):
            xs = rng.normal(rng.normal(), rng.uniform(0.1, 3.0), int(rng.integers(1, 60)))
            full = stream(xs, "exact")
            worst_var = max(worst_var, abs(full.var - np.var(xs)))
            cut = int(rng.integers(0, len(xs) + 1))
            merged = merge_exact(stream(xs[:cut], "exact"), stream(xs[cut:], "exact"))
            worst_merge = max(worst_merge, abs(merged.var - full.var))
        assert worst_var <= 1e-12 and worst_merge <= 1e-12, (worst_var, worst_merge)
        assert stream([0.0, 1.0], "recursive").var == 0.5
        xs = np.random.default_rng(7).normal(0.0, 2.0, 10_000)
        for mode in ("recursive", "exact"):
            assert abs(stream(xs, mode).var / 4.0 - 1.0) < 0.05
        info["detail"] = f"max |var err| {worst_var:.1e}, max |merge err| {worst_merge:.1e}"


# ---------------------------------------------------------------- 3. decision oracle

def _decision_fixture():
    """Three Gaussians, two views; residuals mirrored about Gaussian 2 cancel its position gradient."""
    gs = GaussianSet([[-0.3, -0.2, 3.0], [0.3, -0.2, 3.2], [0.0, 0.25, 2.8]],
                     np.log([[0.06, 0.05, 0.05], [0.05, 0.07, 0.05], [0.04, 0.04, 0.04]]),
                     [[1, 0, 0, 0], [0.9, 0.1, 0, 0.2], [1, 0, 0, 0]], logit(np.array([0.8, 0.6, 0.9])),
                     np.zeros((3, 2)))
    rgb = np.array([[0.9, 0.2, 0.1], [0.1, 0.8, 0.3], [0.5, 0.5, 0.5]])
    cams = [Camera.look_at([x, 0.0, 0.0], [0, 0, 3], [0, -1, 0], 30, 30, 16, 16) for x in (-0.1, 0.1)]
    rng = np.random.default_rng(3)
    views = []
    xs = np.arange(16) + 0.5
    for cam in cams:
        cx, cy = project(gs, cam)[2].pixel_xy
        window = (np.abs(xs[:, None] - cy) < 4) & (np.abs(xs[None, :] - cx) < 4)
        side = np.sign(xs[None, :] - cx) * window
        dl = 2e-5 * rng.choice([-1.0, 1.0], size=(16, 16, 3)) * ~window[..., None]
        dl[..., 0] += 2e-3 * side
        dl[..., 1] -= 2e-3 * side
        views.append((cam, dl))
    return gs, rgb, views


def _brute_force(gs, rgb, views):
    """Mean NDC norm and mean summed sample variance from a per-pixel log of w * dL/dC."""
    n = len(gs)
    gsum, dsum, count = np.zeros(n), np.zeros(n), np.zeros(n)
    for cam, dl in views:
        _, ctx = render(gs, cam, rgb)
        ndc = backward(ctx, dl).ndc
        log = {k: [] for k in range(n)}
        for py in range(cam.height):
            for px in range(cam.width):
                ids, w = ctx.pixel_contributors(py, px)
                for k, wk in zip(ids, w):
                    if wk > VISIBLE_WEIGHT:
                        log[int(k)].append(wk * dl[py, px])
        for k, samples in log.items():
            if not samples:
                continue
            s = np.array(samples)
            var = s.var(axis=0, ddof=1).sum() if len(s) > 1 else 0.0
            gsum[k] += np.hypot(*ndc[k])
            dsum[k] += var
            count[k] += 1
    seen = count > 0
    gnorm = np.where(seen, gsum / np.maximum(count, 1), 0.0)
    dbar = np.where(seen, dsum / np.maximum(count, 1), 0.0)
    return gnorm, dbar, seen


def test_criterion_3_decision_oracle():
    with criterion(3, "densification decision oracle", budget=5) as info:
        gs, rgb, views = _decision_fixture()
        acc = GradAccum(len(gs))
        for cam, dl in views:
            _, ctx = render(gs, cam, rgb)
            backward(ctx, dl, acc)
        gnorm, dbar, seen = _brute_force(gs, rgb, views)
        got_g, got_d = acc.statistics()
        np.testing.assert_allclose(got_g, gnorm, rtol=1e-12)
        np.testing.assert_allclose(got_d, dbar, rtol=1e-9)
        picks = {}
        for gamma in (0.0, GAMMA):
            expected = np.flatnonzero(seen & (gamma * dbar + gnorm > TAU))
            got = select(acc, DensifyConfig(tau_th=TAU), gamma)
            np.testing.assert_array_equal(got, expected)
            picks[gamma] = got.tolist()
        assert picks[0.0] != picks[GAMMA], "fixture should separate the two rules"
        info["detail"] = f"gamma=0 -> {picks[0.0]}, gamma=2^11 -> {picks[GAMMA]}"


# ---------------------------------------------------------------- 4. opposing residuals

def test_criterion_4_opposing_residuals():
    with criterion(4, "opposing-residual fixture", budget=5) as info:
        # a grey Gaussian centred between two pixels over a black background
        gs = GaussianSet([[0.0, 0.0, 3.0]], np.full((1, 3), np.log(0.02)), [[1.0, 0, 0, 0]], [logit(0.9)],
                         np.zeros((1, 2)))
        cam = Camera(30.0, 30.0, 1.0, 0.5, 2, 1)
        _, ctx = render(gs, cam, [[0.5, 0.5, 0.5]])
        u = 2e-3
        dl = np.zeros((1, 2, 3))
        dl[0, :, 0] = [u, -u]
        dl[0, :, 1] = [-u, u]
        acc = GradAccum(1)
        backward(ctx, dl, acc)
        gnorm, dbar = acc.statistics()
        assert gnorm[0] < TAU < GAMMA * dbar[0] + gnorm[0]
        cfg = DensifyConfig(tau_th=TAU, gamma=GAMMA)
        assert select(acc, cfg).tolist() == [0]
        assert select_baseline(acc, cfg).tolist() == []
        info["detail"] = f"gnorm={gnorm[0]:.2e}, gamma*dbar={GAMMA * dbar[0]:.2e}"


# ---------------------------------------------------------------- 5. hash encoder

def test_criterion_5_hash_suite():
    with criterion(5, "hash encoder suite", budget=10):
        hash_suite.test_corner_exact()
        hash_suite.test_unit_direction_on_node()
        hash_suite.test_cell_center_mean()
        hash_suite.test_trilinear_polynomial_reproduced()
        hash_suite.test_continuity_across_boundary()
        hash_suite.test_backward_partition_of_unity()
        hash_suite.test_sphere_slots_contain_touched()


# ---------------------------------------------------------------- 6, 7. desk-scale trends

def _trend(flag, tmp_path_factory):
    out = experiments.run_trend(flag, tmp_path_factory.mktemp(f"trend_{flag}"), log=print)
    print(out.table())
    return out


def _trend_detail(out, flag):
    on, off = out.mean(True, "test_psnr"), out.mean(False, "test_psnr")
    return on, off, f"psnr {flag} on {on:.3f} / off {off:.3f}"


def test_criterion_6_vgd_trend(tmp_path_factory):
    with criterion(6, "desk-scale VGD trend") as info:
        out = _trend("vgd", tmp_path_factory)
        on, off, detail = _trend_detail(out, "vgd")
        q_on, q_off = out.mean(True, "final_q4_dbar"), out.mean(False, "final_q4_dbar")
        info["detail"] = f"{detail}; top-quartile dbar on {q_on:.3e} / off {q_off:.3e}"
        assert all(a.early_loss > a.late_loss for a in out.arms), "loss did not trend down"
        assert on >= off, info["detail"]
        assert q_on < q_off, info["detail"]


def test_criterion_7_lhe_trend(tmp_path_factory):
    with criterion(7, "desk-scale LHE trend") as info:
        out = _trend("lhe", tmp_path_factory)
        on, off, detail = _trend_detail(out, "lhe")
        info["detail"] = detail
        assert all(a.early_loss > a.late_loss for a in out.arms), "loss did not trend down"
        assert all(a.eval_repeatable for a in out.arms), "evaluation not deterministic"
        assert on >= off, detail


# ---------------------------------------------------------------- 8. degeneracy

def _baseline_rule(acc, tau):
    """Mean NDC gradient norm over visible views above tau, written out directly."""
    out = []
    for k in range(acc.n):
        m = acc.view_count[k]
        if m > 0 and acc.ndc_grad_norm_sum[k] / m > tau:
            out.append(k)
    return np.array(out, dtype=np.int64)


def test_criterion_8_degeneracy():
    with criterion(8, "degeneracy equivalence", budget=5) as info:
        cfg = TrainConfig(vgd=False, lhe=False, feature_dim=4, mlp_hidden=8, hash_log2_T=8)
        checked = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            gs = random_gaussians(rng, 12, feature_dim=4)
            model = Model.create(gs, cfg)
            acc = GradAccum(len(gs))
            for _ in range(3):
                cam = random_camera(rng)
                img, ctx, _ = model.render(cam)
                backward(ctx, image_loss(img, rng.uniform(size=img.shape), 0.2)[1], acc)
            got = select(acc, cfg.densify, cfg.effective_gamma)
            np.testing.assert_array_equal(got, _baseline_rule(acc, cfg.densify.tau_th))
            np.testing.assert_array_equal(got, select_baseline(acc, cfg.densify))
            checked += 1
        # whole controller: vgd off and gamma forced to 0 log identical events
        scene_rng = np.random.default_rng(11)
        gs = random_gaussians(scene_rng, 8, feature_dim=4)
        cams = [random_camera(scene_rng) for _ in range(3)]
        views = [(c, scene_rng.uniform(size=(c.height, c.width, 3))) for c in cams]
        dense = DensifyConfig(start_step=2, interval=4, opacity_reset_interval=0)
        base = dict(iterations=20, lhe=False, feature_dim=4, mlp_hidden=8, hash_log2_T=8)
        off = train(Scene(gs, views), TrainConfig(vgd=False, densify=dense, **base))
        zero = train(Scene(gs, views), TrainConfig(densify=DensifyConfig(**{**dense.__dict__, "gamma": 0.0}),
                                                   **base))
        assert [e.row() for e in off.events] == [e.row() for e in zero.events]
        assert all(e.n_selected_vgd_only == 0 for e in off.events)
        info["detail"] = f"{checked} accumulators, {len(off.events)} controller events"


# ---------------------------------------------------------------- 9. I/O

def test_criterion_9_io_round_trips(tmp_path):
    with criterion(9, "I/O round trips", budget=5):
        checks = [
            io_suite.test_checkpoint_roundtrip_bitwise,
            io_suite.test_ply_roundtrip_bitwise,
            io_suite.test_points_ply_roundtrip,
            io_suite.test_png_half_rounds_up,
            io_suite.test_png_roundtrip_and_clamp,
            io_suite.test_colmap_fixture_fields,
        ]
        for i, check in enumerate(checks):
            d = tmp_path / str(i)
            d.mkdir()
            check(d)
        io_suite.test_camera_json_roundtrip()
