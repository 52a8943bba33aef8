"""Command-line entry point: synth, train, render, eval, stats.

Exit codes: 0 ok, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import io
from .config import TrainConfig
from .core import init_from_points
from .gradstats import export_stats_csv
from .densify import DensifyEvent
from .engine import TrainResult, evaluate, replay_stats, train

CHECKPOINT = "checkpoint.vgs"
METRICS = "metrics.csv"
CURVES = "stats_curves.csv"
EVENTS = "densify_events.csv"
ECHO = "config_resolved.json"

TRAIN_EPILOG = f"""\
outputs written to --out:
  {CHECKPOINT:<22}binary checkpoint (Gaussians, colour MLP, hash grid, config, iteration)
  {METRICS:<22}iter,loss,psnr_train,n_gaussians (one row per iteration)
  {CURVES:<22}iter,q1_dbar,q2_dbar,q3_dbar,q4_dbar: mean per-Gaussian colour-gradient
  {"":<22}variance in each ascending quartile, every stats_interval iterations
  {EVENTS:<22}step,n_before,n_selected_vgd_only,n_selected_baseline,n_after
  {"":<22}(vgd_only: picked by the variance rule but not by the gradient-norm rule alone)
  {ECHO:<22}the fully resolved configuration (defaults < --config < flags)
"""

EVAL_EPILOG = """\
report columns: view,psnr,ssim (view is the index within the chosen split);
a final row with view=mean holds the averages.
"""

STATS_EPILOG = """\
output columns: gaussian_id,gnorm,dbar,var_r,var_g,var_b
  gnorm  mean NDC positional gradient norm over the views that saw the Gaussian
  dbar   mean over those views of the summed per-channel colour-gradient variance
  var_*  the same average per channel
"""


class UsageError(Exception):
    pass


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _finite(value: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from None
    if not math.isfinite(x):
        raise argparse.ArgumentTypeError(f"must be finite, got {value!r}")
    return x


def _nonneg_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value!r}") from None
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {n}")
    return n


def _positive_int(value: str) -> int:
    n = _nonneg_int(value)
    if n == 0:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vgsplat", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="cap on worker threads for rasterization (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)
    raw = argparse.RawDescriptionHelpFormatter

    s = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=raw,
                       epilog="writes images/view_NNN.png, cameras.json and points3d.ply")
    s.add_argument("--scene", required=True, choices=io.SCENES, help="built-in scene")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=_nonneg_int, default=0, help="generator seed (default 0)")
    s.add_argument("--views", type=_positive_int, default=24, help="number of views (default 24)")
    s.add_argument("--size", type=_positive_int, default=32, help="image width and height in pixels (default 32)")

    t = sub.add_parser("train", help="optimize a model on a dataset", formatter_class=raw, epilog=TRAIN_EPILOG)
    t.add_argument("--data", required=True, help="dataset directory (cameras.json layout or COLMAP text)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="flat JSON file of TrainConfig keys")
    t.add_argument("--vgd", type=_on_off, help="variance-guided densification on|off (default on)")
    t.add_argument("--lhe", type=_on_off, help="hashed view-direction encoder on|off (default on)")
    t.add_argument("--gamma", type=_finite, help="variance weight (default 2048)")
    t.add_argument("--tau", type=_finite, help="densification threshold (default 0.0004)")
    t.add_argument("--iters", type=_nonneg_int, help="training iterations (default 7000)")
    t.add_argument("--seed", type=_nonneg_int, help="training seed (default 0)")
    t.add_argument("--estimator", choices=("recursive", "exact"), help="streaming variance estimator")
    t.add_argument("--hash-log2-t", type=_positive_int, dest="hash_log2_T", help="log2 of the hash table size")

    r = sub.add_parser("render", help="render one view to PNG")
    r.add_argument("--ckpt", required=True, help="checkpoint file")
    r.add_argument("--camera", required=True,
                   help="view index into --data, or a camera JSON object / path to one")
    r.add_argument("--data", help="dataset directory (needed when --camera is an index)")
    r.add_argument("--out", required=True, help="output PNG")

    e = sub.add_parser("eval", help="PSNR/SSIM on held-out views", formatter_class=raw, epilog=EVAL_EPILOG)
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--report", required=True, help="output CSV")
    e.add_argument("--split", choices=("test", "train"), default="test", help="views to score (default test)")

    st = sub.add_parser("stats", help="replay one statistics pass and dump per-Gaussian values",
                        formatter_class=raw, epilog=STATS_EPILOG)
    st.add_argument("--ckpt", required=True, help="checkpoint file")
    st.add_argument("--data", required=True, help="dataset directory")
    st.add_argument("--out", required=True, help="output CSV")
    st.add_argument("--split", choices=("train", "test", "all"), default="train", help="views to replay")
    st.add_argument("--estimator", choices=("recursive", "exact"), default="recursive", help="streaming estimator")
    return p


def resolve_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = TrainConfig()
    if args.config:
        try:
            cfg = TrainConfig.load_json(args.config)
        except KeyError as exc:
            raise UsageError(f"{args.config}: {exc.args[0]}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
    flat = {}
    for flag, key in (("vgd", "vgd"), ("lhe", "lhe"), ("iters", "iterations"), ("seed", "seed"),
                      ("estimator", "estimator"), ("hash_log2_T", "hash_log2_T"), ("gamma", "gamma"),
                      ("tau", "tau_th")):
        value = getattr(args, flag)
        if value is not None:
            flat[key] = value
    cfg = TrainConfig.from_flat(flat, cfg)
    if not cfg.vgd:
        if args.gamma is not None and args.gamma != 0:
            raise UsageError("--gamma conflicts with --vgd off")
        cfg.densify.gamma = 0.0
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def write_csv(path, header: str, rows) -> None:
    lines = [header] + [",".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, int, str)):
        return str(v)
    return repr(float(v))


def write_train_outputs(out: Path, result: TrainResult) -> None:
    io.save_checkpoint(out / CHECKPOINT, result.model)
    write_csv(out / METRICS, TrainResult.METRICS_HEADER, result.metrics)
    write_csv(out / CURVES, TrainResult.CURVES_HEADER, result.curves)
    (out / EVENTS).write_text("\n".join([DensifyEvent.HEADER] + [e.row() for e in result.events]) + "\n")


def _camera_arg(args):
    spec = args.camera
    try:
        index = int(spec)
    except ValueError:
        index = None
    if index is not None:
        if not args.data:
            raise UsageError("--camera given as an index needs --data")
        ds = io.load_dataset(args.data)
        if not 0 <= index < len(ds.cameras):
            raise UsageError(f"camera index {index} out of range for {len(ds.cameras)} views")
        return ds.cameras[index]
    text = spec if spec.lstrip().startswith("{") else Path(spec).read_text()
    try:
        return io.camera_from_json(json.loads(text))
    except (json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"bad camera JSON: {exc}") from None


def _load_ckpt(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return io.load_checkpoint(path)


def cmd_synth(args) -> None:
    spec = io.SynthSpec(scene=args.scene, n_views=args.views, width=args.size, height=args.size,
                        focal=args.size * 40.0 / 32.0)
    ds = io.synth_dataset(spec, args.out, seed=args.seed)
    print(f"scene={args.scene} n_views={len(ds.cameras)} n_points={len(ds.points)} out={args.out}")


def cmd_train(args) -> None:
    cfg = resolve_config(args)
    if args.threads and args.threads > 1:
        cfg.parallel = True
    ds = io.load_dataset(args.data)
    gs = init_from_points(ds.points, ds.colors, seed=cfg.seed, feature_dim=cfg.feature_dim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save_json(out / ECHO)
    result = train(ds.scene(gs), cfg)
    write_train_outputs(out, result)
    last = result.metrics[-1] if result.metrics else None
    msg = f"iterations={cfg.iterations} n_gaussians={len(result.model.gaussians)}"
    if last:
        msg += f" final_loss={last[1]:.6f} final_psnr_train={last[2]:.3f}"
    print(msg)


def cmd_render(args) -> None:
    model = _load_ckpt(args.ckpt)
    cam = _camera_arg(args)
    img, _, _ = model.render(cam)
    io.write_png(args.out, img)


def cmd_eval(args) -> None:
    model = _load_ckpt(args.ckpt)
    ds = io.load_dataset(args.data)
    views = ds.test_views if args.split == "test" else ds.train_views
    if not views:
        raise UsageError(f"dataset has no {args.split} views")
    rep = evaluate(model, views)
    rows = [(i, p, s) for i, p, s in rep["views"]] + [("mean", rep["psnr"], rep["ssim"])]
    write_csv(args.report, "view,psnr,ssim", rows)
    print(f"psnr={rep['psnr']:.4f} ssim={rep['ssim']:.6f} views={len(views)}")


def cmd_stats(args) -> None:
    model = _load_ckpt(args.ckpt)
    ds = io.load_dataset(args.data)
    views = {"train": ds.train_views, "test": ds.test_views,
             "all": list(zip(ds.cameras, ds.images))}[args.split]
    accum = replay_stats(model, views, estimator=args.estimator, color_grad=model.config.color_grad)
    export_stats_csv(accum, args.out)
    print(f"gaussians={len(accum)} views={len(views)} out={args.out}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval, "stats": cmd_stats}


def _set_threads(n: int | None) -> None:
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(min(n or limit, limit))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        _set_threads(args.threads)
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, io.FormatError, ValueError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
