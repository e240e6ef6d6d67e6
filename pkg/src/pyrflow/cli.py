"""Command-line surface: train-toy, infer, eval, bench-attn, viz-context.

Every command is deterministic given its inputs, config, and seed, and
exits with a one-line diagnostic on error. Exit codes: 0 ok, 1 usage,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import yaml

from .checkpoint import load_model
from .config import ConfigError, TrainConfig
from .estimator import estimate_flow_padded, preset_iterations
from .evalio import (
    EvalResult,
    FormatError,
    evaluate_pair,
    flow_to_color,
    read_flo,
    read_image,
    read_kitti_png,
    write_flo,
    write_image,
)
from .features import PaddingError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# train-toy


def _load_train_config(path: str, args) -> TrainConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise UsageError(f"config {path} is not valid YAML: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a mapping of keys")
    cfg = TrainConfig.from_dict(raw)
    overrides = {
        k: getattr(args, k)
        for k in ("seed", "steps", "lr", "out_dir")
        if getattr(args, k, None) is not None
    }
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_train_toy(args) -> int:
    from .training import train_toy

    cfg = _load_train_config(args.config, args)
    log = (lambda *a, **k: None) if args.quiet else print
    result = train_toy(cfg, log=log, resume=args.resume)
    print(
        f"done: {result['steps_run']} steps, final train AEPE "
        f"{result['final_aepe']:.3f} px, artifacts in {cfg.out_dir}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def _parse_iters(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError as e:
        raise UsageError(f"--iters must be comma-separated integers, got {text!r}") from e


def cmd_infer(args) -> int:
    model = _load_model(args.checkpoint)
    if args.scales is not None and args.scales != model.cfg.num_scales:
        raise DataError(
            f"checkpoint is a {model.cfg.num_scales}-scale model, --scales {args.scales} impossible"
        )
    iters = None
    if args.iters is not None:
        iters = _parse_iters(args.iters)
    elif args.preset is not None:
        iters = preset_iterations(args.preset, model.cfg.num_scales)

    img1 = read_image(args.image1)
    img2 = read_image(args.image2)
    if img1.shape != img2.shape:
        raise DataError(f"image sizes differ: {img1.shape[1:]} vs {img2.shape[1:]}")
    flow = estimate_flow_padded(model, img1, img2, iters=iters)
    for target in (args.out, args.viz):
        parent = os.path.dirname(target) if target else ""
        if parent:
            os.makedirs(parent, exist_ok=True)
    write_flo(flow, args.out)
    mag = float(np.sqrt((flow.astype(np.float64) ** 2).sum(axis=0)).mean())
    print(f"wrote {args.out}  ({flow.shape[2]}x{flow.shape[1]}, mean |flow| {mag:.2f} px)")
    if args.viz is not None:
        write_image(flow_to_color(flow), args.viz)
        print(f"wrote {args.viz}")
    return EXIT_OK


def _load_model(path: str):
    if not os.path.exists(path):
        raise DataError(f"checkpoint {path} does not exist")
    try:
        return load_model(path)
    except (ValueError, OSError, KeyError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from e


# ---------------------------------------------------------------------------
# eval


def _read_flow_any(path: str):
    """Read .flo or KITTI .png; returns (flow, valid-or-None)."""
    if path.endswith(".flo"):
        return read_flo(path).astype(np.float64), None
    if path.endswith(".png"):
        return read_kitti_png(path)
    raise DataError(f"unsupported flow file {path} (want .flo or .png)")


def _read_mask(path: str) -> np.ndarray:
    import cv2

    if path.endswith(".npy"):
        return np.load(path).astype(bool)
    raw = cv2.imread(path, cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise DataError(f"cannot read mask {path}")
    return raw > 0


_EVAL_COLUMNS = [
    "name",
    "aepe",
    "fl",
    "n_pixels",
    "aepe_matched",
    "aepe_unmatched",
    "fl_matched",
    "fl_unmatched",
    "n_matched",
    "n_unmatched",
]


def _result_row(name: str, res: EvalResult, with_occ: bool) -> dict:
    row = {"name": name, **res.row()}
    if not with_occ:
        for k in _EVAL_COLUMNS[4:]:
            row[k] = ""
    return row

def cmd_eval(args) -> int:
    import csv

    gt_files = sorted(
        f for f in os.listdir(args.gt_dir) if f.endswith((".flo", ".png"))
    )
    if not gt_files:
        raise DataError(f"no .flo or .png ground-truth files in {args.gt_dir}")
    rows = []
    for name in gt_files:
        gt, valid = _read_flow_any(os.path.join(args.gt_dir, name))
        pred_path = os.path.join(args.pred_dir, name)
        if not os.path.exists(pred_path):
            stem = os.path.splitext(name)[0]
            for ext in (".flo", ".png"):
                if os.path.exists(os.path.join(args.pred_dir, stem + ext)):
                    pred_path = os.path.join(args.pred_dir, stem + ext)
                    break
            else:
                raise DataError(f"no prediction for {name} in {args.pred_dir}")
        pred, _ = _read_flow_any(pred_path)
        if pred.shape != gt.shape:
            raise DataError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")
        occ = None
        if args.occ_masks is not None:
            stem = os.path.splitext(name)[0]
            for ext in (".png", ".npy"):
                cand = os.path.join(args.occ_masks, stem + ext)
                if os.path.exists(cand):
                    occ = _read_mask(cand)
                    break
        res = evaluate_pair(pred, gt, occlusion=occ, valid=valid)
        rows.append(_result_row(name, res, occ is not None))

    header = f"{'name':24s} {'AEPE':>8s} {'Fl%':>7s} {'AEPE-m':>8s} {'AEPE-u':>8s}"
    print(header)
    for r in rows:
        am = f"{r['aepe_matched']:8.3f}" if r["aepe_matched"] != "" else "       -"
        au = f"{r['aepe_unmatched']:8.3f}" if r["aepe_unmatched"] != "" else "       -"
        print(f"{r['name']:24s} {r['aepe']:8.3f} {r['fl']:7.2f} {am} {au}")
    mean_aepe = float(np.mean([r["aepe"] for r in rows]))
    mean_fl = float(np.mean([r["fl"] for r in rows]))
    print(f"{'mean':24s} {mean_aepe:8.3f} {mean_fl:7.2f}")

    if args.out is not None:
        with open(args.out, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=_EVAL_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-attn


def cmd_bench_attn(args) -> int:
    from .bench import ladder_slopes, plot_ladder, run_ladder, write_csv
    from .training import NumericError

    mechanisms = tuple(args.mechanisms.split(","))
    for m in mechanisms:
        if m not in ("token", "xca"):
            raise UsageError(f"unknown mechanism {m!r} (want token and/or xca)")
    sides = None
    if args.sizes:
        try:
            sides = tuple(int(s) for s in args.sizes.split(","))
        except ValueError as e:
            raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from e
        if len(sides) < 4:
            # fewer than 4 points cannot pin down a log-log slope
            raise UsageError(f"--sizes needs at least 4 entries for a slope fit, got {len(sides)}")
    kw = {"sides": sides} if sides else {}
    os.makedirs(args.out_dir, exist_ok=True)
    print(f"measuring attention memory (dim {args.dim}, {args.heads} heads) ...")
    rows = run_ladder(
        dim=args.dim, heads=args.heads, mechanisms=mechanisms, log=print, **kw
    )
    csv_path = os.path.join(args.out_dir, "attention_memory.csv")
    write_csv(rows, csv_path)
    plot_path = os.path.join(args.out_dir, "attention_memory.png")
    plot_ladder(rows, plot_path)
    try:
        slopes = ladder_slopes(rows)
    except ValueError as e:
        # the memory budget truncated the ladder below a fittable size
        raise NumericError(str(e)) from e
    for kind, slope in slopes.items():
        print(f"{kind}: fitted log-log memory slope {slope:.3f}")
    print(f"wrote {csv_path} and {plot_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# viz-context


def cmd_viz_context(args) -> int:
    import matplotlib

    from .autodiff import no_grad
    from .features import pad_to_multiple

    model = _load_model(args.checkpoint)
    num_scales = model.cfg.num_scales
    if not 0 <= args.scale < num_scales:
        raise UsageError(f"--scale must be in [0, {num_scales - 1}] for this checkpoint")
    img = read_image(args.image)
    padded, _ = pad_to_multiple(img)
    with no_grad():
        ctx = model.context(padded.astype(model.cfg.np_dtype))
        div = model.cfg.scale_divisors[args.scale]
        _, c_s = ctx[div]
        gc = model.global_blocks[args.scale](c_s).data

    d = gc.shape[0]
    channels = None
    if args.channels is not None:
        channels = [int(c) for c in args.channels.split(",")]
        bad = [c for c in channels if not 0 <= c < d]
        if bad:
            raise UsageError(f"channel(s) {bad} out of range, map has {d} channels")

    def normalize(m):
        lo, hi = float(m.min()), float(m.max())
        return (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)

    os.makedirs(args.out_dir, exist_ok=True)
    maps = (
        [("norm", np.sqrt((gc.astype(np.float64) ** 2).sum(axis=0)))]
        if channels is None
        else [(f"ch{c}", np.abs(gc[c].astype(np.float64))) for c in channels]
    )
    for tag, m in maps:
        rgb = matplotlib.colormaps["inferno"](normalize(m))[:, :, :3]
        path = os.path.join(args.out_dir, f"context_scale{args.scale}_{tag}.png")
        write_image(rgb, path)
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    p = _Parser(prog="pyrflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-toy", help="overfit a small model on synthetic data")
    t.add_argument("config", help="YAML training config")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--out-dir", dest="out_dir")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train_toy)

    i = sub.add_parser("infer", help="estimate flow for an image pair")
    i.add_argument("checkpoint")
    i.add_argument("image1")
    i.add_argument("image2")
    i.add_argument("--scales", type=int, help="expected scale count (checked against checkpoint)")
    i.add_argument("--iters", help='per-scale GRU iterations, e.g. "4,5,5,6"')
    i.add_argument("--preset", choices=("train", "sintel", "kitti"))
    i.add_argument("--out", default="flow.flo")
    i.add_argument("--viz", help="also write a color-coded flow PNG here")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("pred_dir")
    e.add_argument("gt_dir")
    e.add_argument("--occ-masks", dest="occ_masks", help="directory of occlusion masks")
    e.add_argument("--out", help="write per-file metrics CSV here")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench-attn", help="attention memory scaling benchmark")
    b.add_argument("--mechanisms", default="token,xca")
    b.add_argument("--sizes", help="comma-separated square map sides (default 32..256)")
    b.add_argument("--dim", type=int, default=256)
    b.add_argument("--heads", type=int, default=8)
    b.add_argument("--out-dir", dest="out_dir", default="bench_out")
    b.set_defaults(fn=cmd_bench_attn)

    v = sub.add_parser("viz-context", help="render global-context heatmaps")
    v.add_argument("checkpoint")
    v.add_argument("image")
    v.add_argument("--scale", type=int, default=0, help="scale index, 0 = coarsest")
    v.add_argument("--channels", help="comma-separated channel indices (default: L2-norm map)")
    v.add_argument("--out-dir", dest="out_dir", default=".")
    v.set_defaults(fn=cmd_viz_context)
    return p


def main(argv=None) -> int:
    from .training import NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, PaddingError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, ZeroDivisionError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
