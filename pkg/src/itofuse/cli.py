"""Command-line entry point: ``itofuse <command> [options]``.

Every command writes its artifacts under ``--out DIR`` and prints a short
JSON summary on stdout. Failures print one line ``error: <Kind>: <message>``
on stderr and exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config, save_config
from .datagen import align_relative_depth
from .errors import ItofuseError
from .evaluation import compute_metrics, cross_section, region_eval, write_profile, write_report
from .fileio import read_calibration, read_dmap, read_ppm, write_calibration, write_dmap, write_ppm
from .geometry import fov_masks, reproject_depth, valid_mask


class UsageError(ItofuseError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    from .pipeline import build_dataset

    cfg = _config(args)
    out = _out_dir(args)
    train, val = build_dataset(cfg)
    write_calibration(out / "rig.json", cfg.rig)
    save_config(out / "config.json", cfg)
    names = []
    for split, samples in (("train", train), ("val", val)):
        for i, s in enumerate(samples):
            d = out / split / f"{i:04d}"
            d.mkdir(parents=True, exist_ok=True)
            write_ppm(d / "rgb.ppm", s.rgb.transpose(1, 2, 0))
            write_dmap(d / "gt.dmap", s.gt[0])
            write_dmap(d / "itof.dmap", s.itof)
            write_dmap(d / "warped.dmap", s.warped[0])
            write_dmap(d / "prior.dmap", s.prior[0])
            write_dmap(d / "aligned_prior.dmap", s.aligned_prior[0])
            names.append(str(d.relative_to(out)))
    _emit({"train": len(train), "val": len(val), "samples": names})


def cmd_reproject(args):
    rig = read_calibration(args.calib)
    warped = reproject_depth(read_dmap(args.depth), rig)
    out = _out_dir(args)
    write_dmap(out / "warped.dmap", warped)
    _emit({"output": str(out / "warped.dmap"), "valid_pixels": int(valid_mask(warped).sum())})


def cmd_align_prior(args):
    rel = read_dmap(args.prior)
    ref = read_dmap(args.ref)
    mask = valid_mask(read_dmap(args.mask)) if args.mask else None
    res = align_relative_depth(rel, ref, mask, trim=args.trim)
    out = _out_dir(args)
    write_dmap(out / "aligned.dmap", res.aligned)
    _emit({"output": str(out / "aligned.dmap"), "s": res.s, "t": res.t, "inlier_count": res.inlier_count})


def cmd_train(args):
    from .pipeline import train

    cfg = _config(args)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    out = _out_dir(args)
    save_config(out / "config.json", cfg)
    res = train(cfg, out, progress=lambda rec: print(json.dumps(rec, sort_keys=True), file=sys.stderr)
                if not args.quiet else None)
    _emit({"checkpoint": str(out / "checkpoint.ckpt"), "epochs": cfg.epochs, "steps": res.state.step,
           "final": res.history[-1] if res.history else None})


def cmd_infer(args):
    from .pipeline import infer_arrays, load_checkpoint_bytes

    ckpt = load_checkpoint_bytes(Path(args.checkpoint).read_bytes(), str(args.checkpoint))
    pred = infer_arrays(ckpt, read_ppm(args.rgb), read_dmap(args.itof), read_calibration(args.calib))
    out = _out_dir(args)
    write_dmap(out / "prediction.dmap", pred)
    _emit({"output": str(out / "prediction.dmap"), "shape": list(pred.shape),
           "min": float(np.nanmin(pred)), "max": float(np.nanmax(pred))})


def cmd_eval(args):
    pred = read_dmap(args.pred)
    gt = read_dmap(args.gt)
    out = _out_dir(args)
    if args.warped:
        ov, outside = fov_masks(read_dmap(args.warped), valid_mask(gt))
        reports = region_eval(pred, gt, ov, outside)
    else:
        reports = {"full": compute_metrics(pred, gt, valid_mask(gt))}
    write_report(out / "report.json", reports)
    _emit({name: r.to_dict() for name, r in reports.items()})


def cmd_profile(args):
    pred = read_dmap(args.pred)
    gt = read_dmap(args.gt)
    rows, cols = gt.shape
    row = rows // 2 if args.row is None else args.row
    col = cols // 2 if args.col is None else args.col
    tr_row, tr_col = cross_section(pred, gt, row, col)
    out = _out_dir(args)
    write_profile(out / f"row_{row}.csv", tr_row)
    write_profile(out / f"col_{col}.csv", tr_col)

    def summary(t):
        e = t.rel_error[np.isfinite(t.rel_error)]
        return {"index": t.index, "mean_rel_error": float(e.mean()) if e.size else None,
                "frac_below_5pct": float((e < 0.05).mean()) if e.size else None}

    _emit({"row": summary(tr_row), "col": summary(tr_col)})


def cmd_gradcheck(args):
    from .checks import run_suite

    errs = run_suite(seed=args.seed or 0, entries_per_tensor=args.entries)
    worst = max(errs.values())
    if args.out:
        (_out_dir(args) / "gradcheck.json").write_text(json.dumps(errs, indent=2, sort_keys=True) + "\n")
    _emit({"max_rel_error": worst, "per_check": errs})
    return 0 if worst <= args.tol else 3


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="itofuse", description="iToF + RGB depth fusion toolkit")
    p.add_argument("--version", action="version", version=f"itofuse {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="synthesize the dataset into --out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reproject", parents=[common], help="warp an iToF DMAP into the RGB view")
    s.add_argument("--depth", required=True, type=Path, help="iToF-view DMAP")
    s.add_argument("--calib", required=True, type=Path, help="rig calibration JSON")
    s.set_defaults(func=cmd_reproject)

    s = sub.add_parser("align-prior", parents=[common], help="scale/shift-align a relative depth map")
    s.add_argument("--prior", required=True, type=Path, help="relative depth DMAP")
    s.add_argument("--ref", required=True, type=Path, help="metric reference DMAP (e.g. warped iToF)")
    s.add_argument("--mask", type=Path, help="DMAP whose valid pixels restrict the fit")
    s.add_argument("--trim", type=float, default=0.2, help="fraction of worst residuals dropped in the re-fit")
    s.set_defaults(func=cmd_align_prior)

    s = sub.add_parser("train", parents=[common], help="train the fusion network")
    s.add_argument("--epochs", type=int, help="override the configured epoch count")
    s.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="fuse one RGB image with one iToF depth map")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--rgb", required=True, type=Path, help="binary PPM")
    s.add_argument("--itof", required=True, type=Path, help="iToF-view DMAP")
    s.add_argument("--calib", required=True, type=Path, help="rig calibration JSON")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="metrics for a prediction against ground truth")
    s.add_argument("--pred", required=True, type=Path)
    s.add_argument("--gt", required=True, type=Path)
    s.add_argument("--warped", type=Path, help="warped iToF DMAP defining the FoV regions")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile", parents=[common], help="row / column cross-section traces")
    s.add_argument("--pred", required=True, type=Path)
    s.add_argument("--gt", required=True, type=Path)
    s.add_argument("--row", type=int, help="row index (default: middle)")
    s.add_argument("--col", type=int, help="column index (default: middle)")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the loss")
    s.add_argument("--entries", type=int, default=8, help="sampled entries per parameter tensor")
    s.add_argument("--tol", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck, out=None)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    except (ItofuseError, OSError, ValueError, KeyError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
