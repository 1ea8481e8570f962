"""Depth metrics, FoV region protocol and cross-section profiles.

Reductions run left to right in float64 over pixels in raster order, so
results do not depend on numpy's pairwise summation and match a naive loop
bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DomainError, EmptyMaskError, ShapeError, ValidationError

DELTA_BASE = 1.25
MIN_GT_DEPTH = 1e-6
REGIONS = ("full", "outside_fov", "overlapping_fov")


@dataclass
class EvalReport:
    mae: float
    mse: float
    rmse: float
    absrel: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int
    region: str = "full"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProfileTrace:
    axis: str
    index: int
    pred: np.ndarray
    gt: np.ndarray
    rel_error: np.ndarray


def _flat_valid(pred, gt, mask):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    m = np.isfinite(gt) & np.isfinite(pred)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ShapeError(f"mask {mask.shape} does not match depth {gt.shape}")
        m &= mask
    idx = np.flatnonzero(m)
    g = gt.reshape(-1)[idx].astype(np.float64)
    p = pred.reshape(-1)[idx].astype(np.float64)
    return p, g


def compute_metrics(pred, gt, mask=None, region: str = "full") -> EvalReport:
    """MAE / MSE / RMSE / AbsRel / delta_k over pixels valid in both maps (and ``mask``).

    Pixels with ``gt < 1e-6`` m are excluded from AbsRel and the delta ratios.
    The delta comparison is strict: a ratio of exactly 1.25 fails delta1.
    """
    p, g = _flat_valid(pred, gt, mask)
    n = p.size
    if n == 0:
        raise EmptyMaskError(f"no valid pixels to evaluate in region {region!r}")
    if np.any(g <= 0):
        raise DomainError("ground truth must be strictly positive inside the evaluation mask")
    d = p - g
    ad = np.abs(d)
    mae = kernels.ordered_sum(ad) / n
    mse = kernels.ordered_sum(d * d) / n
    safe = g >= MIN_GT_DEPTH
    n_rel = int(safe.sum())
    gs, ps, ads = g[safe], p[safe], ad[safe]
    absrel = kernels.ordered_sum(ads / gs) / n_rel if n_rel else math.nan
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(ps / gs, gs / ps)
    deltas = [int(np.count_nonzero(ratio < DELTA_BASE ** k)) / n_rel if n_rel else math.nan for k in (1, 2, 3)]
    return EvalReport(mae=mae, mse=mse, rmse=math.sqrt(mse), absrel=absrel,
                      delta1=deltas[0], delta2=deltas[1], delta3=deltas[2],
                      pixel_count=int(n), region=region)


def region_eval(pred, gt, overlapping_mask, outside_mask) -> dict[str, EvalReport]:
    """Reports for the full image and both sides of the iToF FoV boundary.

    The full region is the union of the two (disjoint) masks. A region with
    no valid pixels is omitted from the result.
    """
    ov = np.asarray(overlapping_mask, dtype=bool)
    out = np.asarray(outside_mask, dtype=bool)
    if ov.shape != out.shape:
        raise ShapeError(f"region masks differ in shape: {ov.shape} vs {out.shape}")
    if np.any(ov & out):
        raise ValidationError(f"region masks overlap on {int((ov & out).sum())} pixel(s)")
    reports = {}
    for name, m in (("full", ov | out), ("outside_fov", out), ("overlapping_fov", ov)):
        try:
            reports[name] = compute_metrics(pred, gt, m, region=name)
        except EmptyMaskError:
            if name == "full":
                raise
    return reports


def cross_section(pred, gt, row: int, col: int) -> tuple[ProfileTrace, ProfileTrace]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError(f"cross_section needs two equal 2-d maps, got {pred.shape} and {gt.shape}")
    h, w = gt.shape
    if not (0 <= row < h and 0 <= col < w):
        raise ValidationError(f"profile indices (row={row}, col={col}) outside {h}x{w} image")

    def trace(axis, index, p, g):
        p = p.astype(np.float64)
        g = g.astype(np.float64)
        ok = np.isfinite(g) & (g > 0) & np.isfinite(p)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(ok, np.abs(p - g) / g, np.nan)
        return ProfileTrace(axis, int(index), p, g, rel)

    return trace("row", row, pred[row, :], gt[row, :]), trace("col", col, pred[:, col], gt[:, col])


# --------------------------------------------------------------------------
# serialization


def write_report(path, reports: dict[str, EvalReport], extra: dict | None = None) -> None:
    payload = {name: r.to_dict() for name, r in reports.items()}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict[str, EvalReport]:
    raw = json.loads(Path(path).read_text())
    return {k: EvalReport(**v) for k, v in raw.items() if k in REGIONS}


def write_profile(path, trace: ProfileTrace) -> None:
    """Delimited columns ``index, gt, pred, rel_error``; NaN marks undefined entries."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "gt", "pred", "rel_error"])
        for i, (g, p, e) in enumerate(zip(trace.gt, trace.pred, trace.rel_error)):
            wr.writerow([i, repr(float(g)), repr(float(p)), repr(float(e))])


def read_profile(path, axis: str = "row", index: int = 0) -> ProfileTrace:
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = data.reshape(-1, 4)
    return ProfileTrace(axis, index, data[:, 2], data[:, 1], data[:, 3])
