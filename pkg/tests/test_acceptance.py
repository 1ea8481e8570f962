"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured values,
the tolerance and the runtime, and the lines are repeated in a summary
section at the end of the session. Criteria 7 and 8 train the shipped desk
configuration twice (roughly 12 minutes per run on one CPU core).
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
from itofuse import checks
from itofuse.autodiff import Tensor
from itofuse.config import load_config
from itofuse.datagen import ItofNoiseSpec, align_relative_depth, simulate_itof
from itofuse.evaluation import EvalReport, compute_metrics, region_eval
from itofuse.fusionnet import edge_aware_smoothness, normal_consistency_loss, smooth_l1_loss, ssim
from itofuse.geometry import (
    Camera, CameraRig, Distortion, Intrinsics, RigidTransform, back_project, distort, project,
    reproject_depth, undistort,
)
from itofuse.pipeline import train
from test_evaluation import naive_metrics

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def record(capsys, number, title, checks_, elapsed, budget):
    """Print one line per criterion and return whether everything held."""
    ok = all(v for v, _ in checks_.values()) and elapsed <= budget
    detail = "; ".join(f"{k}: {msg}{'' if v else ' [FAIL]'}" for k, (v, msg) in checks_.items())
    line = (f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}; "
            f"runtime {elapsed:.1f}s (budget {budget:g}s)")
    conftest.ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    return ok


# --------------------------------------------------------------------------
# 1. geometry


def test_criterion_1_geometry(capsys):
    t0 = time.perf_counter()
    g = np.random.default_rng(1)
    res = {}

    n = 10_000
    fx, fy = g.uniform(50, 1500, n), g.uniform(50, 1500, n)
    cx, cy = g.uniform(0, 640, n), g.uniform(0, 480, n)
    uv = np.stack([g.uniform(-100, 740, n), g.uniform(-100, 580, n)], -1)
    z = g.uniform(0.05, 50.0, n)
    err = 0.0
    for i in range(n):
        k = Intrinsics(fx[i], fy[i], cx[i], cy[i], 640, 480)
        err = max(err, float(np.max(np.abs(project(back_project(uv[i], z[i], k), k) - uv[i]))))
    res["project/back_project"] = (err <= 1e-9, f"max {err:.2e} px over {n} cases (tol 1e-9)")

    grid = np.linspace(-0.7, 0.7, 81)
    pts = np.stack(np.meshgrid(grid, grid), -1).reshape(-1, 2)
    pts = pts[np.hypot(pts[:, 0], pts[:, 1]) <= 0.7]
    err = 0.0
    for k1 in np.linspace(-0.3, 0.3, 13):
        d = Distortion(k1=k1, k2=0.02, p1=1e-3, p2=-1e-3)
        back, conv = undistort(distort(pts, d), d)
        err = max(err, float(np.max(np.abs(back - pts))) if conv.all() else math.inf)
    res["undistort/distort"] = (err <= 1e-8, f"max {err:.2e} for |k1|<=0.3 (tol 1e-8)")

    k = Intrinsics(40.0, 40.0, 19.5, 14.5, 40, 30)
    src = g.uniform(0.5, 5.0, (30, 40)).astype(np.float32)
    src[g.random(src.shape) < 0.2] = np.nan
    out = reproject_depth(src, CameraRig(Camera(k), Camera(k), RigidTransform()))
    same = np.array_equal(np.isnan(out), np.isnan(src)) and np.array_equal(
        out[~np.isnan(src)].view(np.uint32), src[~np.isnan(src)].view(np.uint32))
    res["identity rig"] = (same, "bit-exact" if same else "differs")

    worst = 0.0
    for b, zp in [(0.037, 2.0), (0.11, 2.9), (-0.063, 1.7), (0.2, 3.3)]:
        kp = Intrinsics(100.0, 100.0, 31.5, 23.5, 64, 48)
        warped = reproject_depth(np.full((48, 64), zp, np.float32),
                                 CameraRig(Camera(kp), Camera(kp), RigidTransform(np.eye(3), [b, 0, 0])))
        cols = np.nonzero(np.isfinite(warped))[1]
        src_col = cols - 100.0 * b / zp
        worst = max(worst, float(np.max(np.abs(src_col - np.round(src_col)))))
    res["plane shift"] = (worst <= 0.51, f"max {worst:.3f} px from fx*b/Z (tol 0.51)")

    assert record(capsys, 1, "geometry oracles", res, time.perf_counter() - t0, 10)


# --------------------------------------------------------------------------
# 2. gradients


def test_criterion_2_gradients(capsys):
    t0 = time.perf_counter()
    errs = checks.run_suite(seed=0, entries_per_tensor=16)
    ops = {k: v for k, v in errs.items() if k != "objective"}
    worst_op = max(ops, key=ops.get)
    res = {
        f"{len(ops)} ops": (ops[worst_op] <= 1e-5, f"worst {worst_op} {ops[worst_op]:.2e} (tol 1e-5)"),
        "four-term objective": (errs["objective"] <= 1e-5, f"{errs['objective']:.2e} (tol 1e-5)"),
    }
    assert record(capsys, 2, "central-difference gradients", res, time.perf_counter() - t0, 60)


# --------------------------------------------------------------------------
# 3. loss identities


def test_criterion_3_losses(capsys):
    t0 = time.perf_counter()
    one = np.ones((1, 1, 1, 1))
    l_small = smooth_l1_loss(Tensor(one * 1.5), one).item()
    l_large = smooth_l1_loss(Tensor(one * 3.0), one).item()
    x = np.random.default_rng(3).random((1, 1, 12, 12))
    s_self = float(np.max(np.abs(ssim(x, x)[0].data - 1.0)))
    flat = np.full((1, 1, 6, 7), 2.0)
    ramp = np.broadcast_to(np.arange(7.0), (6, 7))[None, None].copy()
    l_norm = normal_consistency_loss(Tensor(ramp), flat).item()
    quad = np.broadcast_to(np.arange(10.0) ** 2, (10, 10))[None, None].copy()
    l_smooth = edge_aware_smoothness(Tensor(quad), np.full((1, 3, 10, 10), 0.5)).item()
    want_norm = 1 - 1 / math.sqrt(2)
    res = {
        "SmoothL1 |x|=0.5": (abs(l_small - 0.125) <= 1e-6, f"{l_small:.9f} vs 0.125"),
        "SmoothL1 |x|=2": (abs(l_large - 1.5) <= 1e-6, f"{l_large:.9f} vs 1.5"),
        "SSIM self": (s_self <= 1e-6, f"max |SSIM-1| {s_self:.1e}"),
        "normal ramp vs flat": (abs(l_norm - want_norm) <= 1e-6, f"{l_norm:.9f} vs {want_norm:.9f}"),
        "quadratic smoothness": (abs(l_smooth - 1.0) <= 1e-6, f"{l_smooth:.9f} vs 1"),
    }
    assert record(capsys, 3, "loss closed forms, tol 1e-6", res, time.perf_counter() - t0, 5)


# --------------------------------------------------------------------------
# 4. metrics


def test_criterion_4_metrics(capsys):
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(20):
        g = np.random.default_rng(seed)
        gt = g.uniform(0.5, 6.0, (8, 8)).astype(np.float32)
        pred = (gt * g.uniform(0.6, 1.6, (8, 8))).astype(np.float32)
        pred[g.random((8, 8)) < 0.1] = np.nan
        mask = g.random((8, 8)) < 0.8
        got = compute_metrics(pred, gt, mask).to_dict()
        mismatches += sum(got[k] != v for k, v in naive_metrics(pred, gt, mask).items())
    b = compute_metrics(np.array([[1.25, 2.0]]), np.array([[1.0, 2.0]]))

    g = np.random.default_rng(4)
    gt = g.uniform(1, 3, (8, 8))
    pred = gt + g.normal(scale=0.2, size=gt.shape)
    gt[0, :3] = np.nan
    ov = np.zeros((8, 8), bool)
    ov[2:6, 2:6] = True
    reps = region_eval(pred, gt, ov, ~ov)
    f, o, i = reps["full"], reps["outside_fov"], reps["overlapping_fov"]
    count_ok = f.pixel_count == o.pixel_count + i.pixel_count
    mae_ok = math.isclose(f.mae, (o.mae * o.pixel_count + i.mae * i.pixel_count) / f.pixel_count, rel_tol=1e-12)
    mse_ok = math.isclose(f.mse, (o.mse * o.pixel_count + i.mse * i.pixel_count) / f.pixel_count, rel_tol=1e-12)
    res = {
        "naive loop": (mismatches == 0, f"{mismatches} mismatching fields over 20 fixtures"),
        "delta boundary": (b.delta1 == 0.5, f"ratio 1.25 excluded, delta1 {b.delta1}"),
        "region decomposition": (count_ok and mae_ok and mse_ok,
                                 f"counts {o.pixel_count}+{i.pixel_count}={f.pixel_count}, weighted MAE/MSE match"),
    }
    assert record(capsys, 4, "metric oracle", res, time.perf_counter() - t0, 5)


# --------------------------------------------------------------------------
# 5. alignment


def test_criterion_5_alignment(capsys):
    t0 = time.perf_counter()
    g = np.random.default_rng(5)
    ref = g.uniform(0.5, 6.0, (40, 40))
    r = align_relative_depth((ref - 0.7) / 1.8, ref)
    exact = max(abs(r.s - 1.8) / 1.8, abs(r.t - 0.7) / 0.7)

    worst = 0.0
    for seed in range(20):
        g = np.random.default_rng(100 + seed)
        s, t = g.uniform(0.2, 5.0), g.uniform(0.0, 2.0)
        rel = g.uniform(0.5, 3.0, 2000)
        obs = s * rel + t
        bad = g.choice(rel.size, rel.size // 10, replace=False)
        up = g.random(bad.size) < 0.5
        obs[bad] = np.where(up, obs[bad] + g.uniform(2.0, 10.0, bad.size), obs[bad] * g.uniform(0.01, 0.2, bad.size))
        worst = max(worst, abs(align_relative_depth(rel, obs).s - s) / s)
    res = {
        "exact affine": (exact <= 1e-9, f"rel error {exact:.1e} (tol 1e-9)"),
        "10% gross outliers": (worst <= 0.02, f"worst scale error {100 * worst:.2f}% over 20 fits (tol 2%)"),
    }
    assert record(capsys, 5, "alignment oracle", res, time.perf_counter() - t0, 5)


# --------------------------------------------------------------------------
# 6. simulator


def test_criterion_6_simulator(capsys):
    t0 = time.perf_counter()
    quiet = ItofNoiseSpec(sigma_phi=0.0, flying_pixel_prob=0.0, dropout_prob=0.0)
    g = np.random.default_rng(6)
    gt = g.uniform(0.3, 7.4, (60, 80))
    ident = np.array_equal(simulate_itof(gt, quiet), gt)
    wrapped = simulate_itof(np.full((4, 4), 8.0), quiet)
    albedo = g.random((60, 80))
    spec = ItofNoiseSpec(seed=11)
    a, b = simulate_itof(gt, spec, albedo), simulate_itof(gt, spec, albedo)
    res = {
        "noiseless identity": (ident, "exact" if ident else "differs"),
        "8.0 m at 20 MHz": (bool(np.all(wrapped == 0.5)), f"wraps to {float(wrapped[0, 0])} m"),
        "seeded determinism": (a.tobytes() == b.tobytes(), "byte-identical" if a.tobytes() == b.tobytes()
                               else "differs"),
    }
    assert record(capsys, 6, "simulator oracle", res, time.perf_counter() - t0, 5)


# --------------------------------------------------------------------------
# 7 / 8. desk-scale experiment


@pytest.fixture(scope="module")
def thresholds():
    return json.loads((CONFIGS / "acceptance_thresholds.json").read_text())


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    cfg = load_config(CONFIGS / "desk.json")
    out = tmp_path_factory.mktemp("desk_a")
    t0 = time.perf_counter()
    res = train(cfg, out)
    return cfg, res, out, time.perf_counter() - t0


def test_criterion_7_desk_experiment(capsys, desk_run, thresholds):
    cfg, res, out, elapsed = desk_run
    raw = json.loads((out / "eval_report.json").read_text())
    rep = {m: {r: EvalReport(**v) for r, v in regions.items()} for m, regions in raw.items()}
    fused, itof, prior = (rep[m] for m in ("fused", "itof_nearest", "aligned_prior"))
    d1_min = thresholds["overlapping_delta1_min"]
    ratio_max = thresholds["overlap_to_outside_mae_ratio_max"]
    ratio = fused["overlapping_fov"].mae / fused["outside_fov"].mae
    first, last = res.history[0]["val_full_mae"], res.history[-1]["val_full_mae"]
    drop = 1 - last / first
    res_ = {
        "(a) fused < iToF nearest": (fused["full"].mae < itof["full"].mae,
                                     f"MAE {fused['full'].mae:.4f} vs {itof['full'].mae:.4f} m"),
        "(b) fused < aligned prior": (fused["full"].mae < prior["full"].mae,
                                      f"MAE {fused['full'].mae:.4f} vs {prior['full'].mae:.4f} m"),
        "(c) overlap delta1": (fused["overlapping_fov"].delta1 >= d1_min,
                               f"{fused['overlapping_fov'].delta1:.4f} (min {d1_min})"),
        "(d) overlap vs outside MAE": (ratio <= ratio_max,
                                       f"{fused['overlapping_fov'].mae:.4f} / {fused['outside_fov'].mae:.4f}"
                                       f" = {ratio:.3f} (max {ratio_max})"),
        "val MAE drop": (drop >= thresholds["val_mae_drop_min"],
                         f"{first:.3f} -> {last:.3f} m, {100 * drop:.0f}% (min "
                         f"{100 * thresholds['val_mae_drop_min']:.0f}%)"),
    }
    assert record(capsys, 7, f"desk experiment, {cfg.epochs} epochs", res_, elapsed, 900)


def test_criterion_8_determinism(capsys, desk_run, tmp_path):
    cfg, res, out, _ = desk_run
    t0 = time.perf_counter()
    again = train(cfg, tmp_path)
    elapsed = time.perf_counter() - t0
    same_ckpt = again.checkpoint == (out / "checkpoint.ckpt").read_bytes()
    same_rep = (tmp_path / "eval_report.json").read_bytes() == (out / "eval_report.json").read_bytes()
    res_ = {
        "checkpoint": (same_ckpt, f"{len(again.checkpoint)} bytes {'identical' if same_ckpt else 'differ'}"),
        "eval report": (same_rep, "identical JSON" if same_rep else "JSON differs"),
    }
    assert record(capsys, 8, "determinism of the desk run", res_, elapsed, 900)
