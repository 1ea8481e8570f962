"""Dataset synthesis, the training loop, held-out evaluation and inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .config import PipelineConfig
from .datagen import ItofNoiseSpec, SceneSpec, align_relative_depth, render_pair, simulate_itof, synth_mde_prior
from .errors import SingularFitError, TrainingDivergedError, ValidationError, ShapeError
from .evaluation import EvalReport, compute_metrics, region_eval
from .fileio import decode_checkpoint, encode_checkpoint
from .fusionnet import FusionNetConfig, forward, init_params, make_depth_input, param_shapes, total_loss
from .geometry import CameraRig, fov_masks, reproject_depth, valid_mask
from .optim import OptimizerState, optimizer_step

log = logging.getLogger(__name__)


@dataclass
class Sample:
    """One training / evaluation example in the RGB view (channel-first arrays)."""

    rgb: np.ndarray            # (3, H, W)
    gt: np.ndarray             # (1, H, W)
    warped: np.ndarray         # (1, H, W) reprojected measured iToF depth, NaN holes
    prior: np.ndarray          # (1, H, W) relative depth
    aligned_prior: np.ndarray  # (1, H, W) prior mapped to meters
    itof: np.ndarray           # (h, w) measured depth in the iToF view


def build_sample(scene: SceneSpec, rig: CameraRig, noise: ItofNoiseSpec, prior_seed: int) -> Sample:
    pair = render_pair(scene, rig)
    measured = simulate_itof(pair.itof_depth, noise, pair.itof_albedo)
    warped = reproject_depth(measured, rig)
    prior = synth_mde_prior(pair.depth, prior_seed)
    try:
        aligned = align_relative_depth(prior, warped, valid_mask(warped)).aligned
    except SingularFitError:
        aligned = np.full_like(prior, np.nan)
    return Sample(
        rgb=np.ascontiguousarray(pair.rgb.transpose(2, 0, 1)),
        gt=pair.depth[None],
        warped=warped[None],
        prior=prior[None],
        aligned_prior=aligned[None],
        itof=measured,
    )


def _noise_for(cfg: PipelineConfig, i: int) -> ItofNoiseSpec:
    n = cfg.noise
    return ItofNoiseSpec(n.f_m, n.sigma_phi, n.flying_pixel_prob, n.dropout_prob, seed=n.seed * 100003 + i)


def build_dataset(cfg: PipelineConfig) -> tuple[list[Sample], list[Sample]]:
    """Deterministically synthesize the train / validation samples."""
    scenes = cfg.scenes.scenes()
    n_train, _ = cfg.split_counts(len(scenes))
    samples = [build_sample(s, cfg.rig, _noise_for(cfg, i), cfg.seed * 7919 + i) for i, s in enumerate(scenes)]
    return samples[:n_train], samples[n_train:]


def stack(samples: list[Sample], d_max: float):
    rgb = np.stack([s.rgb for s in samples]).astype(np.float32)
    din = make_depth_input(np.stack([s.warped for s in samples]), d_max)
    gt = np.stack([s.gt for s in samples]).astype(np.float32)
    prior = np.stack([s.prior for s in samples]).astype(np.float32)
    return rgb, din, gt, prior


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_entries(params: dict[str, np.ndarray], state: OptimizerState | None, cfg: PipelineConfig,
                       epoch: int) -> dict[str, np.ndarray]:
    entries = {
        "meta/config_hash": np.frombuffer(cfg.config_hash(), dtype=np.uint8).astype(np.float32),
        "meta/epoch": np.array(epoch, dtype=np.float32),
        "meta/step": np.array(state.step if state else 0, dtype=np.float32),
        "meta/depth_range": np.array(cfg.model.depth_range, dtype=np.float32),
        "meta/multiscale_outputs": np.array(cfg.model.multiscale_outputs, dtype=np.float32),
    }
    for name, p in params.items():
        entries[f"param/{name}"] = p
    if state is not None:
        for name in params:
            if name in state.m:
                entries[f"opt/m/{name}"] = state.m[name]
                entries[f"opt/v/{name}"] = state.v[name]
    return entries


@dataclass
class LoadedCheckpoint:
    model: FusionNetConfig
    params: dict[str, np.ndarray]
    state: OptimizerState
    epoch: int
    config_hash: bytes


def load_checkpoint_bytes(buf: bytes, source: str = "<bytes>") -> LoadedCheckpoint:
    e = decode_checkpoint(buf, source)
    params = {k[len("param/"):]: v for k, v in e.items() if k.startswith("param/")}
    if "param/rgb.stem.w" not in e:
        raise ValidationError(f"{source}: checkpoint has no network parameters")
    base = int(params["rgb.stem.w"].shape[0])
    levels = sum(1 for k in params if k.startswith("rgb.l") and k.endswith(".down.w"))
    dr = tuple(float(v) for v in e.get("meta/depth_range", np.array([0.5, 7.5])))
    mo = int(e.get("meta/multiscale_outputs", np.array(levels)))
    model = FusionNetConfig(base_channels=base, levels=levels, depth_range=dr, multiscale_outputs=mo)
    expected = param_shapes(model)
    if set(expected) != set(params) or any(tuple(params[k].shape) != v for k, v in expected.items()):
        raise ValidationError(f"{source}: checkpoint parameters do not match a {levels}-level, "
                              f"{base}-channel network")
    state = OptimizerState(step=int(e.get("meta/step", np.array(0))))
    for k, v in e.items():
        if k.startswith("opt/m/"):
            state.m[k[6:]] = v.copy()
        elif k.startswith("opt/v/"):
            state.v[k[6:]] = v.copy()
    return LoadedCheckpoint(model, {k: params[k].copy() for k in expected}, state,
                            int(e.get("meta/epoch", np.array(0))),
                            bytes(e["meta/config_hash"].astype(np.uint8)) if "meta/config_hash" in e else b"")


# --------------------------------------------------------------------------
# evaluation


def nearest_fill(depth: np.ndarray) -> np.ndarray:
    """Fill invalid pixels with the nearest valid one (the plain upsampling baseline)."""
    ok = valid_mask(depth)
    if not ok.any():
        return np.full_like(depth, np.nan)
    _, (ri, ci) = ndimage.distance_transform_edt(~ok, return_indices=True)
    return depth[ri, ci]


def predict(params: dict[str, np.ndarray], model: FusionNetConfig, rgb: np.ndarray, din: np.ndarray,
            batch: int = 4) -> np.ndarray:
    """Finest pyramid level for ``(B, 3, H, W)`` / ``(B, 2, H, W)`` inputs, without building a graph."""
    frozen = {k: Tensor(v) for k, v in params.items()}
    outs = []
    for i in range(0, rgb.shape[0], batch):
        outs.append(forward(rgb[i:i + batch], din[i:i + batch], frozen, model)[-1].data)
    return np.concatenate(outs, axis=0)


def evaluate_samples(params, model: FusionNetConfig, samples: list[Sample]) -> dict[str, dict[str, EvalReport]]:
    """Region reports for the fused prediction and the two baselines, pooled over samples."""
    rgb, din, gt, _ = stack(samples, model.depth_range[1])
    pred = predict(params, model, rgb, din)[:, 0]
    gt2 = gt[:, 0]
    warped = np.stack([s.warped[0] for s in samples])
    ov, out = fov_masks(warped, valid_mask(gt2))
    upsampled = np.stack([nearest_fill(s.warped[0]) for s in samples])
    prior = np.stack([s.aligned_prior[0] for s in samples])
    return {
        "fused": region_eval(pred, gt2, ov, out),
        "itof_nearest": region_eval(upsampled, gt2, ov, out),
        "aligned_prior": region_eval(prior, gt2, ov, out),
    }


def reports_to_dict(res: dict[str, dict[str, EvalReport]]) -> dict:
    return {method: {region: r.to_dict() for region, r in regions.items()} for method, regions in res.items()}


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    state: OptimizerState
    history: list[dict] = field(default_factory=list)
    checkpoint: bytes = b""
    val_samples: list[Sample] = field(default_factory=list)


def train(cfg: PipelineConfig, out_dir=None, progress: Callable[[dict], None] | None = None,
          dataset: tuple[list[Sample], list[Sample]] | None = None) -> TrainResult:
    """Train the fusion network on the synthetic dataset described by ``cfg``.

    Writes ``checkpoint.ckpt``, ``train_log.jsonl`` and ``eval_report.json``
    to ``out_dir`` when given.
    """
    train_set, val_set = dataset if dataset is not None else build_dataset(cfg)
    model = cfg.model
    d_max = model.depth_range[1]
    tensors = init_params(model, cfg.seed)
    state = OptimizerState()
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(len(train_set))
        sums = {"total": 0.0, "reg": 0.0, "struct": 0.0, "smooth": 0.0, "normal": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            rgb, din, gt, prior = stack(batch, d_max)
            for p in tensors.values():
                p.grad = None
            pyramid = forward(rgb, din, tensors, model)
            loss, terms = total_loss(pyramid, gt, rgb, prior, model)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, step {state.step + 1}; "
                                            f"terms {terms}")
            ad.backward(loss)
            optimizer_step({k: t.data for k, t in tensors.items()}, {k: t.grad for k, t in tensors.items()},
                           state, cfg.optimizer)
            sums["total"] += value
            for k, v in terms.items():
                sums[k] += v
            n_batches += 1
        params = {k: t.data for k, t in tensors.items()}
        rec = {"epoch": epoch, "step": state.step}
        rec.update({f"loss_{k}": v / n_batches for k, v in sums.items()})
        if val_set:
            val = evaluate_samples(params, model, val_set)["fused"]
            rec.update({f"val_{region}_mae": r.mae for region, r in val.items()})
            rec["val_overlapping_delta1"] = val["overlapping_fov"].delta1 if "overlapping_fov" in val else None
        history.append(rec)
        log.info("epoch %d: %s", epoch, rec)
        if progress is not None:
            progress(rec)
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    params = {k: t.data.copy() for k, t in tensors.items()}
    ckpt = encode_checkpoint(checkpoint_entries(params, state, cfg, cfg.epochs))
    if out is not None:
        (out / "checkpoint.ckpt").write_bytes(ckpt)
        if val_set:
            rep = reports_to_dict(evaluate_samples(params, model, val_set))
            (out / "eval_report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    return TrainResult(params, state, history, ckpt, val_set)


# --------------------------------------------------------------------------
# inference


def infer_arrays(ckpt: LoadedCheckpoint, rgb: np.ndarray, itof_depth: np.ndarray, rig: CameraRig) -> np.ndarray:
    """``(H, W, 3)`` RGB + raw iToF depth -> fused depth at RGB resolution."""
    k = rig.rgb.intrinsics
    if rgb.shape != (k.height, k.width, 3):
        raise ShapeError(f"RGB image is {rgb.shape[1]}x{rgb.shape[0]}, rig expects {k.width}x{k.height}")
    ki = rig.itof.intrinsics
    if itof_depth.shape != ki.shape:
        raise ShapeError(f"iToF depth is {itof_depth.shape[1]}x{itof_depth.shape[0]}, "
                         f"rig expects {ki.width}x{ki.height}")
    warped = reproject_depth(itof_depth, rig)
    din = make_depth_input(warped[None, None], ckpt.model.depth_range[1])
    x = np.ascontiguousarray(rgb.transpose(2, 0, 1))[None].astype(np.float32)
    return predict(ckpt.params, ckpt.model, x, din)[0, 0]
