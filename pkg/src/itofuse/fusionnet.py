"""Dual-encoder RGB-D fusion network and its four training losses.

Both encoders share one topology (stem conv, then per level a residual
block and a stride-2 conv doubling the channels). The decoder starts from
the concatenated deepest features and, per level, applies conv + relu,
upsamples 2x and concatenates the skip features of both encoders. Each of
the finest ``multiscale_outputs`` decoder levels feeds a head
``conv -> tanh -> affine`` that maps into ``[d_min, d_max]``.

Tensors are NCHW. Ground truth, priors and masks are plain numpy arrays;
invalid depth is NaN.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyMaskError, ShapeError, ValidationError

log = logging.getLogger(__name__)

RGB_CHANNELS = 3
DEPTH_CHANNELS = 2  # normalized depth + validity


@dataclass
class FusionNetConfig:
    base_channels: int = 16
    levels: int = 3
    depth_range: tuple[float, float] = (0.5, 7.5)
    multiscale_outputs: int = 3
    # regression, structure distillation, smoothness, normal consistency
    weights: tuple[float, float, float, float] = (1.0, 0.01, 0.1, 0.0)
    smooth_alpha: float = 10.0
    ssim_window: int = 7

    def __post_init__(self):
        self.depth_range = tuple(float(v) for v in self.depth_range)
        self.weights = tuple(float(v) for v in self.weights)
        if self.levels < 2:
            raise ValidationError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 4:
            raise ValidationError(f"base_channels must be >= 4, got {self.base_channels}")
        if not self.depth_range[0] < self.depth_range[1]:
            raise ValidationError(f"depth_range must satisfy d_min < d_max, got {self.depth_range}")
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            raise ValidationError(f"need four non-negative loss weights, got {self.weights}")
        if not 1 <= self.multiscale_outputs <= self.levels:
            raise ValidationError(f"multiscale_outputs must lie in [1, levels], got {self.multiscale_outputs}")
        if self.ssim_window % 2 != 1:
            raise ValidationError(f"ssim_window must be odd, got {self.ssim_window}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        d["weights"] = list(self.weights)
        return d


# --------------------------------------------------------------------------
# parameters


def param_shapes(cfg: FusionNetConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; a pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout):
        shapes[f"{name}.w"] = (cout, cin, 3, 3)
        shapes[f"{name}.b"] = (cout,)

    for enc, cin in (("rgb", RGB_CHANNELS), ("depth", DEPTH_CHANNELS)):
        conv(f"{enc}.stem", cin, cfg.channels(0))
        for i in range(1, cfg.levels + 1):
            c = cfg.channels(i - 1)
            conv(f"{enc}.l{i}.res1", c, c)
            conv(f"{enc}.l{i}.res2", c, c)
            conv(f"{enc}.l{i}.down", c, cfg.channels(i))
    cin = 2 * cfg.channels(cfg.levels)
    for j in range(cfg.levels, 0, -1):
        cout = cfg.channels(j - 1)
        conv(f"dec.l{j}", cin, cout)
        cin = 3 * cout
        if j <= cfg.multiscale_outputs:
            conv(f"head.l{j}", cin, 1)
    return shapes


def param_count(cfg: FusionNetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: FusionNetConfig, seed: int = 0, zero_heads: bool = False) -> dict[str, Tensor]:
    """He-normal conv weights, zero biases, float32."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF05E]))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] * 9
            std = np.sqrt(2.0 / fan_in)
            if name.startswith("head."):
                std = 0.0 if zero_heads else 0.1 * std
            arr = (rng.standard_normal(shape) * std).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True)
    return params


# --------------------------------------------------------------------------
# forward


def make_depth_input(warped: np.ndarray, d_max: float) -> np.ndarray:
    """``(B, 1, H, W)`` warped depth -> ``(B, 2, H, W)`` [depth / d_max with holes at 0, validity]."""
    warped = np.asarray(warped)
    valid = np.isfinite(warped) & (warped > 0)
    depth = np.where(valid, warped / d_max, 0.0)
    return np.concatenate([depth, valid], axis=1).astype(np.float32)


def _conv(params, name, x, stride=1):
    return ad.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride)


def _encode(params, prefix, x, cfg):
    f = ad.relu(_conv(params, f"{prefix}.stem", x))
    skips = []
    for i in range(1, cfg.levels + 1):
        h = ad.relu(_conv(params, f"{prefix}.l{i}.res1", f))
        f = ad.relu(f + _conv(params, f"{prefix}.l{i}.res2", h))
        skips.append(f)
        f = ad.relu(_conv(params, f"{prefix}.l{i}.down", f, stride=2))
    return f, skips


def forward(rgb, depth_in, params: dict[str, Tensor], cfg: FusionNetConfig) -> list[Tensor]:
    """Run the network; returns depth predictions ordered coarse -> fine."""
    rgb = ad.as_tensor(rgb)
    depth_in = ad.as_tensor(depth_in)
    if rgb.ndim != 4 or rgb.shape[1] != RGB_CHANNELS:
        raise ShapeError(f"rgb must be (B, 3, H, W), got {rgb.shape}")
    if depth_in.ndim != 4 or depth_in.shape[1] != DEPTH_CHANNELS:
        raise ShapeError(f"depth input must be (B, 2, H, W), got {depth_in.shape}")
    if rgb.shape[0] != depth_in.shape[0] or rgb.shape[2:] != depth_in.shape[2:]:
        raise ShapeError(f"rgb {rgb.shape} and depth {depth_in.shape} disagree")
    h, w = rgb.shape[2:]
    step = 2 ** cfg.levels
    if h % step or w % step:
        raise ShapeError(f"input size {h}x{w} must be divisible by 2^levels = {step}")

    fr, skips_r = _encode(params, "rgb", rgb, cfg)
    fd, skips_d = _encode(params, "depth", depth_in, cfg)
    x = ad.concat_channels(fr, fd)
    d_min, d_max = cfg.depth_range
    half = 0.5 * (d_max - d_min)
    preds = []
    for j in range(cfg.levels, 0, -1):
        x = ad.relu(_conv(params, f"dec.l{j}", x))
        x = ad.upsample_nearest_2x(x)
        x = ad.concat_channels(x, skips_r[j - 1], skips_d[j - 1])
        if j <= cfg.multiscale_outputs:
            t = ad.tanh(_conv(params, f"head.l{j}", x))
            preds.append(t * half + (d_min + half))
    return preds


# --------------------------------------------------------------------------
# resampling helpers


def downsample_valid_nearest(a: np.ndarray, factor: int) -> np.ndarray:
    """Block downsampling that picks the first valid (finite, > 0) pixel of each block."""
    if factor == 1:
        return a
    b, c, h, w = a.shape
    if h % factor or w % factor:
        raise ShapeError(f"shape {a.shape} not divisible by {factor}")
    blocks = a.reshape(b, c, h // factor, factor, w // factor, factor).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // factor, w // factor, factor * factor)
    ok = np.isfinite(blocks) & (blocks > 0)
    first = np.argmax(ok, axis=-1)
    out = np.take_along_axis(blocks, first[..., None], -1)[..., 0]
    return np.where(ok.any(axis=-1), out, np.nan).astype(a.dtype)


def downsample_mean(a: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return a
    b, c, h, w = a.shape
    return a.reshape(b, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5)).astype(a.dtype)


def rgb_luminance(rgb: np.ndarray) -> np.ndarray:
    """``(B, 3, H, W)`` -> ``(B, 1, H, W)`` Rec. 601 luma."""
    rgb = np.asarray(rgb)
    return (0.299 * rgb[:, 0:1] + 0.587 * rgb[:, 1:2] + 0.114 * rgb[:, 2:3]).astype(rgb.dtype)


# --------------------------------------------------------------------------
# losses


def smooth_l1_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean Smooth-L1 of ``pred - gt`` over valid pixels, in meters."""
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    valid = np.isfinite(gt) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(gt))
    n = int(valid.sum())
    if n == 0:
        raise EmptyMaskError("smooth_l1_loss over an empty mask")
    diff = pred - np.where(valid, gt, 0.0).astype(pred.dtype)
    return ad.sum(ad.smooth_l1(diff) * valid.astype(pred.dtype)) * (1.0 / n)


def edge_aware_smoothness(pred: Tensor, rgb: np.ndarray, alpha: float = 10.0) -> Tensor:
    """Second-order depth smoothness down-weighted across image edges."""
    img = rgb_luminance(rgb).astype(pred.dtype)
    if img.shape != pred.shape:
        raise ShapeError(f"pred {pred.shape} and image {img.shape} differ")
    dxx = pred[:, :, :, 2:] - 2.0 * pred[:, :, :, 1:-1] + pred[:, :, :, :-2]
    dyy = pred[:, :, 2:, :] - 2.0 * pred[:, :, 1:-1, :] + pred[:, :, :-2, :]
    # forward differences sampled at the interior pixel of each stencil
    wx = np.exp(-alpha * np.abs(img[:, :, :, 2:] - img[:, :, :, 1:-1]))
    wy = np.exp(-alpha * np.abs(img[:, :, 2:, :] - img[:, :, 1:-1, :]))
    lx = ad.mean(ad.abs(dxx) * wx.astype(pred.dtype))
    ly = ad.mean(ad.abs(dyy) * wy.astype(pred.dtype))
    return (lx + ly) * 0.5


SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def ssim(x, y, window: int = 7, c1: float = SSIM_C1, c2: float = SSIM_C2) -> tuple[Tensor, Tensor]:
    """Box-window SSIM map (valid windows only) and its mean."""
    x = ad.as_tensor(x)
    y = ad.as_tensor(y, like=x)
    mx = ad.box_filter(x, window)
    my = ad.box_filter(y, window)
    vx = ad.box_filter(ad.square(x), window) - ad.square(mx)
    vy = ad.box_filter(ad.square(y), window) - ad.square(my)
    cxy = ad.box_filter(x * y, window) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
    den = (ad.square(mx) + ad.square(my) + c1) * (vx + vy + c2)
    smap = num / den
    return smap, ad.mean(smap)


def _minmax_normalize_np(a, valid):
    b = a.shape[0]
    out = np.zeros_like(a, dtype=np.float64)
    ok = np.zeros(b, dtype=bool)
    for i in range(b):
        v = valid[i]
        if v.sum() < 2:
            continue
        lo, hi = a[i][v].min(), a[i][v].max()
        if hi - lo > 1e-12 * max(1.0, abs(hi)):
            out[i] = (a[i] - lo) / (hi - lo)
            ok[i] = True
    return out, ok


def struct_distill_loss(pred: Tensor, rel_prior: np.ndarray, window: int = 7) -> Tensor:
    """``0.5 * (1 - SSIM)`` between per-image min-max normalized prediction and prior.

    Images whose prediction or prior is constant contribute 0 (logged).
    Invalid prior pixels take the normalized prediction's value there.
    """
    rel_prior = np.asarray(rel_prior)
    if pred.shape != rel_prior.shape:
        raise ShapeError(f"pred {pred.shape} and prior {rel_prior.shape} differ")
    valid = np.isfinite(rel_prior)
    prior_n, ok_prior = _minmax_normalize_np(np.where(valid, rel_prior, 0.0), valid)

    pv = pred.data
    hi = ad.masked_extreme(pred, valid, "max")
    lo = ad.masked_extreme(pred, valid, "min")
    span = hi.data - lo.data
    ok_pred = (span > 1e-12 * np.maximum(1.0, np.abs(hi.data))).reshape(-1)
    keep = ok_prior & ok_pred
    if not keep.all():
        log.warning("struct_distill_loss: %d image(s) with a constant normalization range contribute 0",
                    int((~keep).sum()))
    if not keep.any():
        return Tensor(np.zeros((), dtype=pv.dtype))
    # constant ranges are replaced by 1 so the graph stays finite; their term is masked out
    safe = np.where(keep.reshape(-1, 1, 1, 1), 0.0, 1.0).astype(pv.dtype)
    span_t = (hi - lo) * (1.0 - safe) + safe
    pred_n = (pred - lo) / span_t
    # holes in the prior copy the prediction, inside the graph so the gradient sees it
    vf = valid.astype(pv.dtype)
    target = pred_n * (1.0 - vf) + np.where(valid, prior_n, 0.0).astype(pv.dtype)
    smap, _ = ssim(pred_n, target, window)
    per_image = ad.mean(smap, axis=(1, 2, 3))
    terms = (1.0 - per_image) * (0.5 * keep.astype(pv.dtype))
    return ad.mean(terms)


def estimate_normals(d) -> Tensor:
    """Unit normals ``(B, 3, H-2, W-2)`` from central differences in pixel units."""
    d = ad.as_tensor(d)
    dx = (d[:, :, 1:-1, 2:] - d[:, :, 1:-1, :-2]) * 0.5
    dy = (d[:, :, 2:, 1:-1] - d[:, :, :-2, 1:-1]) * 0.5
    norm = ad.sqrt(ad.square(dx) + ad.square(dy) + 1.0)
    inv = 1.0 / norm
    return ad.concat_channels(-dx * inv, -dy * inv, inv)


def interior_valid(mask: np.ndarray) -> np.ndarray:
    """Center and 4-neighbours valid, cropped to the ``(H-2, W-2)`` interior."""
    m = np.asarray(mask, dtype=bool)
    return (m[:, :, 1:-1, 1:-1] & m[:, :, 1:-1, 2:] & m[:, :, 1:-1, :-2]
            & m[:, :, 2:, 1:-1] & m[:, :, :-2, 1:-1])


def normal_consistency_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean ``1 - <n_pred, n_gt>`` over valid interior pixels."""
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    valid = np.isfinite(gt) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(gt))
    inner = interior_valid(valid)
    n = int(inner.sum())
    if n == 0:
        raise EmptyMaskError("normal_consistency_loss has no valid interior pixels")
    n_gt = estimate_normals(np.where(valid, gt, 0.0).astype(pred.dtype)).data
    n_pred = estimate_normals(pred)
    dot = ad.sum(n_pred * n_gt, axis=1, keepdims=True)
    return ad.sum((1.0 - dot) * inner.astype(pred.dtype)) * (1.0 / n)


TERM_NAMES = ("reg", "struct", "smooth", "normal")


def total_loss(pyramid: list[Tensor], gt: np.ndarray, rgb: np.ndarray, rel_prior: np.ndarray,
               cfg: FusionNetConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted four-term objective averaged uniformly over pyramid levels.

    ``gt``/``rel_prior`` are full-resolution ``(B, 1, H, W)``, ``rgb`` is
    ``(B, 3, H, W)``; they are downsampled to each level. Returns the scalar
    objective and the level-averaged unweighted value of each term.
    """
    full_h = gt.shape[2]
    lam = dict(zip(TERM_NAMES, cfg.weights))
    total = None
    logs = {k: 0.0 for k in TERM_NAMES}
    for pred in pyramid:
        f = full_h // pred.shape[2]
        g = downsample_valid_nearest(gt, f)
        p = downsample_valid_nearest(rel_prior, f)
        im = downsample_mean(rgb, f)
        win = min(cfg.ssim_window, *[s if s % 2 else s - 1 for s in pred.shape[2:]])
        terms = {
            "reg": lambda: smooth_l1_loss(pred, g),
            "struct": lambda: struct_distill_loss(pred, p, win),
            "smooth": lambda: edge_aware_smoothness(pred, im, cfg.smooth_alpha),
            "normal": lambda: normal_consistency_loss(pred, g),
        }
        for name, fn in terms.items():
            val = fn()
            logs[name] += float(val.data) / len(pyramid)
            if lam[name] > 0:
                part = val * (lam[name] / len(pyramid))
                total = part if total is None else total + part
    if total is None:
        total = Tensor(np.zeros((), dtype=pyramid[0].dtype))
    return total, logs
