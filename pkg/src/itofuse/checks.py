"""Finite-difference verification of every autodiff op and the full training objective."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .fusionnet import FusionNetConfig, forward, init_params, make_depth_input, total_loss


def _off_kinks(a, margin=0.05):
    return np.where(np.abs(a) < margin, np.where(a >= 0, margin, -margin) + a, a)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    x = Tensor(_off_kinks(rng.normal(size=(2, 3, 6, 6))))
    y = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 6, 6)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=4))
    m = rng.random((2, 3, 6, 6)) < 0.5
    m[..., 0, 0] = True
    c = rng.normal(size=(2, 8, 12, 12))
    wsum = lambda t: ad.sum(t * c[tuple(slice(0, s) for s in t.shape)]) if t.ndim == 4 else ad.sum(t)
    return {
        "add": (lambda p, q: wsum(p + q * q), [x, y]),
        "sub": (lambda p, q: wsum(ad.square(p - q)), [x, y]),
        "mul": (lambda p, q: wsum(p * q), [x, y]),
        "div": (lambda p, q: wsum(p / q), [x, y]),
        "neg": (lambda p: wsum(-p), [x]),
        "square": (lambda p: wsum(ad.square(p)), [x]),
        "sqrt": (lambda q: wsum(ad.sqrt(q)), [y]),
        "exp": (lambda p: wsum(ad.exp(p)), [x]),
        "abs": (lambda p: wsum(ad.abs(p)), [x]),
        "relu": (lambda p: wsum(ad.relu(p)), [x]),
        "tanh": (lambda p: wsum(ad.tanh(p)), [x]),
        "smooth_l1": (lambda p: wsum(ad.smooth_l1(p * 2.0)), [x]),
        "sum": (lambda p: ad.sum(ad.square(ad.sum(p, axis=1, keepdims=True))), [x]),
        "mean": (lambda p: ad.sum(ad.square(ad.mean(p, axis=(2, 3)))), [x]),
        "getitem": (lambda p: wsum(ad.square(p[:, 1:, 2:-1])), [x]),
        "reshape": (lambda p: ad.sum(ad.reshape(p, (6, 36)) * c[:, :3, :6, :6].reshape(6, 36)), [x]),
        "concat": (lambda p, q: ad.sum(ad.square(ad.concat_channels(p, q))), [x, y]),
        "masked_extreme": (lambda p: ad.sum(ad.masked_extreme(p, m, "max") - 2.0 * ad.masked_extreme(p, m, "min")), [x]),
        "conv2d": (lambda p, w_, b_: wsum(ad.conv2d(p, w_, b_)), [x, w, b]),
        "conv2d_stride2": (lambda p, w_, b_: ad.sum(ad.square(ad.conv2d(p, w_, b_, stride=2))), [x, w, b]),
        "upsample": (lambda p: ad.sum(ad.square(ad.upsample_nearest_2x(p))), [x]),
        "box_filter": (lambda p: ad.sum(ad.square(ad.box_filter(p, 3))), [x]),
    }


def objective_case(rng: np.random.Generator, size: int = 16):
    """Full four-term objective on a 2-level, 8-channel network at ``size x size``."""
    cfg = FusionNetConfig(base_channels=8, levels=2, multiscale_outputs=2, depth_range=(0.5, 7.5),
                          weights=(1.0, 0.5, 0.3, 0.2), ssim_window=5)
    rgb = rng.random((1, 3, size, size))
    warped = rng.uniform(0.5, 5.0, (1, 1, size, size))
    warped[rng.random(warped.shape) < 0.4] = np.nan
    din = make_depth_input(warped, 7.5).astype(np.float64)
    gt = rng.uniform(1.0, 6.0, (1, 1, size, size))
    gt[0, 0, :3, :3] = np.nan
    prior = 0.7 * gt + 0.3
    params = init_params(cfg, seed=int(rng.integers(1 << 31)))
    names = list(params)
    for n in names:
        # a non-constant prediction, and biases that keep zero-input pixels off the relu kink
        if n.startswith("head") and n.endswith(".w"):
            params[n] = Tensor(params[n].data * 10.0)
        if n.endswith(".b"):
            params[n] = Tensor(rng.normal(scale=0.1, size=params[n].shape))

    def f(*ps):
        return total_loss(forward(rgb, din, dict(zip(names, ps)), cfg), gt, rgb, prior, cfg)[0]

    return f, [params[n] for n in names]


def run_suite(seed: int = 0, entries_per_tensor: int = 4) -> dict[str, float]:
    """Max relative gradient error per op plus ``"objective"`` for the full loss."""
    rng = np.random.default_rng(seed)
    out = {name: grad_check(f, xs) for name, (f, xs) in op_cases(rng).items()}
    f, xs = objective_case(rng)
    out["objective"] = grad_check(f, xs, eps=1e-5, max_entries=entries_per_tensor, seed=seed)
    return out
