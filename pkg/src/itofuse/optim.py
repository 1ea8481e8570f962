"""RAdam with a plain-Adam ablation mode.

Rectified Adam follows Liu et al.'s update: the second-moment estimate is
only used once its approximated SMA length ``rho_t`` exceeds 5; before
that the step is the bias-corrected momentum ``lr * m_hat``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

RECTIFY_THRESHOLD = 5.0


@dataclass
class OptimizerConfig:
    kind: str = "radam"
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.kind not in ("radam", "adam"):
            raise ValidationError(f"optimizer kind must be 'radam' or 'adam', got {self.kind!r}")
        if not self.lr > 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValidationError(f"betas must lie in [0, 1), got {self.betas}")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
                   state: OptimizerState, cfg: OptimizerConfig) -> OptimizerState:
    """Update ``params`` in place; missing / ``None`` gradients count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2 ** t / bc2
    rectified = cfg.kind == "adam" or rho_t > RECTIFY_THRESHOLD
    if cfg.kind == "radam" and rectified:
        r = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    else:
        r = 1.0

    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = (b1 * m + (1.0 - b1) * g).astype(p.dtype)
        v = (b2 * v + (1.0 - b2) * g * g).astype(p.dtype)
        state.m[name], state.v[name] = m, v
        m_hat = m / bc1
        if rectified:
            upd = cfg.lr * r * m_hat / (np.sqrt(v / bc2) + cfg.eps)
        else:
            upd = cfg.lr * m_hat
        p -= upd.astype(p.dtype)
    return state
