"""Pinhole + Brown-Conrady camera models and iToF -> RGB depth reprojection.

Point and pixel arguments are numpy arrays whose last axis holds the
coordinates, so every function works on a single point or on a whole image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import BehindCameraError, DomainError, ShapeError, ValidationError

ORTHONORMAL_TOL = 1e-9
DEFAULT_PROJECT_EPS = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(vals)):
            raise ValidationError(f"intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValidationError(f"resolution must be >= 1, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.height), int(self.width)


@dataclass(frozen=True)
class Distortion:
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite(self.as_list())):
            raise ValidationError(f"distortion coefficients must be finite, got {self.as_list()}")

    def as_list(self) -> list[float]:
        """OpenCV ordering ``[k1, k2, p1, p2, k3]``."""
        return [self.k1, self.k2, self.p1, self.p2, self.k3]

    @property
    def is_zero(self) -> bool:
        return not any(self.as_list())


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``X_dst = r @ X_src + t``; ``t`` in meters."""

    r: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3):
            raise ValidationError(f"rotation R must be 3x3, got shape {r.shape}")
        if t.shape != (3,):
            raise ValidationError(f"translation t must have 3 entries, got {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValidationError("rotation R / translation t must be finite")
        err = np.max(np.abs(r.T @ r - np.eye(3)))
        if err > ORTHONORMAL_TOL:
            raise ValidationError(f"rotation R is not orthonormal (max |R^T R - I| = {err:.3e})")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValidationError(f"rotation R must have det 1, got {np.linalg.det(r):.12f}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.r.T, -self.r.T @ self.t)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.r, other.r) and np.array_equal(self.t, other.t))


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    distortion: Distortion = field(default_factory=Distortion)


@dataclass(frozen=True)
class CameraRig:
    itof: Camera
    rgb: Camera
    extrinsic: RigidTransform = field(default_factory=RigidTransform)  # iToF frame -> RGB frame


def rotation_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` from angles in radians."""
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    rmx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rmy = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rmz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rmz @ rmy @ rmx


# --------------------------------------------------------------------------
# point operations


def back_project(uv, z, k: Intrinsics) -> np.ndarray:
    """Lift pixel coordinates ``uv[..., 2]`` at depth ``z`` to camera-frame points."""
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)):
        raise DomainError("back_project requires strictly positive depth")
    x = z * (uv[..., 0] - k.cx) / k.fx
    y = z * (uv[..., 1] - k.cy) / k.fy
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def transform_point(T: RigidTransform, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X @ T.r.T + T.t


def distort(n, d: Distortion) -> np.ndarray:
    """Forward Brown-Conrady model on normalized image coordinates."""
    n = np.asarray(n, dtype=np.float64)
    x, y = n[..., 0], n[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (d.k1 + r2 * (d.k2 + r2 * d.k3))
    xd = x * radial + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def undistort(n, d: Distortion, tol: float = 1e-10, max_iter: int = 20):
    """Invert :func:`distort` by fixed-point iteration.

    Returns ``(points, converged)`` where ``converged`` flags, per point,
    whether successive iterates came within ``tol`` before ``max_iter``.
    """
    nd = np.asarray(n, dtype=np.float64)
    if d.is_zero:
        return nd.copy(), np.ones(nd.shape[:-1], dtype=bool)
    xd, yd = nd[..., 0], nd[..., 1]
    x, y = xd.copy(), yd.copy()
    converged = np.zeros(xd.shape, dtype=bool)
    for _ in range(max_iter):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (d.k1 + r2 * (d.k2 + r2 * d.k3))
        dx = 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x)
        dy = d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y
        xn = (xd - dx) / radial
        yn = (yd - dy) / radial
        step = np.maximum(np.abs(xn - x), np.abs(yn - y))
        # freeze converged points so their result does not depend on the rest
        upd = ~converged
        x = np.where(upd, xn, x)
        y = np.where(upd, yn, y)
        converged = converged | (step < tol)
        if converged.all():
            break
    ok = converged & np.isfinite(x) & np.isfinite(y)
    return np.stack([x, y], axis=-1), ok


def project(X, k: Intrinsics, d: Distortion | None = None, eps: float = DEFAULT_PROJECT_EPS) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    if np.any(~(z > eps)):
        raise BehindCameraError(f"point depth must exceed {eps} m to project")
    n = np.stack([X[..., 0] / z, X[..., 1] / z], axis=-1)
    if d is not None and not d.is_zero:
        n = distort(n, d)
    return np.stack([k.fx * n[..., 0] + k.cx, k.fy * n[..., 1] + k.cy], axis=-1)


def pixel_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit-depth ray directions ``(H, W, 3)`` through every pixel center, plus validity."""
    k = cam.intrinsics
    v, u = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    n = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy], axis=-1)
    n, ok = undistort(n, cam.distortion)
    rays = np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)
    return rays, ok


# --------------------------------------------------------------------------
# depth map operations


def _pixel_grid(k: Intrinsics) -> np.ndarray:
    v, u = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def reproject_depth(src: np.ndarray, rig: CameraRig, eps: float = DEFAULT_PROJECT_EPS) -> np.ndarray:
    """Forward-warp an iToF depth map into the RGB view.

    Every valid source pixel is back-projected, moved into the RGB frame,
    projected, and splatted to the nearest target pixel. Collisions keep the
    smallest depth, then the smallest source index. Unhit pixels are NaN.
    """
    ki, kr = rig.itof.intrinsics, rig.rgb.intrinsics
    src = np.asarray(src)
    if src.shape != ki.shape:
        raise ShapeError(f"source depth shape {src.shape} does not match iToF resolution {ki.shape}")
    flat = src.reshape(-1).astype(np.float64)
    valid = np.isfinite(flat) & (flat > 0)

    uv = _pixel_grid(ki).reshape(-1, 2)
    if not rig.itof.distortion.is_zero:
        n = np.stack([(uv[:, 0] - ki.cx) / ki.fx, (uv[:, 1] - ki.cy) / ki.fy], axis=-1)
        n, ok = undistort(n, rig.itof.distortion)
        valid &= ok
        uv = np.stack([n[:, 0] * ki.fx + ki.cx, n[:, 1] * ki.fy + ki.cy], axis=-1)

    idx = np.nonzero(valid)[0]
    target = np.full(flat.shape[0], -1, dtype=np.int64)
    z_rgb = np.zeros(flat.shape[0])
    if idx.size:
        pts = transform_point(rig.extrinsic, back_project(uv[idx], flat[idx], ki))
        front = pts[:, 2] > eps
        idx, pts = idx[front], pts[front]
        if idx.size:
            pix = project(pts, kr, rig.rgb.distortion, eps=eps)
            col = np.floor(pix[:, 0] + 0.5)
            row = np.floor(pix[:, 1] + 0.5)
            inside = (col >= 0) & (col < kr.width) & (row >= 0) & (row < kr.height)
            inside &= np.isfinite(pix).all(axis=1)
            idx, pts = idx[inside], pts[inside]
            target[idx] = (row[inside].astype(np.int64) * kr.width + col[inside].astype(np.int64))
            z_rgb[idx] = pts[:, 2]
    depth, _ = kernels.splat_min_depth(target, z_rgb, kr.width * kr.height)
    return depth.reshape(kr.shape).astype(src.dtype if src.dtype.kind == "f" else np.float64)


def valid_mask(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth)
    return np.isfinite(depth) & (depth > 0)


def fov_masks(warped: np.ndarray, gt_valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``gt_valid`` into pixels covered / not covered by the warped iToF depth."""
    warped = np.asarray(warped)
    gt_valid = np.asarray(gt_valid, dtype=bool)
    if warped.shape != gt_valid.shape:
        raise ShapeError(f"warped depth {warped.shape} and gt mask {gt_valid.shape} differ")
    hit = valid_mask(warped)
    return gt_valid & hit, gt_valid & ~hit
