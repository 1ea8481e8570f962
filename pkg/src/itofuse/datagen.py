"""Procedural RGB-D scenes, iToF measurement simulation and monocular-prior synthesis.

World coordinates coincide with the RGB camera frame. A render pose maps
world points into the rendering camera (``X_cam = R X_w + t``), so the RGB
view uses the identity and the iToF view uses the inverse rig extrinsic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DomainError, ShapeError, SingularFitError, ValidationError
from .geometry import Camera, CameraRig, Distortion, Intrinsics, RigidTransform, pixel_rays, rotation_from_euler, valid_mask

log = logging.getLogger(__name__)

# Rounded on purpose: 20 MHz then gives the 7.5 m ambiguity range exactly.
SPEED_OF_LIGHT = 3.0e8

PRIMITIVE_KINDS = ("plane", "sphere", "box")
BACKGROUND_ALBEDO = (0.55, 0.55, 0.5)
LIGHT_DIR = np.array([-0.3, -0.6, -1.0]) / np.linalg.norm([-0.3, -0.6, -1.0])
DROPOUT_LUMINANCE = 0.15


@dataclass
class Primitive:
    """One scene object.

    ``size`` is interpreted per kind: plane -> (half-width, half-height, _),
    sphere -> (radius, _, _), box -> half extents along its local axes.
    ``rotation`` columns are the object's local axes in world coordinates.
    """

    kind: str
    center: np.ndarray
    size: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    albedo: tuple[float, float, float] = (0.7, 0.7, 0.7)
    texture_freq: float = 2.0

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValidationError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.rotation = RigidTransform(self.rotation).r
        if self.kind == "sphere" and self.size[0] <= 0:
            raise ValidationError("sphere radius must be positive")
        if np.any(np.asarray(self.albedo) < 0) or np.any(np.asarray(self.albedo) > 1):
            raise ValidationError(f"albedo must lie in [0, 1], got {self.albedo}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "rotation": self.rotation.reshape(-1).tolist(),
            "albedo": list(self.albedo),
            "texture_freq": self.texture_freq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(
            kind=d["kind"],
            center=d["center"],
            size=d["size"],
            rotation=np.asarray(d.get("rotation", np.eye(3).reshape(-1)), dtype=np.float64).reshape(3, 3),
            albedo=tuple(d.get("albedo", (0.7, 0.7, 0.7))),
            texture_freq=float(d.get("texture_freq", 2.0)),
        )


@dataclass
class SceneSpec:
    seed: int
    primitives: list[Primitive]
    depth_range: tuple[float, float] = (0.5, 8.0)

    def __post_init__(self):
        d_min, d_max = self.depth_range
        if not 0 < d_min < d_max:
            raise ValidationError(f"depth_range must satisfy 0 < d_min < d_max, got {self.depth_range}")
        if not self.primitives:
            raise ValidationError("a scene needs at least one primitive")

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "depth_range": list(self.depth_range),
            "primitives": [p.to_dict() for p in self.primitives],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            seed=int(d["seed"]),
            primitives=[Primitive.from_dict(p) for p in d["primitives"]],
            depth_range=tuple(d.get("depth_range", (0.5, 8.0))),
        )


@dataclass
class ItofNoiseSpec:
    f_m: float = 20e6
    sigma_phi: float = 0.01
    flying_pixel_prob: float = 0.3
    dropout_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.f_m > 0:
            raise ValidationError(f"f_m must be positive, got {self.f_m}")
        if not self.sigma_phi >= 0:
            raise ValidationError(f"sigma_phi must be >= 0, got {self.sigma_phi}")
        for name in ("flying_pixel_prob", "dropout_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValidationError(f"{name} must lie in [0, 1], got {p}")

    @property
    def ambiguity(self) -> float:
        return ambiguity_distance(self.f_m)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AlignResult:
    s: float
    t: float
    aligned: np.ndarray
    inlier_count: int


# --------------------------------------------------------------------------
# scene generation and ray casting


def random_scene(seed: int, depth_range=(1.0, 6.0), n_primitives=(3, 6), half_fov=(0.7, 0.55)) -> SceneSpec:
    """Sample a cluttered scene in front of the RGB camera."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    d_min, d_max = depth_range
    prims = []
    if rng.random() < 0.6:
        # ground plane below the camera, seen at a grazing angle
        y = rng.uniform(0.6, 1.2)
        rot = np.array([[1.0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]])
        prims.append(Primitive("plane", [0.0, y, (d_min + d_max) / 2], [6.0, (d_max - d_min) / 2, 0],
                               rot, tuple(rng.uniform(0.3, 0.9, 3)), float(rng.uniform(1.0, 4.0))))
    n = int(rng.integers(n_primitives[0], n_primitives[1] + 1))
    for _ in range(n):
        kind = PRIMITIVE_KINDS[int(rng.integers(0, 3))]
        z = rng.uniform(d_min + 0.4, d_max - 0.8)
        x = rng.uniform(-half_fov[0], half_fov[0]) * z
        y = rng.uniform(-half_fov[1], half_fov[1]) * z
        s = rng.uniform(0.15, 0.6) * (0.5 + z / d_max)
        rot = rotation_from_euler(*rng.uniform(-0.6, 0.6, 3))
        if kind == "sphere":
            size = [s, 0, 0]
        elif kind == "plane":
            size = [s * rng.uniform(1.0, 2.0), s * rng.uniform(1.0, 2.0), 0]
        else:
            size = list(s * rng.uniform(0.5, 1.0, 3))
        # a fraction of dark objects exercises low-reflectivity dropout
        if rng.random() < 0.25:
            albedo = tuple(rng.uniform(0.03, 0.15, 3))
        else:
            albedo = tuple(rng.uniform(0.25, 1.0, 3))
        prims.append(Primitive(kind, [x, y, z], size, rot, albedo, float(rng.uniform(1.0, 6.0))))
    return SceneSpec(seed=int(seed), primitives=prims, depth_range=(float(d_min), float(d_max)))


def _texture(a, b, freq):
    return 0.75 + 0.25 * np.sin(2 * np.pi * freq * a) * np.sin(2 * np.pi * freq * b)


def _hit_plane(o, d, prim):
    n = prim.rotation[:, 2]
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((prim.center - o) @ n) / denom
        p = o + t[..., None] * d
        local = (p - prim.center) @ prim.rotation
    inside = (np.abs(local[..., 0]) <= prim.size[0]) & (np.abs(local[..., 1]) <= prim.size[1])
    t = np.where(inside & (t > 0) & (np.abs(denom) > 1e-12), t, np.inf)
    normal = np.broadcast_to(n, d.shape)
    return t, normal, local[..., 0], local[..., 1]


def _hit_sphere(o, d, prim):
    oc = o - prim.center
    a = np.einsum("...i,...i->...", d, d)
    b = 2.0 * (d @ oc)
    c = oc @ oc - prim.size[0] ** 2
    disc = b * b - 4 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    t = (-b - root) / (2 * a)
    t = np.where((disc >= 0) & (t > 0), t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    normal = (p - prim.center) / prim.size[0]
    local = normal @ prim.rotation
    ua = np.arctan2(local[..., 1], local[..., 0]) * prim.size[0]
    va = np.arccos(np.clip(local[..., 2], -1, 1)) * prim.size[0]
    return t, normal, ua, va


def _hit_box(o, d, prim):
    ol = (o - prim.center) @ prim.rotation
    dl = d @ prim.rotation
    h = prim.size
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - ol) / dl
        t2 = (h - ol) / dl
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    tmin = np.max(lo, axis=-1)
    tmax = np.min(hi, axis=-1)
    hit = (tmax >= tmin) & (tmin > 0)
    t = np.where(hit, tmin, np.inf)
    axis = np.argmax(lo, axis=-1)
    pl = ol + np.where(np.isfinite(t), t, 0.0)[..., None] * dl
    sign = np.sign(np.take_along_axis(pl, axis[..., None], -1)[..., 0])
    nl = np.zeros(d.shape)
    np.put_along_axis(nl, axis[..., None], sign[..., None], -1)
    normal = nl @ prim.rotation.T
    # face coordinates: the two local axes orthogonal to the hit axis
    ua = np.take_along_axis(pl, ((axis + 1) % 3)[..., None], -1)[..., 0]
    va = np.take_along_axis(pl, ((axis + 2) % 3)[..., None], -1)[..., 0]
    return t, normal, ua, va


_HIT = {"plane": _hit_plane, "sphere": _hit_sphere, "box": _hit_box}


def render_scene(spec: SceneSpec, cam, pose: RigidTransform | None = None, *, return_albedo: bool = False):
    """Ray-cast ``spec`` from a camera placed at ``pose`` (world -> camera).

    Returns ``(rgb, depth)``: ``rgb`` is ``(H, W, 3)`` float32 in [0, 1] and
    ``depth`` the camera-frame z of the nearest hit, float32. Rays that miss
    every primitive hit the background plane ``z_world = d_max``. With
    ``return_albedo`` the reflectance luminance map is returned as well.
    """
    if isinstance(cam, Intrinsics):
        cam = Camera(cam)
    pose = pose or RigidTransform()
    d_cam, ok = pixel_rays(cam)
    rinv = pose.r.T
    origin = -rinv @ pose.t
    d = d_cam @ pose.r  # == (rinv @ d_cam^T)^T
    d_max = spec.depth_range[1]

    bg = Primitive("plane", [0.0, 0.0, d_max], [1e6, 1e6, 0], np.diag([1.0, -1.0, -1.0]), BACKGROUND_ALBEDO, 1.5)
    prims = list(spec.primitives) + [bg]

    best_t = np.full(d.shape[:-1], np.inf)
    best_id = np.full(d.shape[:-1], -1, dtype=np.int64)
    normal = np.zeros(d.shape)
    ua = np.zeros(d.shape[:-1])
    va = np.zeros(d.shape[:-1])
    for i, prim in enumerate(prims):
        t, n, a, b = _HIT[prim.kind](origin, d, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, i, best_id)
        normal = np.where(closer[..., None], n, normal)
        ua = np.where(closer, a, ua)
        va = np.where(closer, b, va)

    depth = np.where(np.isfinite(best_t) & ok, best_t, np.nan)
    albedo = np.zeros(d.shape)
    freq = np.zeros(d.shape[:-1])
    for i, prim in enumerate(prims):
        sel = best_id == i
        albedo[sel] = prim.albedo
        freq[sel] = prim.texture_freq
    refl = albedo * _texture(ua, va, freq)[..., None]
    shade = 0.25 + 0.75 * np.abs(normal @ LIGHT_DIR)
    rgb = np.clip(refl * shade[..., None], 0.0, 1.0)
    rgb[~np.isfinite(depth)] = 0.0
    depth = depth.astype(np.float32)
    rgb = rgb.astype(np.float32)
    if return_albedo:
        return rgb, depth, luminance(refl).astype(np.float32)
    return rgb, depth


@dataclass
class PairRender:
    rgb: np.ndarray          # (H, W, 3) RGB view
    depth: np.ndarray        # ground truth depth in the RGB view
    itof_depth: np.ndarray   # ideal depth in the iToF view
    itof_albedo: np.ndarray  # reflectance luminance in the iToF view
    rgb_albedo: np.ndarray


def render_pair(spec: SceneSpec, rig: CameraRig) -> PairRender:
    """Render one scene independently from the RGB and iToF viewpoints."""
    rgb, depth, alb = render_scene(spec, rig.rgb, RigidTransform(), return_albedo=True)
    _, itof_depth, itof_alb = render_scene(spec, rig.itof, rig.extrinsic.inverse(), return_albedo=True)
    return PairRender(rgb, depth, itof_depth, itof_alb, alb)


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


# --------------------------------------------------------------------------
# iToF simulation


def ambiguity_distance(f_m: float) -> float:
    return SPEED_OF_LIGHT / (2.0 * f_m)


def depth_to_phase(d, f_m: float):
    """Round-trip phase ``4 pi f_m d / c`` wrapped into [0, 2 pi)."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)) or not f_m > 0:
        raise DomainError("depth_to_phase needs d > 0 and f_m > 0")
    amb = ambiguity_distance(f_m)
    phi = 2.0 * np.pi * (np.mod(d, amb) / amb)
    phi = np.where(phi >= 2.0 * np.pi, 0.0, phi)
    return phi if phi.ndim else float(phi)


def phase_to_depth(phi, f_m: float):
    return np.asarray(phi, dtype=np.float64) * SPEED_OF_LIGHT / (4.0 * np.pi * f_m)


def discontinuity_mask(depth: np.ndarray, percentile: float = 95.0, min_jump: float = 0.1) -> np.ndarray:
    """Pixels whose depth gradient magnitude is above ``percentile`` and ``min_jump`` m/px.

    ``min_jump`` keeps smooth slanted surfaces from being flagged when the
    percentile itself is small.
    """
    valid = valid_mask(depth)
    d = np.where(valid, depth, 0.0).astype(np.float64)
    if d.shape[0] < 2 or d.shape[1] < 2 or not valid.any():
        return np.zeros(d.shape, dtype=bool)
    gy, gx = np.gradient(d)
    g = np.hypot(gx, gy)
    thr = np.percentile(g[valid], percentile)
    return valid & (g > thr) & (g > min_jump)


def simulate_itof(gt: np.ndarray, spec: ItofNoiseSpec, albedo: np.ndarray | None = None) -> np.ndarray:
    """Corrupt an ideal iToF-view depth map with wrapping, phase noise, flying pixels and dropout.

    Phase wrapping is evaluated in the distance domain (``d mod c/(2 f_m)``),
    which is the same map as wrapping the phase but exact in floating point.
    Pixels whose noisy depth is not strictly positive become invalid.
    """
    gt = np.asarray(gt)
    valid = valid_mask(gt)
    d = np.where(valid, gt, np.nan).astype(np.float64)
    h, w = d.shape
    rng = np.random.Generator(np.random.Philox(key=int(spec.seed)))
    # fixed draw order keeps every stream independent of the probabilities
    u_fly = rng.random((h, w))
    w_fly = rng.random((h, w))
    noise = rng.standard_normal((h, w))
    u_drop = rng.random((h, w))

    if spec.flying_pixel_prob > 0:
        edges = discontinuity_mask(gt)
        gy, gx = np.gradient(np.where(valid, d, 0.0))
        horiz = np.abs(gx) >= np.abs(gy)
        rows, cols = np.nonzero(edges & (u_fly < spec.flying_pixel_prob))
        ra = np.where(horiz[rows, cols], rows, np.maximum(rows - 1, 0))
        ca = np.where(horiz[rows, cols], np.maximum(cols - 1, 0), cols)
        rb = np.where(horiz[rows, cols], rows, np.minimum(rows + 1, h - 1))
        cb = np.where(horiz[rows, cols], np.minimum(cols + 1, w - 1), cols)
        da, db = d[ra, ca], d[rb, cb]
        wt = w_fly[rows, cols]
        mixed = wt * da + (1.0 - wt) * db
        ok = np.isfinite(mixed)
        d[rows[ok], cols[ok]] = mixed[ok]

    amb = ambiguity_distance(spec.f_m)
    out = np.mod(d, amb)
    if spec.sigma_phi > 0:
        out = out + phase_to_depth(spec.sigma_phi * noise, spec.f_m)
    out = np.maximum(out, 0.0)
    out[~(out > 0)] = np.nan
    if albedo is not None and spec.dropout_prob > 0:
        drop = (np.asarray(albedo) < DROPOUT_LUMINANCE) & (u_drop < spec.dropout_prob)
        out[drop] = np.nan
    return out.astype(gt.dtype if gt.dtype.kind == "f" else np.float32)


# --------------------------------------------------------------------------
# monocular prior


def _smooth_field(shape, rng, n_waves=3):
    h, w = shape
    v, u = np.mgrid[0:h, 0:w]
    u = u / max(w, 1)
    v = v / max(h, 1)
    f = np.zeros(shape)
    for _ in range(n_waves):
        fx, fy = rng.uniform(-1.5, 1.5, 2)
        f += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fx * u + fy * v) + rng.uniform(0, 2 * np.pi))
    m = np.max(np.abs(f))
    return f / m if m > 0 else f


def synth_mde_prior(gt: np.ndarray, seed: int, *, a=None, gamma=None, b=None, field_amplitude=None) -> np.ndarray:
    """Relative depth ``a * gt**gamma + b + s(x, y)`` standing in for an MDE network.

    Unspecified parameters are drawn from the seed: ``a`` in [0.3, 3],
    ``gamma`` in [0.8, 1.25], and a smooth field ``s`` whose peak is at most
    5% of the range of ``a * gt**gamma``.
    """
    gt = np.asarray(gt)
    valid = valid_mask(gt)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4D4445]))
    a_ = rng.uniform(0.3, 3.0) if a is None else float(a)
    g_ = rng.uniform(0.8, 1.25) if gamma is None else float(gamma)
    amp = rng.uniform(0.0, 0.05) if field_amplitude is None else float(field_amplitude)
    b_draw = rng.uniform(0.0, 1.0)
    field = _smooth_field(gt.shape, rng)

    base = np.where(valid, gt, np.nan).astype(np.float64)
    base = a_ * base ** g_
    if valid.any():
        rng_span = float(np.nanmax(base) - np.nanmin(base))
        mean = float(np.nanmean(base))
    else:
        rng_span, mean = 0.0, 1.0
    s = amp * rng_span * field
    if b is None:
        b_ = float(np.max(np.abs(s))) + b_draw * mean
    else:
        b_ = float(b)
    rel = base + b_
    if amp > 0:
        rel = rel + s
    return rel.astype(gt.dtype if gt.dtype.kind == "f" else np.float32)


def _lsq_affine(x, y):
    n = x.size
    if n < 2:
        raise SingularFitError(f"need at least 2 pixels to fit scale and shift, got {n}")
    mx, my = x.mean(), y.mean()
    dx = x - mx
    var = float(dx @ dx)
    if not var > 1e-12 * max(n * mx * mx, 1e-300) or var == 0.0:
        raise SingularFitError("relative depth has (near) zero variance on the fit mask")
    s = float(dx @ (y - my)) / var
    t = float(my - s * mx)
    return s, t


def align_relative_depth(rel: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None, trim: float = 0.2) -> AlignResult:
    """Least-squares scale/shift mapping ``rel`` onto the metric ``ref``.

    A second fit drops the ``trim`` fraction of pixels with the largest
    absolute residuals. The result is applied to every valid ``rel`` pixel,
    inside or outside ``mask``.
    """
    rel = np.asarray(rel)
    ref = np.asarray(ref)
    if rel.shape != ref.shape:
        raise ShapeError(f"rel {rel.shape} and ref {ref.shape} differ")
    use = valid_mask(rel) & valid_mask(ref)
    if mask is not None:
        use &= np.asarray(mask, dtype=bool)
    x = rel[use].astype(np.float64)
    y = ref[use].astype(np.float64)
    s, t = _lsq_affine(x, y)
    keep = x.size
    if trim > 0 and x.size >= 4:
        res = np.abs(s * x + t - y)
        keep = max(2, int(np.ceil(x.size * (1.0 - trim))))
        idx = np.argsort(res, kind="stable")[:keep]
        try:
            s, t = _lsq_affine(x[idx], y[idx])
        except SingularFitError:
            log.warning("trimmed refit is degenerate; keeping the full fit")
            keep = x.size
    out_dtype = np.result_type(rel.dtype, ref.dtype, np.float32)
    aligned = np.where(valid_mask(rel), s * rel.astype(np.float64) + t, np.nan).astype(out_dtype)
    return AlignResult(s=s, t=t, aligned=aligned, inlier_count=int(keep))
