"""On-disk formats: DMAP depth rasters, binary PPM images, calibration JSON, checkpoints.

DMAP layout (little endian)::

    b"DMAP" | u32 width | u32 height | width*height f32, row-major, top-left origin

Invalid pixels are written as the quiet-NaN pattern 0x7FC00000.

Checkpoint layout (little endian)::

    b"CKPT" | u32 version | u32 entry count |
    per entry: u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionOverflowError, FormatError, MagicMismatchError, TruncatedFileError, ValidationError
from .geometry import Camera, CameraRig, Distortion, Intrinsics, RigidTransform

DMAP_MAGIC = b"DMAP"
CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1
NAN_BITS = np.uint32(0x7FC00000)
MAX_PIXELS = 1 << 28
MAX_RANK = 8


# --------------------------------------------------------------------------
# DMAP


def encode_dmap(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValidationError(f"DMAP stores 2-d maps, got shape {depth.shape}")
    h, w = depth.shape
    bits = np.ascontiguousarray(depth, dtype="<f4").view("<u4").copy()
    bits[~np.isfinite(depth)] = NAN_BITS
    return DMAP_MAGIC + struct.pack("<II", w, h) + bits.tobytes()


def decode_dmap(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 4 or buf[:4] != DMAP_MAGIC:
        raise MagicMismatchError(f"{source}: not a DMAP file (bad magic {bytes(buf[:4])!r})")
    if len(buf) < 12:
        raise TruncatedFileError(f"{source}: DMAP header truncated ({len(buf)} bytes)")
    w, h = struct.unpack_from("<II", buf, 4)
    if w == 0 or h == 0 or w * h > MAX_PIXELS:
        raise DimensionOverflowError(f"{source}: DMAP dimensions {w}x{h} out of range")
    need = 12 + 4 * w * h
    if len(buf) < need:
        raise TruncatedFileError(f"{source}: DMAP payload truncated ({len(buf)} of {need} bytes)")
    if len(buf) > need:
        raise FormatError(f"{source}: {len(buf) - need} trailing bytes after DMAP payload")
    return np.frombuffer(buf, dtype="<f4", count=w * h, offset=12).reshape(h, w).astype(np.float32)


def write_dmap(path, depth: np.ndarray) -> None:
    Path(path).write_bytes(encode_dmap(depth))


def read_dmap(path) -> np.ndarray:
    return decode_dmap(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------
# PPM (P6, 8-bit)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a float ``(H, W, 3)`` image in [0, 1] (or uint8) as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"PPM needs an (H, W, 3) image, got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def _ppm_tokens(buf: bytes, source: str):
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{source}: PPM header truncated")
        tokens.append(buf[start:pos])
    if pos >= len(buf):
        raise TruncatedFileError(f"{source}: PPM header truncated")
    try:
        vals = [int(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(f"{source}: malformed PPM header {tokens!r}") from exc
    return vals, pos + 1  # exactly one whitespace byte precedes the raster


def read_ppm(path) -> np.ndarray:
    """Read a P6 PPM as float32 ``(H, W, 3)`` in [0, 1]."""
    buf = Path(path).read_bytes()
    src = str(path)
    if buf[:2] != b"P6":
        raise MagicMismatchError(f"{src}: not a binary PPM (bad magic {buf[:2]!r})")
    (w, h, maxval), off = _ppm_tokens(buf, src)
    if maxval != 255:
        raise FormatError(f"{src}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
    if w <= 0 or h <= 0 or w * h > MAX_PIXELS:
        raise DimensionOverflowError(f"{src}: PPM dimensions {w}x{h} out of range")
    need = off + 3 * w * h
    if len(buf) < need:
        raise TruncatedFileError(f"{src}: PPM raster truncated ({len(buf)} of {need} bytes)")
    raw = np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=off).reshape(h, w, 3)
    return (raw.astype(np.float32) / np.float32(255.0)).astype(np.float32)


# --------------------------------------------------------------------------
# calibration JSON


def camera_to_dict(cam: Camera) -> dict:
    k = cam.intrinsics
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": int(k.width), "height": int(k.height),
            "dist": cam.distortion.as_list()}


def camera_from_dict(d: dict, name: str) -> Camera:
    try:
        k = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))
        dist = d.get("dist", [0.0] * 5)
        if len(dist) != 5:
            raise ValidationError(f"{name}.dist must hold [k1, k2, p1, p2, k3], got {len(dist)} values")
        return Camera(k, Distortion(*[float(v) for v in dist]))
    except KeyError as exc:
        raise ValidationError(f"calibration camera {name!r} is missing key {exc.args[0]!r}") from None
    except ValidationError as exc:
        raise ValidationError(f"calibration camera {name!r}: {exc}") from None


def rig_to_dict(rig: CameraRig) -> dict:
    return {
        "itof": camera_to_dict(rig.itof),
        "rgb": camera_to_dict(rig.rgb),
        "R": rig.extrinsic.r.reshape(-1).tolist(),
        "t": rig.extrinsic.t.tolist(),
    }


def rig_from_dict(d: dict) -> CameraRig:
    for key in ("itof", "rgb", "R", "t"):
        if key not in d:
            raise ValidationError(f"calibration is missing key {key!r}")
    r = np.asarray(d["R"], dtype=np.float64)
    t = np.asarray(d["t"], dtype=np.float64)
    if r.size != 9:
        raise ValidationError(f"calibration matrix R must have 9 numbers, got {r.size}")
    if t.size != 3:
        raise ValidationError(f"calibration vector t must have 3 numbers, got {t.size}")
    try:
        ext = RigidTransform(r.reshape(3, 3), t)
    except ValidationError as exc:
        raise ValidationError(f"calibration matrix R invalid: {exc}") from None
    return CameraRig(camera_from_dict(d["itof"], "itof"), camera_from_dict(d["rgb"], "rgb"), ext)


def write_calibration(path, rig: CameraRig) -> None:
    Path(path).write_text(json.dumps(rig_to_dict(rig), indent=2) + "\n")


def read_calibration(path) -> CameraRig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    return rig_from_dict(raw)


# --------------------------------------------------------------------------
# checkpoint container


def encode_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != CKPT_MAGIC:
        raise MagicMismatchError(f"{source}: not a checkpoint (bad magic {bytes(buf[:4])!r})")

    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"{source}: checkpoint truncated while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"entry {i} name length"))
        if nlen > 4096:
            raise DimensionOverflowError(f"{source}: entry {i} name length {nlen} out of range")
        name = take(nlen, f"entry {i} name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"entry {name!r} rank"))
        if rank > MAX_RANK:
            raise DimensionOverflowError(f"{source}: entry {name!r} rank {rank} exceeds {MAX_RANK}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"entry {name!r} dims"))
        size = 1
        for dim in dims:
            size *= dim
        if size > MAX_PIXELS:
            raise DimensionOverflowError(f"{source}: entry {name!r} has {size} elements")
        data = np.frombuffer(take(4 * size, f"entry {name!r} data"), dtype="<f4").reshape(dims)
        out[name] = data.astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - pos} trailing bytes after checkpoint")
    return out


def write_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
