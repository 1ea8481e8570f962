"""Hot inner loops, each with a numba path and a pure-numpy path.

The public names at the bottom of the module are bound to one backend at
import time (see :mod:`itofuse._accel`). The ``*_numpy`` / ``*_numba``
variants stay importable so tests and the benchmark can compare them
directly; they must agree bit for bit.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# z-buffer splat


def splat_min_depth_numpy(target, z, n_target):
    """Keep, per target cell, the smallest ``z`` (ties: smallest source index).

    ``target`` holds a flat target index per source point, or -1 to drop it.
    Returns ``(depth, winner)`` where empty cells hold NaN / -1.
    """
    target = np.asarray(target, dtype=np.int64)
    z = np.asarray(z, dtype=np.float64)
    depth = np.full(n_target, np.nan)
    winner = np.full(n_target, -1, dtype=np.int64)
    src = np.nonzero(target >= 0)[0]
    if src.size == 0:
        return depth, winner
    tgt = target[src]
    zs = z[src]
    order = np.lexsort((src, zs, tgt))
    tgt_sorted = tgt[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    keep = order[first]
    depth[tgt[keep]] = zs[keep]
    winner[tgt[keep]] = src[keep]
    return depth, winner


@njit
def _splat_min_depth_nb(target, z, n_target):
    depth = np.full(n_target, np.inf)
    winner = np.full(n_target, -1, dtype=np.int64)
    for i in range(target.shape[0]):
        t = target[i]
        if t < 0:
            continue
        # strict < keeps the earlier source on exact ties
        if z[i] < depth[t]:
            depth[t] = z[i]
            winner[t] = i
    for t in range(n_target):
        if winner[t] < 0:
            depth[t] = np.nan
    return depth, winner


def splat_min_depth_numba(target, z, n_target):
    return _splat_min_depth_nb(
        np.ascontiguousarray(target, dtype=np.int64),
        np.ascontiguousarray(z, dtype=np.float64),
        int(n_target),
    )


# --------------------------------------------------------------------------
# 3x3 im2col / col2im on a zero-padded (B, C, H+2, W+2) array


def im2col3x3_numpy(xp, stride, ho, wo):
    """Gather 3x3 patches into a ``(C, 9, B, ho, wo)`` array."""
    b, c = xp.shape[:2]
    cols = np.empty((c, 9, b, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky * 3 + kx] = xt[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    return cols


@njit
def _im2col3x3_nb(xp, stride, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c, 9, b, ho, wo), dtype=xp.dtype)
    for ci in range(c):
        for k in range(9):
            ky = k // 3
            kx = k % 3
            for bi in range(b):
                for i in range(ho):
                    src = xp[bi, ci, ky + stride * i]
                    dst = cols[ci, k, bi, i]
                    # separate unit-stride loop so it vectorizes
                    if stride == 1:
                        for j in range(wo):
                            dst[j] = src[kx + j]
                    else:
                        for j in range(wo):
                            dst[j] = src[kx + stride * j]
    return cols


def im2col3x3_numba(xp, stride, ho, wo):
    if stride == 1:
        # contiguous slice copies already run at memcpy speed
        return im2col3x3_numpy(xp, stride, ho, wo)
    return _im2col3x3_nb(np.ascontiguousarray(xp), int(stride), int(ho), int(wo))


def col2im3x3_numpy(cols, shape, stride):
    """Scatter-add ``(C, 9, B, ho, wo)`` patches back onto a padded array.

    Taps are accumulated in raster order k = 0..8, matching the numba path.
    """
    b, c, hp, wp = shape
    ho, wo = cols.shape[3], cols.shape[4]
    out = np.zeros((c, b, hp, wp), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            out[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += cols[:, ky * 3 + kx]
    return out.transpose(1, 0, 2, 3)


@njit
def _col2im3x3_nb(cols, b, c, hp, wp, stride):
    ho, wo = cols.shape[3], cols.shape[4]
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for k in range(9):
        ky = k // 3
        kx = k % 3
        for ci in range(c):
            for bi in range(b):
                for i in range(ho):
                    src = cols[ci, k, bi, i]
                    dst = out[bi, ci, ky + stride * i]
                    if stride == 1:
                        for j in range(wo):
                            dst[kx + j] += src[j]
                    else:
                        for j in range(wo):
                            dst[kx + stride * j] += src[j]
    return out


def col2im3x3_numba(cols, shape, stride):
    b, c, hp, wp = shape
    return _col2im3x3_nb(np.ascontiguousarray(cols), b, c, hp, wp, int(stride))


# --------------------------------------------------------------------------
# separable k x k box sum over the last two axes ("valid" window)


def box_sum_numpy(x, k):
    h, w = x.shape[-2:]
    ho, wo = h - k + 1, w - k + 1
    acc = x[..., :, 0:wo].copy()
    for j in range(1, k):
        acc += x[..., :, j:j + wo]
    out = acc[..., 0:ho, :].copy()
    for i in range(1, k):
        out += acc[..., i:i + ho, :]
    return out


@njit
def _box_sum_nb(x, k):
    # accumulate whole rows so the inner loop is unit stride; the
    # per-element summation order matches the numpy path exactly
    n, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    acc = np.empty((n, h, wo), dtype=x.dtype)
    for a in range(n):
        for i in range(h):
            src = x[a, i]
            dst = acc[a, i]
            for j in range(wo):
                dst[j] = src[j]
            for d in range(1, k):
                for j in range(wo):
                    dst[j] += src[j + d]
    out = np.empty((n, ho, wo), dtype=x.dtype)
    for a in range(n):
        for i in range(ho):
            dst = out[a, i]
            first = acc[a, i]
            for j in range(wo):
                dst[j] = first[j]
            for d in range(1, k):
                row = acc[a, i + d]
                for j in range(wo):
                    dst[j] += row[j]
    return out


def box_sum_numba(x, k):
    lead = x.shape[:-2]
    flat = np.ascontiguousarray(x).reshape((-1,) + x.shape[-2:])
    out = _box_sum_nb(flat, int(k))
    return out.reshape(lead + out.shape[-2:])


# --------------------------------------------------------------------------
# left-to-right float64 summation


def ordered_sum_numpy(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    # add.accumulate is strictly sequential, unlike the pairwise np.sum
    return float(np.add.accumulate(v)[-1])


@njit
def _ordered_sum_nb(v):
    s = 0.0
    for i in range(v.shape[0]):
        s += v[i]
    return s


def ordered_sum_numba(v):
    v = np.ascontiguousarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    return float(_ordered_sum_nb(v))


if USE_NUMBA:
    splat_min_depth = splat_min_depth_numba
    im2col3x3 = im2col3x3_numba
    col2im3x3 = col2im3x3_numba
    box_sum = box_sum_numba
    ordered_sum = ordered_sum_numba
else:
    splat_min_depth = splat_min_depth_numpy
    im2col3x3 = im2col3x3_numpy
    col2im3x3 = col2im3x3_numpy
    box_sum = box_sum_numpy
    ordered_sum = ordered_sum_numpy
