"""A small reverse-mode autodiff engine over numpy arrays.

Only what the fusion network and its losses need: 3x3 convolutions,
elementwise math with numpy broadcasting, nearest 2x upsampling, channel
concatenation, slicing, box filtering and a few reductions. Every op keeps
its input dtype, so the same graph runs in float32 for training and in
float64 for gradient checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def backward(self):
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _operands(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return _node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    # subgradient at exactly 0 is 0
    return _node(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: ``0.5 x^2`` for ``|x| < 1``, ``|x| - 0.5`` otherwise."""
    ad = a.data
    small = np.abs(ad) < beta
    out = np.where(small, 0.5 * ad * ad / beta, np.abs(ad) - 0.5 * beta).astype(ad.dtype)
    return _node(out, (a,), lambda g: (g * np.where(small, ad / beta, np.sign(ad)).astype(ad.dtype),), "smooth_l1")


# --------------------------------------------------------------------------
# reductions and reshaping


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _node(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g) if _has_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw, "getitem")


def _has_fancy(idx) -> bool:
    idx = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat_channels(*ts: Tensor) -> Tensor:
    """Concatenate along axis 1."""
    if len({t.shape[:1] + t.shape[2:] for t in ts}) != 1:
        raise ShapeError(f"concat_channels needs matching batch/spatial dims, got {[t.shape for t in ts]}")
    splits = np.cumsum([t.shape[1] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=1)
    return _node(out, ts, lambda g: tuple(np.split(g, splits, axis=1)), "concat")


def masked_extreme(a: Tensor, mask: np.ndarray, kind: str = "max") -> Tensor:
    """Per-(batch, channel) max or min over masked spatial positions.

    Returns shape ``(B, C, 1, 1)``; the gradient flows to the first extremal
    position in raster order.
    """
    b, c = a.shape[:2]
    flat = a.data.reshape(b, c, -1)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape).reshape(b, c, -1)
    fill = -np.inf if kind == "max" else np.inf
    vals = np.where(m, flat, fill)
    pos = np.argmax(vals, axis=-1) if kind == "max" else np.argmin(vals, axis=-1)
    out = np.take_along_axis(flat, pos[..., None], -1).reshape(b, c, 1, 1)

    def bw(g):
        full = np.zeros_like(flat)
        np.put_along_axis(full, pos[..., None], g.reshape(b, c, 1), -1)
        return (full.reshape(a.shape),)

    return _node(out, (a,), bw, f"masked_{kind}")


# --------------------------------------------------------------------------
# spatial ops


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1 and stride 1 or 2."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d supports 3x3 kernels only, got {w.shape[2:]}")
    if pad != 1 or stride not in (1, 2):
        raise ShapeError(f"conv2d supports pad=1 and stride in (1, 2), got pad={pad}, stride={stride}")
    bs, c, h, wd = x.shape
    o = w.shape[0]
    if w.shape[1] != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {w.shape[1]}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {b.shape}")
    ho = (h + 2 * pad - 3) // stride + 1
    wo = (wd + 2 * pad - 3) // stride + 1
    dtype = np.result_type(x.dtype, w.dtype)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = kernels.im2col3x3(xp, stride, ho, wo).reshape(c * 9, -1)
    wm = w.data.astype(dtype, copy=False).reshape(o, c * 9)
    out = wm @ cols
    if b is not None:
        out += b.data.astype(dtype, copy=False)[:, None]
    out = out.reshape(o, bs, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(w.shape).astype(w.dtype, copy=False)
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(c, 9, bs, ho, wo)
            gx = kernels.col2im3x3(gcols, xp.shape, stride)[:, :, 1:h + 1, 1:wd + 1]
            gx = np.ascontiguousarray(gx).astype(x.dtype, copy=False)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=1).astype(b.dtype, copy=False)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _node(out, parents, bw, "conv2d")


def upsample_nearest_2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _node(out, (x,), bw, "upsample2x")


def box_filter(x: Tensor, k: int) -> Tensor:
    """Mean over every ``k x k`` window fully inside the image ("valid" mode)."""
    if k % 2 != 1 or k > min(x.shape[-2:]):
        raise ShapeError(f"box_filter window must be odd and fit the image, got k={k} for {x.shape}")
    scale = 1.0 / (k * k)
    out = kernels.box_sum(x.data, k) * x.dtype.type(scale)

    def bw(g):
        pad = [(0, 0)] * (g.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
        # adjoint of a valid box sum is a full box sum (the window is symmetric)
        return (kernels.box_sum(np.pad(g, pad), k) * g.dtype.type(scale),)

    return _node(out, (x,), bw, "box_filter")


# --------------------------------------------------------------------------
# backward pass and gradient checking


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = gp if key not in pending else pending[key] + gp
        node.grad = g


def grad_check(f: Callable[..., Tensor], inputs, eps: float = 1e-4, max_entries: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``inputs`` is a tensor or a sequence of tensors; float64 replicas are
    built and passed to ``f`` positionally. ``f`` must return a scalar
    tensor. With ``max_entries`` a seeded random subset of at most that many
    entries per input is perturbed instead of every entry.
    """
    single = isinstance(inputs, Tensor)
    seq: Sequence[Tensor] = [inputs] if single else list(inputs)
    reps = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in seq]
    loss = f(*reps)
    backward(loss)
    analytic = [r.grad if r.grad is not None else np.zeros_like(r.data) for r in reps]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for r, ga in zip(reps, analytic):
        flat = r.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*[Tensor(q.data) for q in reps]).data)
            flat[i] = orig - eps
            fm = float(f(*[Tensor(q.data) for q in reps]).data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            err = np.abs(a - num) / max(np.abs(a), np.abs(num), 1e-8)
            worst = max(worst, err)
    return float(worst)
