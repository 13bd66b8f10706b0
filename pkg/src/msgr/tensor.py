"""Dense tensors with reverse-mode differentiation.

Every learnable block in the package is assembled from the primitives in
this module. Arrays are plain numpy; a :class:`Tensor` only adds the
bookkeeping needed to run the chain rule backwards from a scalar loss.

Images and feature maps are laid out channels-first, ``(C, H, W)``, and
there is no batch axis: batches are handled by looping over samples and
letting gradients accumulate.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An ndarray plus an optional gradient accumulator.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialised
    ``grad`` of the same shape; :func:`backward` adds into it. Intermediate
    results never keep a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register a custom differentiable op.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    return _result(data, tuple(parents), backward)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Gradients add onto whatever is already stored, so two calls without a
    reset leave exactly twice the single-call gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g / (2.0 * out),))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tabs(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _result(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def inv(a: Tensor) -> Tensor:
    """Inverse of a square matrix."""
    out = np.linalg.inv(a.data)
    return _result(out, (a,), lambda g: (-(out.T @ g @ out.T),))


# ---------------------------------------------------------------------------
# activations


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw)


def activate(a: Tensor, fn: str, axis: int = -1) -> Tensor:
    if fn == "sigmoid":
        return sigmoid(a)
    if fn == "relu":
        return relu(a)
    if fn == "softmax":
        return softmax(a, axis)
    raise ValueError(f"unknown activation {fn!r}")


# ---------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``w @ flatten(x) + b``."""
    xf = x.data.reshape(-1)
    if w.ndim != 2 or w.shape[1] != xf.size:
        raise ShapeError(f"linear: weight {w.shape} does not match input size {xf.size}")
    out = w.data @ xf
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match {w.shape[0]} outputs")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        grads = [(w.data.T @ g).reshape(x.shape), np.outer(g, xf)]
        if b is not None:
            grads.append(g)
        return grads

    return _result(out, parents, bw)


def _pair_int(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, (int, np.integer)) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation of ``x`` (C,H,W) with ``w`` (O,C,kh,kw), zero padded."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x (C,H,W) and w (O,C,kh,kw), got {x.shape}, {w.shape}")
    C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if stride < 1 or dilation < 1 or kh < 1 or kw < 1:
        raise ShapeError("conv2d: stride, dilation and kernel size must be >= 1")
    ph, pw = _pair_int(padding)
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    Ho = (H + 2 * ph - eh) // stride + 1
    Wo = (W + 2 * pw - ew) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape} and kernel {w.shape}")

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (eh, ew), axis=(1, 2))
    win = win[:, ::stride, ::stride, ::dilation, ::dilation][:, :Ho, :Wo]
    out = np.tensordot(w.data, win, axes=([1, 2, 3], [0, 3, 4]))
    if b is not None:
        out += b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gw = np.tensordot(g, win, axes=([1, 2], [1, 2])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(w.data, g, axes=([0], [0]))  # C,kh,kw,Ho,Wo
            gxp = np.zeros_like(xp)
            hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    r, c = i * dilation, j * dilation
                    gxp[:, r:r + hs:stride, c:c + ws:stride] += cols[:, i, j]
            gx = gxp[:, ph:ph + H, pw:pw + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return _result(out, parents, bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """1-D cross-correlation of ``x`` (C,L) with ``w`` (O,C,k)."""
    x4 = reshape(x, (x.shape[0], 1, x.shape[1]))
    w4 = reshape(w, (w.shape[0], w.shape[1], 1, w.shape[2]))
    out = conv2d(x4, w4, b, padding=(0, padding))
    return reshape(out, (out.shape[0], out.shape[2]))


# ---------------------------------------------------------------------------
# resampling: every mode is a separable linear map  out[c] = A x[c] B^T


def _separable(x: Tensor, A: np.ndarray, B: np.ndarray) -> Tensor:
    A = A.astype(x.dtype, copy=False)
    B = B.astype(x.dtype, copy=False)
    out = A @ x.data @ B.T
    return _result(out, (x,), lambda g: (A.T @ g @ B,))


def pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Adaptive average pooling along one axis (proportional windows)."""
    if n_out < 1 or n_in < 1:
        raise ShapeError("pooling extents must be >= 1")
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def window_pool_matrix(n_in: int, k: int) -> np.ndarray:
    """Non-overlapping windows of size ``k``; a trailing short window averages what it has."""
    if k < 1:
        raise ShapeError("pool window must be >= 1")
    n_out = -(-n_in // k)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * k, min((i + 1) * k, n_in)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation along one axis, half-pixel (align_corners=False) convention."""
    if n_out < 1 or n_in < 1:
        raise ShapeError("interpolation extents must be >= 1")
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def avg_pool(x: Tensor, k: int) -> Tensor:
    return _separable(x, window_pool_matrix(x.shape[1], k), window_pool_matrix(x.shape[2], k))


def adaptive_avg_pool(x: Tensor, h: int, w: int) -> Tensor:
    return _separable(x, pool_matrix(x.shape[1], h), pool_matrix(x.shape[2], w))


def upsample_bilinear(x: Tensor, h: int, w: int) -> Tensor:
    return _separable(x, bilinear_matrix(x.shape[1], h), bilinear_matrix(x.shape[2], w))


def global_avg_pool(x: Tensor) -> Tensor:
    return adaptive_avg_pool(x, 1, 1)


def resample(x: Tensor, mode: str, size=None) -> Tensor:
    """Dispatch over the resampling modes.

    ``mode`` is one of ``avg-pool`` (``size`` = window k), ``adaptive-avg-pool``
    and ``bilinear-upsample`` (``size`` = (h, w)), or ``global-avg-pool``.
    """
    if mode == "avg-pool":
        return avg_pool(x, int(size))
    if mode == "adaptive-avg-pool":
        return adaptive_avg_pool(x, *size)
    if mode == "bilinear-upsample":
        return upsample_bilinear(x, *size)
    if mode == "global-avg-pool":
        return global_avg_pool(x)
    raise ValueError(f"unknown resample mode {mode!r}")


# ---------------------------------------------------------------------------
# bilinear sampling at continuous coordinates


def _neighbours(c: np.ndarray, n: int, valid: np.ndarray):
    if n == 1:
        i0 = np.zeros(c.shape, dtype=np.int64)
        return i0, i0, np.zeros_like(c)
    i0 = np.clip(np.floor(np.where(valid, c, 0.0)), 0, n - 2).astype(np.int64)
    frac = np.where(valid, c - i0, 0.0)
    return i0, i0 + 1, frac


def grid_sample(x: Tensor, coords: Tensor) -> tuple[Tensor, Tensor]:
    """Sample ``x`` (C,H,W) bilinearly at ``coords`` (2,H',W') holding (u=col, v=row).

    A site is valid iff its four bilinear neighbours lie inside the image, i.e.
    ``0 <= u <= W-1`` and ``0 <= v <= H-1``; invalid sites read 0. Returns the
    samples and a constant (1,H',W') validity mask. Differentiable in both
    ``x`` and ``coords`` on valid sites.
    """
    coords = as_tensor(coords)
    C, H, W = x.shape
    u, v = coords.data[0], coords.data[1]
    out_hw = u.shape
    valid = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    u0, u1, a = _neighbours(u, W, valid)
    v0, v1, b = _neighbours(v, H, valid)
    vf = valid.astype(x.dtype)
    wts = [(1 - a) * (1 - b) * vf, a * (1 - b) * vf, (1 - a) * b * vf, a * b * vf]
    idx = [v0 * W + u0, v0 * W + u1, v1 * W + u0, v1 * W + u1]

    P = u.size
    rows = np.tile(np.arange(P), 4)
    cols = np.concatenate([i.reshape(-1) for i in idx])
    vals = np.concatenate([wt.reshape(-1) for wt in wts]).astype(x.dtype, copy=False)
    S = sp.csr_matrix((vals, (rows, cols)), shape=(P, H * W))
    xf = x.data.reshape(C, H * W)
    out = (S @ xf.T).T.reshape((C,) + out_hw)

    def bw(g):
        gf = g.reshape(C, P)
        gx = (S.T @ gf.T).T.reshape(x.shape) if x.requires_grad else None
        gc = None
        if coords.requires_grad:
            x00, x01 = xf[:, idx[0].reshape(-1)], xf[:, idx[1].reshape(-1)]
            x10, x11 = xf[:, idx[2].reshape(-1)], xf[:, idx[3].reshape(-1)]
            af, bf, vff = a.reshape(-1), b.reshape(-1), vf.reshape(-1)
            du = ((1 - bf) * (x01 - x00) + bf * (x11 - x10)) * vff
            dv = ((1 - af) * (x10 - x00) + af * (x11 - x01)) * vff
            gc = np.stack([(gf * du).sum(0), (gf * dv).sum(0)]).reshape(coords.shape)
        return gx, gc

    return _result(out, (x, coords), bw), Tensor(vf[None])
