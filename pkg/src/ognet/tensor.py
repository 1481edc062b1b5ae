"""Dense NCHW tensors with reverse-mode automatic differentiation.

The op set is exactly what the saliency network, its attention modules and
its losses need: convolution, affine maps, batch normalization, activations,
pooling, bilinear resampling, channel concatenation/statistics, broadcast
scaling and full reductions.  Arrays are numpy, gradients are hand-written
vector-Jacobian products, and `grad_check` verifies every analytic gradient
against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = [True]
_debug_checks = [False]
_kink_margins: list[list] = [None]  # active margin sink while grad-checking


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared while debug checks were enabled."""


def set_debug_checks(enabled: bool) -> None:
    """Enable NaN/Inf detection on every op output (slow; for tests)."""
    _debug_checks[0] = bool(enabled)


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._prev = _grad_enabled[0]
        _grad_enabled[0] = False
        return self

    def __exit__(self, *exc):
        _grad_enabled[0] = self._prev
        return False


def _check_finite(arr, where):
    if _debug_checks[0] and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")


def _note_margin(value: float) -> None:
    sink = _kink_margins[0]
    if sink is not None:
        sink.append(float(value))


class Tensor:
    """N-dimensional array that may participate in a gradient tape.

    `requires_grad` on a freshly constructed tensor marks a leaf whose
    gradient accumulates in `.grad` when `backward` runs.  Tensors produced
    by ops carry the recorded backward closure; their gradients flow but are
    not retained.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None
        _check_finite(self.data, "Tensor()")

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    # -- gradient bookkeeping ----------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def is_leaf(self) -> bool:
        return self._vjp is None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_const(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    # -- debug dump ----------------------------------------------------------

    def dumps(self) -> str:
        """Text dump: one shape line, then row-major values at 17 significant digits."""
        lines = [" ".join(str(d) for d in self.shape)]
        lines.extend(f"{v:.17g}" for v in self.data.reshape(-1))
        return "\n".join(lines) + "\n"

    def dump(self, fp) -> None:
        fp.write(self.dumps())


def _as_const(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data, parents: Sequence[Tensor], vjp: Callable | None, where: str) -> Tensor:
    _check_finite(data, where)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._vjp = None
    out.requires_grad = False
    if vjp is not None and _grad_enabled[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(root: Tensor) -> None:
    """Populate `.grad` on every requires-grad leaf reachable from `root`.

    `root` must be scalar.  Repeated calls without `zero_grad` accumulate.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward on a detached graph: root does not require grad")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flow:
                flow[key] += pg
            else:
                flow[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic (same-shape or python scalar; no implicit broadcasting)
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # inverse of scalar-against-array arithmetic; only the size-1 case occurs
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape)) == 1 else g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _as_const(b, a.dtype)
    _binary_shapes(a, b, "add")
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_reduce_to(g, a.shape) if need_a else None,
                _reduce_to(g, b.shape) if need_b else None)

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_const(b, a.dtype)
    _binary_shapes(a, b, "sub")
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_reduce_to(g, a.shape) if need_a else None,
                _reduce_to(-g, b.shape) if need_b else None)

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_const(b, a.dtype)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_reduce_to(g * bd, a.shape) if need_a else None,
                _reduce_to(g * ad, b.shape) if need_b else None)

    return _result(ad * bd, (a, b), vjp, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _as_const(b, a.dtype)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _reduce_to(g / bd, a.shape) if need_a else None
        gb = _reduce_to(-g * ad / (bd * bd), b.shape) if need_b else None
        return ga, gb

    return _result(ad / bd, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    need = a.requires_grad
    return _result(-a.data, (a,), (lambda g: (-g if need else None,)), "neg")


def tensor_sum(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    need = a.requires_grad

    def vjp(g):
        return (np.full(shape, g.reshape(()), dtype=dt) if need else None,)

    return _result(np.asarray(a.data.sum(), dtype=dt), (a,), vjp, "sum")


def tensor_mean(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.size
    need = a.requires_grad

    def vjp(g):
        return (np.full(shape, g.reshape(()) / n, dtype=dt) if need else None,)

    return _result(np.asarray(a.data.mean(), dtype=dt), (a,), vjp, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    need = a.requires_grad
    return _result(a.data.reshape(shape).copy(), (a,),
                   (lambda g: (g.reshape(old) if need else None,)), "reshape")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    if a.size:
        _note_margin(np.min(np.abs(a.data)))
    mask = a.data > 0
    need = a.requires_grad
    return _result(np.where(mask, a.data, 0), (a,),
                   (lambda g: (g * mask if need else None,)), "relu")


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep outputs strictly inside (0, 1) even at saturation
    fi = np.finfo(x.dtype)
    return np.clip(out, fi.tiny, 1.0 - fi.epsneg)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_array(a.data)
    need = a.requires_grad
    return _result(y, (a,), (lambda g: (g * y * (1.0 - y) if need else None,)), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x > 0, x, 0) + np.log1p(np.exp(-np.abs(x)))
    need = a.requires_grad

    def vjp(g):
        return (g * _sigmoid_array(x) if need else None,)

    return _result(y, (a,), vjp, "softplus")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIKhKw weights.

    Output spatial size is floor((H + 2*padding - Kh) / stride) + 1.
    Internally runs channels-last shift-and-matmul so the hot path hits BLAS.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape}/{weight.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise ShapeError(f"conv2d channel mismatch: input C={c}, weight I={ic}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d bias shape {bias.shape}, expected ({oc},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    def to_cl(arr):  # NCHW -> NHWC contiguous
        return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))

    xl = to_cl(x.data)
    if padding:
        xl = np.pad(xl, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    wl = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # kh,kw,C,O

    out_flat = np.zeros((n * ho * wo, oc), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            slab = xl[:, a:a + stride * ho:stride, b:b + stride * wo:stride, :]
            out_flat += slab.reshape(-1, c) @ wl[a, b]
    if bias is not None:
        out_flat += bias.data
    out = np.ascontiguousarray(
        out_flat.reshape(n, ho, wo, oc).transpose(0, 3, 1, 2))

    need_x = x.requires_grad
    need_w = weight.requires_grad
    need_b = bias is not None and bias.requires_grad

    def vjp(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, oc)
        gb = gl.sum(axis=0) if need_b else None
        gw = None
        if need_w:
            gwl = np.empty_like(wl)
            for a in range(kh):
                for b in range(kw):
                    slab = xl[:, a:a + stride * ho:stride, b:b + stride * wo:stride, :]
                    gwl[a, b] = slab.reshape(-1, c).T @ gl
            gw = np.ascontiguousarray(gwl.transpose(3, 2, 0, 1))
        gx = None
        if need_x:
            gxl = np.zeros_like(xl)
            g4 = gl.reshape(n, ho, wo, oc)
            for a in range(kh):
                for b in range(kw):
                    gxl[:, a:a + stride * ho:stride, b:b + stride * wo:stride, :] += g4 @ wl[a, b].T
            if padding:
                gxl = gxl[:, padding:padding + h, padding:padding + w, :]
            gx = np.ascontiguousarray(gxl.transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, vjp, "conv2d")


# ---------------------------------------------------------------------------
# affine map
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map y = x @ W (+ b); x is a (D,) vector or (N, D) matrix, W is (D, K)."""
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d, got {weight.shape}")
    d, k = weight.shape
    if x.ndim not in (1, 2) or x.shape[-1] != d:
        raise ShapeError(f"linear input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"linear bias shape {bias.shape}, expected ({k},)")

    xd, wd = x.data, weight.data
    y = xd @ wd
    if bias is not None:
        y = y + bias.data
    vector_in = x.ndim == 1
    need_x, need_w = x.requires_grad, weight.requires_grad
    need_b = bias is not None and bias.requires_grad

    def vjp(g):
        gx = g @ wd.T if need_x else None
        if need_w:
            gw = np.outer(xd, g) if vector_in else xd.T @ g
        else:
            gw = None
        if bias is not None:
            gb = (g.copy() if vector_in else g.sum(axis=0)) if need_b else None
            return gx, gw, gb
        return gx, gw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(y), parents, vjp, "linear")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Per-channel running mean/variance for eval-mode batch norm."""

    mean: np.ndarray
    var: np.ndarray

    @staticmethod
    def create(channels: int, dtype=DEFAULT_DTYPE) -> "RunningStats":
        return RunningStats(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over N,H,W in train mode; running stats in eval."""
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d gamma/beta must have shape ({c},)")
    if eps <= 0:
        raise ValueError("batchnorm2d eps must be positive")
    count = n * h * w
    if count == 0:
        raise ShapeError("batchnorm2d on zero-sized channel slab")

    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    need_x, need_g, need_b = x.requires_grad, gamma.requires_grad, beta.requires_grad

    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        state.mean[...] = (1.0 - momentum) * state.mean + momentum * mean
        state.var[...] = (1.0 - momentum) * state.var + momentum * var
    else:
        mean = state.mean.astype(xd.dtype, copy=False)
        var = state.var.astype(xd.dtype, copy=False)

    inv = 1.0 / np.sqrt(var + eps)
    inv4 = inv.reshape(1, c, 1, 1)
    mean4 = mean.reshape(1, c, 1, 1)
    xhat = (xd - mean4) * inv4
    out = gd * xhat + beta.data.reshape(1, c, 1, 1)

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3)) if need_b else None
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if need_g else None
        gx = None
        if need_x:
            if training:
                dxhat = g * gd
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gx = inv4 / count * (count * dxhat - s1 - xhat * s2)
            else:
                gx = g * gd * inv4
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), vjp, "batchnorm2d")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def _pool_window(window) -> tuple[int, int]:
    if isinstance(window, int):
        return window, window
    kh, kw = window
    return int(kh), int(kw)


def max_pool2d(x: Tensor, window) -> Tensor:
    """Non-overlapping max pooling with floor semantics (no padding)."""
    kh, kw = _pool_window(window)
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    ho, wo = h // kh, w // kw
    win = x.data[:, :, :ho * kh, :wo * kw].reshape(n, c, ho, kh, wo, kw)
    win = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 3, 5)).reshape(n, c, ho, wo, kh * kw)
    if kh * kw > 1 and win.size:
        top2 = np.partition(win, kh * kw - 2, axis=-1)[..., -2:]
        _note_margin(np.min(top2[..., 1] - top2[..., 0]))
    idx = np.argmax(win, axis=-1)  # ties resolve to the first row-major index
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    need = x.requires_grad

    def vjp(g):
        if not need:
            return (None,)
        gw = np.zeros((n, c, ho, wo, kh * kw), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, :ho * kh, :wo * kw] = gw.reshape(n, c, ho * kh, wo * kw)
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), vjp, "max_pool2d")


def avg_pool2d(x: Tensor, window) -> Tensor:
    """Non-overlapping average pooling with floor semantics."""
    kh, kw = _pool_window(window)
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    ho, wo = h // kh, w // kw
    win = x.data[:, :, :ho * kh, :wo * kw].reshape(n, c, ho, kh, wo, kw)
    out = win.mean(axis=(3, 5))
    need = x.requires_grad
    scale = 1.0 / (kh * kw)

    def vjp(g):
        if not need:
            return (None,)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        spread = np.broadcast_to((g * scale)[:, :, :, None, :, None], (n, c, ho, kh, wo, kw))
        gx[:, :, :ho * kh, :wo * kw] = spread.reshape(n, c, ho * kh, wo * kw)
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), vjp, "avg_pool2d")


def global_max_pool(x: Tensor) -> Tensor:
    """Max over the spatial plane; output is N x C x 1 x 1."""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    if h * w > 1 and flat.size:
        top2 = np.partition(flat, h * w - 2, axis=-1)[..., -2:]
        _note_margin(np.min(top2[..., 1] - top2[..., 0]))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(n, c, 1, 1)
    need = x.requires_grad

    def vjp(g):
        if not need:
            return (None,)
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=-1)
        return (gx.reshape(n, c, h, w),)

    return _result(np.ascontiguousarray(out), (x,), vjp, "global_max_pool")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial plane; output is N x C x 1 x 1."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    need = x.requires_grad
    scale = 1.0 / (h * w)

    def vjp(g):
        if not need:
            return (None,)
        return (np.broadcast_to(g * scale, (n, c, h, w)).copy(),)

    return _result(np.ascontiguousarray(out), (x,), vjp, "global_avg_pool")


def pool(x: Tensor, kind: str, window=None) -> Tensor:
    """Dispatch: kind in {max, avg}, window None for global pooling."""
    if kind == "max":
        return global_max_pool(x) if window is None else max_pool2d(x, window)
    if kind == "avg":
        return global_avg_pool(x) if window is None else avg_pool2d(x, window)
    raise ValueError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# bilinear resampling
# ---------------------------------------------------------------------------


@lru_cache(maxsize=256)
def _resize_axis(in_size: int, out_size: int):
    """Half-pixel-center sample positions clamped to the valid range."""
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, in_size - 1)
    frac = src - i0
    i1 = np.minimum(i0 + 1, in_size - 1)
    return i0, i1, frac


@lru_cache(maxsize=256)
def _resize_matrix(in_size: int, out_size: int, dtype_name: str):
    i0, i1, frac = _resize_axis(in_size, out_size)
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return np.ascontiguousarray(m.astype(np.dtype(dtype_name)))


def bilinear_resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy bilinear resize of the trailing two axes (shared with image I/O)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    h, w = arr.shape[-2], arr.shape[-1]
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    fy = fy.astype(arr.dtype).reshape((1,) * (arr.ndim - 2) + (out_h, 1))
    fx = fx.astype(arr.dtype).reshape((1,) * (arr.ndim - 2) + (1, out_w))
    a = arr[..., y0, :]
    rows = a + fy * (arr[..., y1, :] - a)
    c0 = rows[..., x0]
    return c0 + fx * (rows[..., x1] - c0)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of an NCHW map with half-pixel centers and edge clamp."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW input, got {x.shape}")
    out = bilinear_resize_array(x.data, int(out_h), int(out_w))
    h, w = x.shape[2], x.shape[3]
    need = x.requires_grad
    dtn = x.data.dtype.name

    def vjp(g):
        if not need:
            return (None,)
        ry = _resize_matrix(h, int(out_h), dtn)
        rx = _resize_matrix(w, int(out_w), dtn)
        return (np.matmul(ry.T, np.matmul(g, rx)),)

    return _result(np.ascontiguousarray(out), (x,), vjp, "bilinear_resize")


# ---------------------------------------------------------------------------
# channel manipulation
# ---------------------------------------------------------------------------


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    """Concatenate NCHW maps along the channel axis; N, H, W must all agree."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat_channels of an empty list")
    base = ts[0].shape
    for t in ts[1:]:
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels spatial/batch mismatch: {base} vs {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in ts])
    needs = [t.requires_grad for t in ts]

    def vjp(g):
        return tuple(
            (np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1]]) if needs[i] else None)
            for i in range(len(ts)))

    return _result(np.ascontiguousarray(out), ts, vjp, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    n, c, h, w = x.shape
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels [{start}:{stop}] outside C={c}")
    need = x.requires_grad

    def vjp(g):
        if not need:
            return (None,)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _result(np.ascontiguousarray(x.data[:, start:stop]), (x,), vjp, "slice_channels")


def slice_batch(x: Tensor, index: int) -> Tensor:
    n = x.shape[0]
    if not 0 <= index < n:
        raise ShapeError(f"slice_batch index {index} outside N={n}")
    need = x.requires_grad

    def vjp(g):
        if not need:
            return (None,)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[index:index + 1] = g
        return (gx,)

    return _result(np.ascontiguousarray(x.data[index:index + 1]), (x,), vjp, "slice_batch")


def channel_stats(x: Tensor) -> Tensor:
    """Per-pixel channel max (plane 0) and channel mean (plane 1); output N x 2 x H x W."""
    if x.ndim != 4 or x.shape[1] < 1:
        raise ShapeError(f"channel_stats expects NCHW with C >= 1, got {x.shape}")
    n, c, h, w = x.shape
    xd = x.data
    if c > 1 and xd.size:
        top2 = np.partition(xd, c - 2, axis=1)[:, -2:]
        _note_margin(np.min(top2[:, 1] - top2[:, 0]))
    idx = np.argmax(xd, axis=1)  # ties resolve to the first channel
    mx = np.take_along_axis(xd, idx[:, None], axis=1)
    mean = xd.mean(axis=1, keepdims=True)
    out = np.concatenate([mx, mean], axis=1)
    need = x.requires_grad

    def vjp(g):
        if not need:
            return (None,)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.put_along_axis(gx, idx[:, None], g[:, 0:1], axis=1)
        gx += g[:, 1:2] / c
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), vjp, "channel_stats")


def broadcast_scale(x: Tensor, weights: Tensor, axis: str) -> Tensor:
    """Broadcast multiply along one declared axis.

    axis="channel": weights N x C x 1 x 1; axis="spatial": weights N x 1 x H x W;
    axis="scalar": weights (k,) or (N, k) scaling the k stacked channel maps.
    """
    n, c, h, w = x.shape
    if axis == "channel":
        if weights.shape != (n, c, 1, 1):
            raise ShapeError(f"channel weights must be {(n, c, 1, 1)}, got {weights.shape}")
        wb = weights.data
        reduce_axes, wshape = (2, 3), weights.shape
    elif axis == "spatial":
        if weights.shape != (n, 1, h, w):
            raise ShapeError(f"spatial weights must be {(n, 1, h, w)}, got {weights.shape}")
        wb = weights.data
        reduce_axes, wshape = (1,), weights.shape
    elif axis == "scalar":
        if weights.shape == (c,):
            wb = weights.data.reshape(1, c, 1, 1)
        elif weights.shape == (n, c):
            wb = weights.data.reshape(n, c, 1, 1)
        else:
            raise ShapeError(f"scalar weights must be ({c},) or ({n}, {c}), got {weights.shape}")
        reduce_axes, wshape = (2, 3), weights.shape
    else:
        raise ValueError(f"unknown broadcast axis {axis!r}")

    xd = x.data
    need_x, need_w = x.requires_grad, weights.requires_grad

    def vjp(g):
        gx = g * wb if need_x else None
        gw = None
        if need_w:
            gw = (g * xd).sum(axis=reduce_axes, keepdims=True)
            if axis == "scalar" and weights.ndim == 1:
                gw = gw.sum(axis=0, keepdims=True)
            gw = gw.reshape(wshape)
        return gx, gw

    return _result(xd * wb, (x, weights), vjp, "broadcast_scale")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(build: Callable[..., Tensor], leaves: Sequence[Tensor], *,
               h: float = 1e-5, min_kink_margin: float = 1e-4,
               resample: Callable[[Sequence[Tensor], int], None] | None = None,
               max_attempts: int = 25) -> float:
    """Max relative error between analytic gradients and central differences.

    `build(*leaves)` must construct a scalar root from the leaf tensors.  When
    a `resample` callback is given, inputs that land within `min_kink_margin`
    of a ReLU kink or pooling tie are redrawn before checking.

    Relative error per element is |a - n| / max(|a|, |n|), defined as 0 when
    both magnitudes are below 1e-12.
    """
    root = None
    for attempt in range(max_attempts):
        margins: list[float] = []
        _kink_margins[0] = margins
        try:
            root = build(*leaves)
        finally:
            _kink_margins[0] = None
        if not np.isfinite(root.data).all():
            raise NonFiniteError("non-finite root during grad_check")
        if resample is None or not margins or min(margins) >= min_kink_margin:
            break
        resample(leaves, attempt)
    else:
        raise ValueError("could not sample inputs away from kinks/ties")

    for leaf in leaves:
        leaf.zero_grad()
    backward(root)
    analytic = [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
                for leaf in leaves]
    for leaf in leaves:
        leaf.zero_grad()

    worst = 0.0
    with no_grad():
        for leaf, ana in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                f_plus = float(build(*leaves).data.reshape(()))
                flat[i] = keep - h
                f_minus = float(build(*leaves).data.reshape(()))
                flat[i] = keep
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NonFiniteError("non-finite values during finite differencing")
                num = (f_plus - f_minus) / (2.0 * h)
                a = float(ana_flat[i])
                if abs(a) < 1e-12 and abs(num) < 1e-12:
                    continue
                worst = max(worst, abs(a - num) / max(abs(a), abs(num)))
    return worst
