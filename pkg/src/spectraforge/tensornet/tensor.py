"""Reverse-mode autodiff over dense numpy arrays.

Only the operations needed by the reconstruction network and its losses
are provided. Every op records a closure that maps the output gradient to
parent gradients; :meth:`Tensor.backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
LEAKY_SLOPE = 0.01
# im2col buffers above this many bytes are built in row chunks and not cached
COL_BYTES_LIMIT = 64 * 1024 * 1024

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None or arr.dtype.kind != "f":
            arr = arr.astype(dtype or DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.data.shape} in {self.op}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf needing it."""
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(p):
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # arithmetic sugar used by the losses and tests
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.op = op
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c_ = a.data.dtype.type(c)
    return _make(a.data * c_, (a,), lambda g: (g * c_,), "scale")


def weighted_sum(terms: Sequence[tuple[float, Tensor]]) -> Tensor:
    """sum(w_i * t_i) over scalar tensors."""
    if not terms:
        raise ShapeError("weighted_sum of nothing")
    total = None
    for w, t in terms:
        part = scale(t, w)
        total = part if total is None else add(total, part)
    return total


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    s = x.data.dtype.type(slope)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * s)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * s),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = (1.0 / (1.0 + np.exp(-x.data))).astype(x.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


ACTIVATIONS = {"leaky_relu": leaky_relu, "sigmoid": sigmoid, "identity": lambda x: x}


def _im2col(xp: np.ndarray, kh: int, kw: int, r0: int, r1: int, width: int) -> np.ndarray:
    """Columns for output rows [r0, r1): shape (N*(r1-r0)*W, C*kh*kw)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp[:, :, r0:r1 + kh - 1, :], (kh, kw), axis=(2, 3))
    # win: (N, C, rows, W, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * (r1 - r0) * width, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 cross-correlation, NCHW input, (F, C, k, k) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x (N,C,H,W) and w (F,C,kh,kw)")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel sizes must be odd for same padding")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({f},)")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    w2 = w.data.reshape(f, c * kh * kw)
    row_bytes = n * wd * c * kh * kw * x.data.itemsize
    rows = max(1, min(h, COL_BYTES_LIMIT // max(row_bytes, 1)))
    chunks = [(r, min(h, r + rows)) for r in range(0, h, rows)]
    out = np.empty((n, h, wd, f), dtype=x.dtype)
    cached = None
    for r0, r1 in chunks:
        cols = _im2col(xp, kh, kw, r0, r1, wd)
        out[:, r0:r1] = (cols @ w2.T).reshape(n, r1 - r0, wd, f)
        if len(chunks) == 1:
            cached = cols
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g_nhwf = g.transpose(0, 2, 3, 1)
        dw2 = np.zeros_like(w2)
        dxp = np.zeros_like(xp) if _needs_grad(x) else None
        for r0, r1 in chunks:
            cols = cached if cached is not None else _im2col(xp, kh, kw, r0, r1, wd)
            g2 = g_nhwf[:, r0:r1].reshape(-1, f)
            dw2 += g2.T @ cols
            if dxp is not None:
                dcols = (g2 @ w2).reshape(n, r1 - r0, wd, c, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, r0 + i:r1 + i, j:j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = None if dxp is None else np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + wd])
        dw = dw2.reshape(w.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/cols are dropped.

    The gradient goes to the first maximal element in scan order.
    """
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool2: input {h}x{w} too small")
    blocks = x.data[:, :, : ho * 2, : wo * 2].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
        dx = np.zeros_like(x.data)
        dx[:, :, : ho * 2, : wo * 2] = gb
        return (dx,)

    return _make(np.ascontiguousarray(out), (x,), backward, "maxpool2")


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) linear interpolation weights with half-pixel centers."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    n, c, h, w = x.shape
    ho, wo = int(size[0]), int(size[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"bilinear_resize: bad target {size}")
    if (ho, wo) == (h, w):
        return x
    ry = resize_matrix(h, ho, x.dtype)
    rx = resize_matrix(w, wo, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _make(out, (x,), backward, "bilinear_resize")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")
