"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Var wraps an ndarray and remembers how it was produced; ``backward``
walks the recorded tape once, in reverse topological order, accumulating
vector-Jacobian products into ``.grad``. Only the primitives needed by the
model are provided. Inference code runs inside ``no_grad()`` so that no
tape is built.

All ops preserve the dtype of their array inputs; mixing float32 and
float64 operands in one op is an error, which keeps the single/double
precision regimes honest.
"""

from __future__ import annotations

import contextlib
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Var:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Var", ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # Operator sugar for the common arithmetic.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)


def _lift(x, dtype) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=dtype))


def _common_dtype(*vars_: Var):
    dt = vars_[0].data.dtype
    for v in vars_[1:]:
        if v.data.dtype != dt:
            raise ShapeError(f"mixed dtypes in op: {dt} vs {v.data.dtype}")
    return dt


def _node(data: np.ndarray, parents: Tuple[Var, ...], vjp) -> Var:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Var(data, requires_grad=True)
        out._parents = parents
        out._vjp = vjp
        return out
    return Var(data)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    # Iterative post-order topological sort; rollouts can be deep.
    topo: List[Var] = []
    visited = set()
    stack: List[Tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        gs = node._vjp(node.grad)
        for parent, g in zip(node._parents, gs):
            if g is None or not parent.requires_grad:
                continue
            # Grad buffers are only ever rebound, never mutated in place,
            # so adopting the vjp output directly is safe.
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# Elementwise and shape primitives


def add(a: Var, b) -> Var:
    b = _lift(b, a.dtype)
    _common_dtype(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def sub(a: Var, b) -> Var:
    b = _lift(b, a.dtype)
    _common_dtype(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), vjp)


def mul(a: Var, b) -> Var:
    b = _lift(b, a.dtype)
    _common_dtype(a, b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), vjp)


def reciprocal(a: Var) -> Var:
    out = 1.0 / a.data

    def vjp(g):
        return (-g * out * out,)

    return _node(out.astype(a.dtype, copy=False), (a,), vjp)


def matmul(a: Var, b: Var) -> Var:
    _common_dtype(a, b)
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp)


def vsum(a: Var) -> Var:
    out = a.data.sum()

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)

    return _node(np.asarray(out), (a,), vjp)


def vmean(a: Var) -> Var:
    n = a.data.size
    out = a.data.mean()

    def vjp(g):
        return ((np.broadcast_to(g, a.data.shape) / n).astype(a.dtype, copy=False),)

    return _node(np.asarray(out), (a,), vjp)


def log(a: Var) -> Var:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, (a,), vjp)


def exp(a: Var) -> Var:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp)


def tanh(a: Var) -> Var:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), vjp)


def sigmoid(a: Var) -> Var:
    # Stable for both signs of the argument: the exponent is never positive.
    z = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.dtype, copy=False)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp)


def clamp_min(a: Var, lo: float) -> Var:
    """max(a, lo); the gradient is zero where the clamp is active."""
    mask = a.data > lo
    out = np.where(mask, a.data, lo).astype(a.dtype, copy=False)

    def vjp(g):
        return (g * mask,)

    return _node(out, (a,), vjp)


def smooth_l1(a: Var) -> Var:
    """Elementwise 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = a.data
    small = np.abs(x) < 1.0
    out = np.where(small, 0.5 * x * x, np.abs(x) - 0.5).astype(a.dtype, copy=False)

    def vjp(g):
        return (g * np.where(small, x, np.sign(x)).astype(a.dtype, copy=False),)

    return _node(out, (a,), vjp)


def reshape(a: Var, shape) -> Var:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), vjp)


def concat(parts: Sequence[Var], axis: int) -> Var:
    _common_dtype(*parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(parts), vjp)


def _key_has_duplicates(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(not isinstance(p, (slice, int)) for p in parts)


def getitem(a: Var, key) -> Var:
    out = a.data[key]
    scatter_add = _key_has_duplicates(key)

    def vjp(g):
        ga = np.zeros_like(a.data)
        if scatter_add:
            np.add.at(ga, key, g)
        else:
            ga[key] = g
        return (ga,)

    return _node(np.ascontiguousarray(out), (a,), vjp)


def gather_rows(a: Var, index: np.ndarray, sorted_starts: Optional[np.ndarray] = None) -> Var:
    """Rows a[index] along axis 0; duplicate indices allowed.

    ``sorted_starts`` is a fast-path hint: when ``index`` is non-decreasing
    and covers every row of ``a``, it gives each row's first position in
    ``index`` so the scatter in the backward pass becomes a reduceat.
    """
    out = a.data[index]

    def vjp(g):
        if sorted_starts is not None:
            return (np.add.reduceat(g, sorted_starts, axis=0),)
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _node(out, (a,), vjp)


def segment_sum(
    a: Var, index: np.ndarray, num_segments: int,
    sorted_starts: Optional[np.ndarray] = None,
) -> Var:
    """out[s] = sum of rows a[k] with index[k] == s; empty segments are 0.

    ``sorted_starts`` as in ``gather_rows`` (requires every segment
    non-empty and ``index`` sorted).
    """
    if sorted_starts is not None:
        out = np.add.reduceat(a.data, sorted_starts, axis=0)
    else:
        out = np.zeros((num_segments,) + a.data.shape[1:], dtype=a.dtype)
        np.add.at(out, index, a.data)

    def vjp(g):
        return (g[index],)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# Spatial primitives


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    """(h*w, kh*kw*c) patch matrix from a padded (h+kh-1, w+kw-1, c) image."""
    c = xp.shape[2]
    cols = np.empty((h, w, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i : i + h, j : j + w, :]
    return cols.reshape(h * w, kh * kw * c)


def conv2d(x: Var, w: Var, b: Optional[Var] = None) -> Var:
    """Same-padding stride-1 2D cross-correlation.

    x: (H, W, C_in); w: (kh, kw, C_in, C_out) with odd kh, kw; b: (C_out,).
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects (H,W,C) input and (kh,kw,Cin,Cout) kernel, got "
            f"{x.data.shape} and {w.data.shape}"
        )
    kh, kw, cin, cout = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    if x.data.shape[2] != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.data.shape[2]}, kernel expects {cin}"
        )
    _common_dtype(x, w, *((b,) if b is not None else ()))
    h, wd = x.data.shape[:2]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw, h, wd)
    w2 = w.data.reshape(kh * kw * cin, cout)
    y = cols @ w2
    if b is not None:
        y = y + b.data
    out = y.reshape(h, wd, cout)

    def vjp(g):
        g2 = g.reshape(h * wd, cout)
        gw = (cols.T @ g2).reshape(w.data.shape)
        gcols = (g2 @ w2.T).reshape(h, wd, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[i : i + h, j : j + wd, :] += gcols[:, :, i, j, :]
        gx = gxp[ph : ph + h, pw : pw + wd, :]
        if b is not None:
            return gx, gw, g2.sum(axis=0)
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, vjp)


def avg_pool2d(x: Var, factor: Tuple[int, int]) -> Var:
    """Non-overlapping mean pooling of an (H, W, C) tensor."""
    fr, fc = factor
    h, w, c = x.data.shape
    if h % fr or w % fc:
        raise ShapeError(f"cannot pool {h}x{w} by factor {fr}x{fc}")
    out = x.data.reshape(h // fr, fr, w // fc, fc, c).mean(axis=(1, 3))

    def vjp(g):
        gx = np.broadcast_to(
            g[:, None, :, None, :] / (fr * fc), (h // fr, fr, w // fc, fc, c)
        )
        return (gx.reshape(h, w, c).astype(x.dtype, copy=False),)

    return _node(out, (x,), vjp)


def softmax_flat(x: Var) -> Var:
    """Softmax over all entries jointly, returned in the input's shape."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    flat = x.data.reshape(-1)
    z = np.exp(flat - flat.max())
    p = (z / z.sum()).reshape(x.data.shape).astype(x.dtype, copy=False)

    def vjp(g):
        dot = float((g * p).sum())
        return (p * (g - dot),)

    return _node(p, (x,), vjp)


def check_finite(value: np.ndarray, what: str) -> None:
    if not np.isfinite(value).all():
        raise NumericError(f"{what} contains non-finite values")
