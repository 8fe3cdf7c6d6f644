"""Differentiable building blocks: dense/conv maps, a gated convolutional
recurrent cell, graph attention over the grid scene graph, spatial softmax,
belief embedding, plus the parameter store and a finite-difference gradient
checker.

Parameters default to float32; gradient checks clone the store to float64.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import GradCheckError, NumericError, ShapeError
from .gridworld import moore_neighbors


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class Parameter:
    name: str
    data: np.ndarray
    trainable: bool = True


def _fan(shape: Tuple[int, ...]) -> Tuple[int, int]:
    if len(shape) == 4:  # conv kernel (kh, kw, cin, cout)
        rf = shape[0] * shape[1]
        return rf * shape[2], rf * shape[3]
    if len(shape) == 2:
        return shape[0], shape[1]
    n = int(np.prod(shape))
    return n, n


class ParameterStore:
    """Named trainable arrays with seed-deterministic initialization.

    Each entry's initial values depend only on (store seed, entry name), so
    construction order never changes a model's starting point.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Parameter] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def add(
        self,
        name: str,
        shape: Tuple[int, ...],
        init: str = "glorot",
        trainable: bool = True,
    ) -> np.ndarray:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "glorot":
            fan_in, fan_out = _fan(shape)
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            data = self._rng(name).uniform(-lim, lim, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "normal":
            data = self._rng(name).normal(0.0, 0.1, size=shape)
        else:
            raise ShapeError(f"unknown init {init!r}")
        p = Parameter(name, np.asarray(data, dtype=self.dtype), trainable)
        self._params[name] = p
        return p.data

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable_names(self) -> List[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def set_value(self, name: str, value: np.ndarray) -> None:
        p = self._params[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != p.data.shape:
            raise ShapeError(
                f"parameter {name!r}: expected shape {p.data.shape}, got {value.shape}"
            )
        if not np.isfinite(value).all():
            raise NumericError(f"parameter {name!r} assigned non-finite values")
        p.data = value

    def astype(self, dtype) -> "ParameterStore":
        clone = ParameterStore(self.seed, dtype)
        for name, p in self._params.items():
            clone._params[name] = Parameter(
                name, p.data.astype(dtype), p.trainable
            )
        return clone

    def l2_sum(self) -> float:
        return float(
            sum((p.data.astype(np.float64) ** 2).sum() for p in self._params.values() if p.trainable)
        )


class ParamTape:
    """Binds store entries to Vars for one forward/backward pass.

    Repeated lookups of a name return the same node, so gradients from all
    uses accumulate in one place.
    """

    def __init__(self, store: ParameterStore):
        self.store = store
        self._vars: Dict[str, Var] = {}

    def var(self, name: str) -> Var:
        v = self._vars.get(name)
        if v is None:
            p = self.store[name]
            v = Var(p.data, requires_grad=p.trainable)
            self._vars[name] = v
        return v

    def bound_names(self) -> List[str]:
        return list(self._vars)

    def grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, v in self._vars.items():
            if v.requires_grad and v.grad is not None:
                out[name] = v.grad
        return out


# ---------------------------------------------------------------------------
# Grid edges (directed i <- j pairs over the 8-neighborhood)


@dataclass(frozen=True)
class GridEdges:
    """Flattened edge list of the scene graph for one grid shape."""

    rows: int
    cols: int
    src: np.ndarray  # (E,) receiving node i, non-decreasing
    dst: np.ndarray  # (E,) neighbor node j
    inv_deg: np.ndarray  # (N, 1) 1/|N_i|, 0 for isolated nodes
    src_starts: Optional[np.ndarray] = None  # first edge index per node

    @property
    def n_nodes(self) -> int:
        return self.rows * self.cols


@lru_cache(maxsize=None)
def grid_edges(rows: int, cols: int) -> GridEdges:
    src, dst = [], []
    deg = np.zeros(rows * cols, dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for rr, cc in moore_neighbors(rows, cols, r, c):
                src.append(i)
                dst.append(rr * cols + cc)
                deg[i] += 1
    inv = np.zeros((rows * cols, 1), dtype=np.float64)
    nz = deg > 0
    inv[nz, 0] = 1.0 / deg[nz]
    src_arr = np.asarray(src, dtype=np.int64)
    # Every cell of a valid (>= 2x2) grid has neighbors, so src covers every
    # node and the sorted fast path applies.
    starts = None
    if nz.all() and src_arr.size:
        starts = np.searchsorted(src_arr, np.arange(rows * cols))
    return GridEdges(rows, cols, src_arr, np.asarray(dst, dtype=np.int64), inv, starts)


# ---------------------------------------------------------------------------
# Layers


def dense(x: Var, w: Var, b: Optional[Var] = None) -> Var:
    """x @ w (+ b) on the last axis of a 2-D input."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weights, got {x.data.shape} @ {w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"dense shape mismatch: {x.data.shape} @ {w.data.shape}")
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, b)
    return out


conv2d = ad.conv2d


def convrnn_step(
    x: Var, h_prev: Var, c_prev: Var, w: Var, b: Var
) -> Tuple[Var, Var]:
    """One gated convolutional recurrent update.

    Gates i, f, o, g come from one same-padding convolution over the channel
    concatenation [x, h_prev]; the kernel's output axis is 4*d in that gate
    order. c = sigmoid(f)*c_prev + sigmoid(i)*tanh(g); h = sigmoid(o)*tanh(c).
    """
    for name, v in (("input", x), ("hidden state", h_prev), ("cell state", c_prev)):
        ad.check_finite(v.data, f"convrnn_step {name}")
    d = h_prev.data.shape[2]
    if c_prev.data.shape != h_prev.data.shape:
        raise ShapeError(
            f"hidden/cell shape mismatch: {h_prev.data.shape} vs {c_prev.data.shape}"
        )
    if w.data.shape[3] != 4 * d:
        raise ShapeError(
            f"gate kernel must output 4*{d} channels, got {w.data.shape[3]}"
        )
    z = ad.conv2d(ad.concat([x, h_prev], axis=2), w, b)
    gates = ad.sigmoid(z[:, :, 0 : 3 * d])  # i, f, o share one activation pass
    i = gates[:, :, 0:d]
    f = gates[:, :, d : 2 * d]
    o = gates[:, :, 2 * d : 3 * d]
    g = ad.tanh(z[:, :, 3 * d : 4 * d])
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


FORGET_GATE_SLICE = slice(1, 2)  # of the 4 gate blocks, in (i, f, o, g) order


def gat_params_shapes(d: int, ctx_channels: int, hidden: Optional[int] = None) -> Dict[str, Tuple[int, ...]]:
    """Shapes of the edge-function perceptron for d-channel node states."""
    hid = d if hidden is None else hidden
    pair = 2 * (d + ctx_channels)
    return {"w1": (pair, hid), "b1": (hid,), "w2": (hid, d), "b2": (d,)}


def gat_layer(
    hidden: Var,
    node_context: Optional[Var],
    params: Dict[str, Var],
    edges: GridEdges,
    mode: str = "residual",
) -> Var:
    """Graph update over the 8-neighbor grid graph.

    Node features are [hidden_i, context_i]. In "residual" mode the output
    at i is the neighbor mean of an edge perceptron applied to concatenated
    node pairs, plus hidden_i. In "weighted" mode the edge perceptron emits
    a scalar score, softmax-normalized over each neighborhood, weighting a
    sum of neighbor hidden states (plus the same residual).
    """
    h, w, d = hidden.data.shape
    if (h, w) != (edges.rows, edges.cols):
        raise ShapeError(
            f"hidden grid {h}x{w} does not match edge structure "
            f"{edges.rows}x{edges.cols}"
        )
    n = edges.n_nodes
    hf = ad.reshape(hidden, (n, d))
    if node_context is not None:
        cf = ad.reshape(node_context, (n, node_context.data.shape[2]))
        v = ad.concat([hf, cf], axis=1)
    else:
        v = hf
    if edges.src.size == 0:
        return hidden  # isolated nodes: empty neighbor sum, pure residual
    pairs = ad.concat(
        [
            ad.gather_rows(v, edges.src, edges.src_starts),
            ad.gather_rows(v, edges.dst),
        ],
        axis=1,
    )
    hid = ad.tanh(dense(pairs, params["w1"], params["b1"]))
    if mode == "residual":
        e = dense(hid, params["w2"], params["b2"])  # (E, d)
        agg = ad.segment_sum(e, edges.src, n, edges.src_starts)
        agg = ad.mul(agg, np.asarray(edges.inv_deg, dtype=hidden.dtype))
        out = ad.add(agg, hf)
    elif mode == "weighted":
        score = dense(hid, params["w2"], params["b2"])  # (E, 1)
        # Stable per-neighborhood softmax; the max shift is constant w.r.t. grads.
        shift = np.zeros((n, 1), dtype=score.dtype)
        np.maximum.at(shift, edges.src, score.data)
        ez = ad.exp(ad.sub(score, np.asarray(shift[edges.src], dtype=score.dtype)))
        denom = ad.segment_sum(ez, edges.src, n)
        alpha = ad.mul(ez, ad.reciprocal(ad.gather_rows(denom, edges.src)))
        weighted = ad.mul(alpha, ad.gather_rows(hf, edges.dst))
        out = ad.add(ad.segment_sum(weighted, edges.src, n), hf)
    else:
        raise ShapeError(f"unknown gat mode {mode!r}")
    return ad.reshape(out, (h, w, d))


def spatial_softmax(logits: Var) -> Var:
    """Probability map over all grid cells of an (H, W) logit field."""
    if logits.data.ndim != 2:
        raise ShapeError(f"spatial_softmax expects (H, W) logits, got {logits.data.shape}")
    return ad.softmax_flat(logits)


def embed_belief(c: Var, w: Var, b: Var) -> Var:
    """Per-cell affine map of the scalar probability to an embedding vector."""
    if c.data.ndim != 2:
        raise ShapeError(f"embed_belief expects (H, W) beliefs, got {c.data.shape}")
    h, wd = c.data.shape
    c3 = ad.reshape(c, (h, wd, 1))
    return ad.add(ad.mul(c3, w), b)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable[[ParamTape], Var],
    store: ParameterStore,
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    max_entries_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` must be a pure function of the store's parameters and return
    a scalar Var. The check runs on a float64 clone of the store so the
    caller's values are untouched. Per-parameter errors use
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
    """
    ds = store if store.dtype == np.float64 else store.astype(np.float64)
    tape = ParamTape(ds)
    loss = loss_fn(tape)
    if loss.data.size != 1:
        raise GradCheckError(f"fragment must return a scalar, got shape {loss.data.shape}")
    base = float(loss.data)
    again = float(loss_fn(ParamTape(ds)).data)
    if again != base:
        raise GradCheckError(
            f"fragment is not deterministic: {base!r} vs {again!r}"
        )
    ad.backward(loss)
    grads = tape.grads()

    if rng is None:
        rng = np.random.default_rng(0)
    report = GradCheckReport(0.0, tolerance)
    for name in ds.trainable_names():
        p = ds[name]
        if name not in tape.bound_names():
            continue  # parameter unused by this fragment
        analytic = grads.get(name)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(n)
        worst = 0.0
        for k in idxs:
            orig = flat[k]
            flat[k] = orig + eps
            up = float(loss_fn(ParamTape(ds)).data)
            flat[k] = orig - eps
            down = float(loss_fn(ParamTape(ds)).data)
            flat[k] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[k])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
