"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the thread's current
:class:`Graph`.  :func:`backward` walks that tape in exact reverse order,
accumulates gradients into leaf tensors, and consumes the graph; the next
operation starts a fresh one.

Only the operations the autoencoder needs are provided.  There is no general
broadcasting: binary operations take equal shapes or a Python scalar.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_LN2 = math.log(2.0)
_state = threading.local()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite value in output")


class Tensor:
    """A float32 n-d array that may take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_graph", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float32, order="C", copy=True)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._graph: Optional[Graph] = None
        self._node: int = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float32)
        t.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._graph = None
        t._node = -1
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output_id: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Graph:
    """Append-only tape of executed operations."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def record(self, op, inputs, out: Tensor, backward_fn) -> None:
        out._graph = self
        out._node = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), out._node, backward_fn))

    def consume(self) -> None:
        self.consumed = True
        self.nodes.clear()


def current_graph() -> Graph:
    g = getattr(_state, "graph", None)
    if g is None or g.consumed:
        g = Graph()
        _state.graph = g
    return g


def reset_graph() -> None:
    """Drop the current tape (e.g. after an abandoned forward pass)."""
    g = getattr(_state, "graph", None)
    if g is not None:
        g.consume()
    _state.graph = None


def grad_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


@contextlib.contextmanager
def no_grad():
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


def _make(op: str, out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor._wrap(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        g = current_graph()
        for t in inputs:
            if t._graph is not None and t._graph is not g:
                raise ContractError(f"{op}: input belongs to a graph already consumed by backward")
        out.requires_grad = True
        g.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss._graph
    if graph is None:
        raise ContractError("loss was not produced by a recorded graph")
    if graph.consumed:
        raise ContractError("backward already ran on this graph; run a new forward pass")
    pending = {loss._node: np.ones((), dtype=np.float64)}
    for node in reversed(graph.nodes[: loss._node + 1]):
        g_out = pending.pop(node.output_id, None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not t.requires_grad:
                continue
            if t._graph is None:
                g32 = np.asarray(g, dtype=np.float32).reshape(t.shape)
                t.grad = g32.copy() if t.grad is None else t.grad + g32
            elif t._node in pending:
                pending[t._node] = pending[t._node] + g
            else:
                pending[t._node] = g
    graph.consume()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make("add_scalar", a.data + np.float32(c), (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        out = (a.data.astype(np.float64) * c).astype(np.float32)
        return _make("mul_scalar", out, (a,), lambda g: (g * c,))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.astype(np.float64).sum(), dtype=np.float32)
    return _make("sum_all", out, (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    out = np.asarray(a.data.astype(np.float64).mean(), dtype=np.float32)
    return _make("mean", out, (a,), lambda g: (np.broadcast_to(g / n, shape),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must be in [0, 1), got {slope}")
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * np.float32(slope))
    return _make("leaky_relu", out, (x,), lambda g: (np.where(pos, g, g * slope),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data.astype(np.float64)
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = s.astype(np.float32)
    return _make("sigmoid", out, (x,), lambda g: (g * s * (1.0 - s),))


def clamp01(x: Tensor) -> Tensor:
    inside = (x.data >= 0) & (x.data <= 1)
    return _make("clamp01", np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g * inside,))


def huber_loss(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 loss: 0.5 d^2/beta inside |d| < beta, |d| - beta/2 outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    _same_shape(pred, target, "huber_loss")
    d = pred.data.astype(np.float64) - target.data.astype(np.float64)
    ad = np.abs(d)
    small = ad < beta
    per = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = d.size
    out = np.asarray(per.mean(), dtype=np.float32)

    def bw(g):
        gd = g * np.where(small, d / beta, np.sign(d)) / n
        return gd, -gd

    return _make("huber_loss", out, (pred, target), bw)


# ---------------------------------------------------------------------------
# quantization


def quantize_indices(z: np.ndarray, levels: int) -> np.ndarray:
    """Bin index of each value after clamping to [0, 1]; ties go to the upper bin."""
    if levels < 2:
        raise ValueError("levels must be >= 2")
    c = np.clip(np.asarray(z, dtype=np.float64), 0.0, 1.0)
    return np.minimum(np.floor(c * levels), levels - 1).astype(np.int64)


def bin_centers(idx: np.ndarray, levels: int) -> np.ndarray:
    return ((idx + 0.5) / levels).astype(np.float32)


def quantize_ste(z: Tensor, levels: int) -> Tensor:
    """Uniform quantization to bin centers with a straight-through gradient."""
    out = bin_centers(quantize_indices(z.data, levels), levels)
    inside = (z.data >= 0) & (z.data <= 1)
    return _make("quantize_ste", out, (z,), lambda g: (g * inside,))


def _soft_assign(z: np.ndarray, levels: int):
    u_raw = z.astype(np.float64) * levels - 0.5
    u = np.clip(u_raw, 0.0, levels - 1)
    lo = np.minimum(np.floor(u), levels - 2).astype(np.int64)
    frac = u - lo
    live = (u_raw > 0) & (u_raw < levels - 1)
    return lo, frac, live


def soft_histogram(z: np.ndarray, levels: int) -> np.ndarray:
    """Per-channel triangular-kernel soft counts, shape (C, levels)."""
    n, c = z.shape[:2]
    lo, frac, _ = _soft_assign(z, levels)
    lo = np.moveaxis(lo, 1, 0).reshape(c, -1)
    frac = np.moveaxis(frac, 1, 0).reshape(c, -1)
    counts = np.zeros((c, levels), dtype=np.float64)
    rows = np.repeat(np.arange(c), lo.shape[1]).reshape(lo.shape)
    np.add.at(counts, (rows, lo), 1.0 - frac)
    np.add.at(counts, (rows, lo + 1), frac)
    return counts


def entropy_surrogate(z: Tensor, levels: int) -> Tensor:
    """Differentiable entropy estimate (bits/symbol) of a latent batch (N, C, ...).

    Hard bin counts are replaced by triangular soft counts one bin wide;
    per-channel entropies are averaged (every channel holds the same number
    of symbols).
    """
    if z.ndim < 2:
        raise DimensionError("entropy_surrogate expects (N, C, ...) input")
    c = z.shape[1]
    m = z.data.size // c
    counts = soft_histogram(z.data, levels)
    p = counts / m
    plogp = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    h = -plogp.sum(axis=1)
    out = np.asarray(h.mean(), dtype=np.float32)

    def bw(g):
        dh_dp = -(np.log2(np.maximum(p, 1e-12)) + 1.0 / _LN2)  # (C, L)
        lo, _, live = _soft_assign(z.data, levels)
        ch = np.arange(c).reshape((1, c) + (1,) * (z.ndim - 2))
        ch = np.broadcast_to(ch, lo.shape)
        du = (dh_dp[ch, lo + 1] - dh_dp[ch, lo]) / m
        return (g * du * live * levels / c,)

    return _make("entropy_surrogate", out, (z,), bw)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def _check_conv_args(x, w, b, stride, pad, op, cin_axis):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"{op}: expected 4-d input and weight, got {x.shape}, {w.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"{op}: need stride >= 1 and pad >= 0")
    if x.shape[1] != w.shape[cin_axis]:
        raise DimensionError(f"{op}: input has {x.shape[1]} channels, weight expects {w.shape[cin_axis]}")
    cout = w.shape[1 - cin_axis]
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"{op}: bias shape {b.shape} != ({cout},)")


def _conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    acc = np.zeros((o, n, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            acc += np.tensordot(w[:, :, i, j], patch, axes=([1], [1]))
    return acc.transpose(1, 0, 2, 3)


def _conv2d_bwd(g: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gxp = np.zeros_like(xp)
    gw = np.zeros(w.shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * (ho - 1) + 1, stride),
                  slice(j, j + stride * (wo - 1) + 1, stride))
            gw[:, :, i, j] = np.tensordot(g, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
            gxp[sl] += np.tensordot(w[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
    gx = gxp[:, :, pad : pad + h, pad : pad + wd]
    return gx, gw


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input, weight [Cout, Cin, Kh, Kw]."""
    _check_conv_args(x, weight, bias, stride, pad, "conv2d", cin_axis=1)
    x64 = x.data.astype(np.float64)
    w64 = weight.data.astype(np.float64)
    out = _conv2d_fwd(x64, w64, stride, pad)
    if bias is not None:
        out = out + bias.data.astype(np.float64)[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        gx, gw = _conv2d_bwd(g, x64, w64, stride, pad)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make("conv2d", out.astype(np.float32), inputs, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`), weight [Cin, Cout, Kh, Kw]."""
    _check_conv_args(x, weight, bias, stride, pad, "conv_transpose2d", cin_axis=0)
    x64 = x.data.astype(np.float64)
    w64 = weight.data.astype(np.float64)
    n, ci, h, wd = x64.shape
    _, co, kh, kw = w64.shape
    ho = conv_transpose_output_size(h, kh, stride, pad)
    wo = conv_transpose_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError("conv_transpose2d: padding removes the whole output")
    fh, fw = (h - 1) * stride + kh, (wd - 1) * stride + kw
    full = np.zeros((n, co, fh, fw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(w64[:, :, i, j], x64, axes=([0], [1]))  # (co, n, h, w)
            full[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (wd - 1) + 1 : stride] += contrib.transpose(1, 0, 2, 3)
    out = full[:, :, pad : pad + ho, pad : pad + wo]
    if bias is not None:
        out = out + bias.data.astype(np.float64)[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        gfull = np.zeros((n, co, fh, fw), dtype=np.float64)
        gfull[:, :, pad : pad + ho, pad : pad + wo] = g
        gx = np.zeros_like(x64)
        gw = np.zeros_like(w64)
        for i in range(kh):
            for j in range(kw):
                gs = gfull[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (wd - 1) + 1 : stride]
                gx += np.tensordot(w64[:, :, i, j], gs, axes=([1], [1])).transpose(1, 0, 2, 3)
                gw[:, :, i, j] = np.tensordot(x64, gs, axes=([0, 2, 3], [0, 2, 3]))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make("conv_transpose2d", out.astype(np.float32), inputs, bw)
