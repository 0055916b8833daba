"""Euclidean projections onto the l1, l1,1 and l1,inf norm balls.

Matrix projections act on the 2-d view of a conv weight: one row per filter,
``Cin * Kh * Kw`` columns.  All arithmetic runs in float64; results are cast
back to the input dtype rounding toward zero, so the norm of the stored
values never exceeds the float64 result.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .errors import AlgorithmError, DimensionError, NumericError
from .tensor import Tensor

CONSTRAINTS = ("l1", "l11", "l1inf")


def _check(v: np.ndarray, eta: float) -> None:
    if not np.all(np.isfinite(v)):
        raise NumericError("projection input contains non-finite values")
    if not eta >= 0:  # also rejects NaN
        raise ValueError(f"radius must be non-negative, got {eta}")


def _cast_toward_zero(x: np.ndarray, dtype) -> np.ndarray:
    dtype = np.dtype(dtype)
    if dtype == np.float64:
        out = x.copy()
    else:
        out = x.astype(dtype)
        over = np.abs(out.astype(np.float64)) > np.abs(x)
        if over.any():
            out[over] = np.nextafter(out[over], dtype.type(0))
    # literal zeros, never denormals
    out[np.abs(out) < np.finfo(dtype).tiny] = 0
    return out


def _float_dtype(v: np.ndarray):
    return v.dtype if v.dtype in (np.float32, np.float64) else np.float64


def l1_threshold(a: np.ndarray, eta: float) -> float:
    """Soft threshold tau with sum(max(a - tau, 0)) == eta, for a >= 0 and sum(a) > eta."""
    u = np.sort(a, kind="stable")[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    hits = np.nonzero(u * k > css - eta)[0]
    rho = hits[-1] if hits.size else 0  # empty only when eta vanishes next to u[0]
    return float((css[rho] - eta) / (rho + 1))


def _proj_l1_f64(v: np.ndarray, eta: float) -> np.ndarray:
    a = np.abs(v)
    if a.sum() <= eta:
        return v.copy()
    if eta == 0:
        return np.zeros_like(v)
    tau = l1_threshold(a, eta)
    return np.sign(v) * np.maximum(a - tau, 0.0)


def proj_l1(v, eta: float) -> np.ndarray:
    """Project ``v`` (any shape, treated as a flat vector) onto the l1 ball."""
    v = np.asarray(v)
    dtype = _float_dtype(v)
    v64 = v.astype(np.float64)
    _check(v64, eta)
    w = _proj_l1_f64(v64.ravel(), eta).reshape(v.shape)
    return _cast_toward_zero(w, dtype)


def _as_matrix(V) -> np.ndarray:
    V = np.asarray(V)
    if V.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {V.shape}")
    return V


def proj_l11(V, eta: float) -> np.ndarray:
    """Two-stage l1,1 projection that zeroes whole rows.

    The vector of row l1 norms is projected onto the l1 ball of radius
    ``eta``; component ``i`` of the result becomes the l1 radius for row ``i``.
    """
    V = _as_matrix(V)
    dtype = _float_dtype(V)
    V64 = V.astype(np.float64)
    _check(V64, eta)
    radii = _proj_l1_f64(np.abs(V64).sum(axis=1), eta)
    W = np.empty_like(V64)
    for i, t in enumerate(radii):
        W[i] = _proj_l1_f64(V64[i], t)
    return _cast_toward_zero(W, dtype)


def _row_clip_levels(sorted_abs: np.ndarray, prefix: np.ndarray, theta: float):
    """Clip level mu_i and clipped-entry count k_i of every row for dual value theta.

    mu_i solves sum_j max(|v_ij| - mu_i, 0) == theta, or is 0 when the row's
    l1 norm is at most theta.
    """
    l, d = sorted_abs.shape
    k = np.arange(1, d + 1)
    removed = prefix - k * sorted_abs  # nondecreasing along each row
    counts = np.array([np.searchsorted(removed[i], theta, side="right") for i in range(l)])
    counts = np.maximum(counts, 1)
    s_k = prefix[np.arange(l), counts - 1]
    mu = (s_k - theta) / counts
    dead = prefix[:, -1] <= theta
    mu[dead] = 0.0
    return np.maximum(mu, 0.0), counts, dead


def proj_l1inf(V, eta: float, tol: float = 1e-9, max_iter: int | None = None) -> np.ndarray:
    """Project onto {W : sum_i max_j |w_ij| <= eta} by an active-set Newton method.

    The dual variable ``theta`` (mass removed from each live row) is the root of
    the convex, decreasing, piecewise-linear map ``theta -> sum_i mu_i(theta) - eta``.
    Newton steps from ``theta = 0`` use the current active set (live rows and
    their clipped-entry counts) and approach the root from below, so the
    active set only shrinks.
    """
    V = _as_matrix(V)
    dtype = _float_dtype(V)
    V64 = V.astype(np.float64)
    _check(V64, eta)
    A = np.abs(V64)
    if A.max(axis=1).sum() <= eta:
        return _cast_toward_zero(V64, dtype)
    if eta == 0:
        return np.zeros(V.shape, dtype=dtype)
    l, d = A.shape
    if max_iter is None:
        max_iter = 10 * l * d
    S = -np.sort(-A, axis=1)
    P = np.cumsum(S, axis=1)

    theta = 0.0
    for it in range(1, max_iter + 1):
        mu, counts, dead = _row_clip_levels(S, P, theta)
        live = ~dead
        if not live.any():  # eta is below rounding of the row norms
            break
        slope = (1.0 / counts[live]).sum()
        gap = mu[live].sum() - eta
        new_theta = theta + gap / slope
        converged = abs(new_theta - theta) <= tol * max(1.0, abs(theta))
        theta = new_theta
        if converged:
            break
    else:
        raise AlgorithmError(f"l1,inf active-set iteration did not converge after {max_iter} iterations", max_iter)

    mu, counts, dead = _row_clip_levels(S, P, theta)
    live = ~dead
    if live.any():
        # recompute theta exactly on the final active set
        inv = 1.0 / counts[live]
        s_k = P[np.arange(l), counts - 1][live]
        theta = ((s_k * inv).sum() - eta) / inv.sum()
        mu, _, dead = _row_clip_levels(S, P, theta)
    W = np.sign(V64) * np.minimum(A, mu[:, None])
    W[dead] = 0.0
    return _cast_toward_zero(W, dtype)


def project(V, eta: float, constraint: str) -> np.ndarray:
    if constraint == "l1":
        return proj_l1(V, eta)
    if constraint == "l11":
        return proj_l11(V, eta)
    if constraint == "l1inf":
        return proj_l1inf(V, eta)
    raise ValueError(f"unknown constraint {constraint!r}; expected one of {CONSTRAINTS}")


def norm(V, constraint: str) -> float:
    """The norm whose ball ``constraint`` projects onto."""
    A = np.abs(np.asarray(V, dtype=np.float64))
    if constraint in ("l1", "l11"):
        return float(A.sum())
    if constraint == "l1inf":
        return float(A.reshape(A.shape[0], -1).max(axis=1).sum())
    raise ValueError(f"unknown constraint {constraint!r}")


class WeightView:
    """Rows-by-columns view of a rank-4 weight tensor that aliases its storage.

    Row ``i`` holds the weights of slice ``w[i]`` in row-major order.
    """

    def __init__(self, weight: np.ndarray):
        if weight.ndim != 4:
            raise DimensionError(f"expected a rank-4 weight, got shape {weight.shape}")
        if not weight.flags.c_contiguous:
            raise DimensionError("weight must be C-contiguous to be viewed in place")
        self.weight = weight
        self.matrix = weight.reshape(weight.shape[0], -1)
        assert np.shares_memory(self.matrix, weight)

    @property
    def shape(self):
        return self.matrix.shape

    def assign(self, values: np.ndarray) -> None:
        self.matrix[...] = values

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)


def flatten_weight(weight) -> WeightView:
    if isinstance(weight, Tensor):
        weight = weight.data
    return WeightView(weight)


def project_weights_(weights: list[np.ndarray], eta: float, constraint: str, mode: str = "layer") -> None:
    """Project conv weights in place.

    ``mode="layer"`` projects each tensor onto its own ball of radius ``eta``;
    ``mode="global"`` projects the row-stack of all tensors onto one ball.
    """
    views = [flatten_weight(w) for w in weights]
    if mode == "layer":
        for v in views:
            v.assign(project(v.matrix, eta, constraint))
        return
    if mode != "global":
        raise ValueError(f"unknown projection mode {mode!r}")
    if math.isinf(eta):
        return
    if constraint == "l1":
        flat = np.concatenate([v.matrix.ravel() for v in views])
        out = proj_l1(flat, eta)
        pos = 0
        for v in views:
            n = v.matrix.size
            v.assign(_cast_toward_zero(out[pos : pos + n].reshape(v.shape), v.matrix.dtype))
            pos += n
        return
    # row-structured balls: pad rows to a common width with zeros, which
    # changes neither row l1 norms nor row maxima
    width = max(v.shape[1] for v in views)
    stacked = np.zeros((sum(v.shape[0] for v in views), width), dtype=np.float64)
    pos = 0
    for v in views:
        stacked[pos : pos + v.shape[0], : v.shape[1]] = v.matrix
        pos += v.shape[0]
    out = project(stacked, eta, constraint)
    pos = 0
    for v in views:
        v.assign(_cast_toward_zero(out[pos : pos + v.shape[0], : v.shape[1]], v.matrix.dtype))
        pos += v.shape[0]


def sparsity(weights: Iterable) -> float:
    """Fraction of exactly-zero entries across ``weights``."""
    arrays = [w.data if isinstance(w, Tensor) else np.asarray(w) for w in weights]
    if not arrays:
        raise ValueError("sparsity of an empty weight set is undefined")
    total = sum(a.size for a in arrays)
    zeros = sum(int(np.count_nonzero(a == 0)) for a in arrays)
    return zeros / total
