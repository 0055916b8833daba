"""Random finite-difference cases for every differentiable op.

Each case builds float32 inputs, an analytic gradient through the tape, and
a central-difference gradient of ``sum(op(inputs) * R)`` evaluated in
float64 outside the package.
"""

import numpy as np

from scae import tensor as T
from scae.tensor import Tensor

from oracles import numeric_grad, rel_error

CASES_PER_OP = 100
MAX_REL_ERROR = 1e-3
# ops that are linear in each input have no truncation error, so a large
# step only shrinks the f32 rounding share of the quotient
LINEAR_STEP = 1e-1


def _away_from(x, points, margin):
    """Push entries of x that sit within ``margin`` of any point outward."""
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin)
    return x


def _check(op, arrays, h, wrt=None):
    """Worst relative error over the inputs listed in ``wrt`` (default: all)."""
    wrt = range(len(arrays)) if wrt is None else wrt
    with T.no_grad():
        probe = op(*[Tensor(a) for a in arrays])
    rng = np.random.default_rng(arrays[0].size)
    R = rng.standard_normal(probe.shape).astype(np.float32) if probe.ndim else np.float32(1.0)

    def f():
        with T.no_grad():
            out = op(*[Tensor(a) for a in arrays])
        return float((out.data.astype(np.float64) * R).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*leaves)
    loss = T.sum_all(T.mul(out, Tensor(R))) if out.ndim else T.mul(out, float(R))
    T.backward(loss)
    worst = 0.0
    for i in wrt:
        num = numeric_grad(f, arrays, i, h)
        worst = max(worst, rel_error(leaves[i].grad, num))
    return worst


def _shape(rng, ndim=2, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi, size=ndim))


def _randn(rng, shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def case_add(rng):
    s = _shape(rng)
    return _check(T.add, [_randn(rng, s), _randn(rng, s)], LINEAR_STEP)


def case_add_scalar(rng):
    c = float(rng.normal())
    return _check(lambda a: T.add(a, c), [_randn(rng, _shape(rng))], LINEAR_STEP)


def case_mul(rng):
    s = _shape(rng)
    return _check(T.mul, [_randn(rng, s), _randn(rng, s)], LINEAR_STEP)


def case_mul_scalar(rng):
    c = float(rng.normal())
    return _check(lambda a: T.mul(a, c), [_randn(rng, _shape(rng))], LINEAR_STEP)


def case_sum_all(rng):
    return _check(T.sum_all, [_randn(rng, _shape(rng, 3))], LINEAR_STEP)


def case_mean(rng):
    return _check(T.mean, [_randn(rng, _shape(rng, 3))], LINEAR_STEP)


def case_leaky_relu(rng):
    slope = float(rng.uniform(0, 0.5))
    x = _away_from(_randn(rng, _shape(rng)), [0.0], 0.05)
    return _check(lambda a: T.leaky_relu(a, slope), [x], 1e-2)


def case_sigmoid(rng):
    return _check(T.sigmoid, [_randn(rng, _shape(rng), 2.0)], 1e-2)


def case_clamp01(rng):
    x = _away_from(rng.uniform(-0.5, 1.5, _shape(rng)).astype(np.float32), [0.0, 1.0], 0.05)
    return _check(T.clamp01, [x], 1e-2)


def case_huber_loss(rng):
    beta = float(rng.uniform(0.3, 2.0))
    s = _shape(rng)
    target = _randn(rng, s)
    d = _away_from(_randn(rng, s, 1.5), [-beta, 0.0, beta], 0.05)
    pred = (target + d).astype(np.float32)
    return _check(lambda p, t: T.huber_loss(p, t, beta), [pred, target], 1e-2)


def case_quantize_ste(rng):
    # piecewise-constant forward: the analytic gradient must equal the
    # derivative of the clamp it stands in for
    levels = int(2 ** rng.integers(1, 6))
    z = _away_from(rng.uniform(-0.3, 1.3, _shape(rng)).astype(np.float32), [0.0, 1.0], 0.05)
    leaf = Tensor(z, requires_grad=True)
    R = rng.standard_normal(z.shape).astype(np.float32)
    T.backward(T.sum_all(T.mul(T.quantize_ste(leaf, levels), Tensor(R))))

    def f():
        with T.no_grad():
            return float((T.clamp01(Tensor(z)).data.astype(np.float64) * R).sum())

    return rel_error(leaf.grad, numeric_grad(f, [z], 0, 1e-2))


def case_entropy_surrogate(rng):
    levels = int(2 ** rng.integers(1, 4))
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    z = rng.uniform(0.0, 1.0, (n, c, 2, 2))
    # stay off the kinks of the triangular kernel (bin centers and the ends)
    u = z * levels - 0.5
    u = _away_from(u, list(np.arange(levels, dtype=np.float64)), 0.1)
    z = ((u + 0.5) / levels).astype(np.float32)
    return _check(lambda a: T.entropy_surrogate(a, levels), [z], 1e-2 / levels)


def _conv_dims(rng, transposed):
    n = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, k))
    size = int(rng.integers(max(k, 2), 7))
    x = _randn(rng, (n, cin, size, size))
    w = _randn(rng, (cin, cout, k, k) if transposed else (cout, cin, k, k))
    b = _randn(rng, (cout,))
    return x, w, b, s, p


def case_conv2d(rng):
    x, w, b, s, p = _conv_dims(rng, False)
    return _check(lambda a, ww, bb: T.conv2d(a, ww, bb, s, p), [x, w, b], LINEAR_STEP)


def case_conv_transpose2d(rng):
    x, w, b, s, p = _conv_dims(rng, True)
    if T.conv_transpose_output_size(x.shape[2], w.shape[2], s, p) < 1:
        p = 0
    return _check(lambda a, ww, bb: T.conv_transpose2d(a, ww, bb, s, p), [x, w, b], LINEAR_STEP)


CASES = {
    "add": case_add,
    "add_scalar": case_add_scalar,
    "mul": case_mul,
    "mul_scalar": case_mul_scalar,
    "sum_all": case_sum_all,
    "mean": case_mean,
    "leaky_relu": case_leaky_relu,
    "sigmoid": case_sigmoid,
    "clamp01": case_clamp01,
    "huber_loss": case_huber_loss,
    "quantize_ste": case_quantize_ste,
    "entropy_surrogate": case_entropy_surrogate,
    "conv2d": case_conv2d,
    "conv_transpose2d": case_conv_transpose2d,
}


def worst_error(name: str, cases: int = CASES_PER_OP, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    return max(CASES[name](rng) for _ in range(cases))
