"""Every differentiable op with a random-input generator, for gradient checks.

Each entry maps a name to ``(fn, make_inputs)``: ``make_inputs(rng)`` draws
shapes at random and returns a list of float64 arrays; ``fn`` builds the op
from Tensors.
"""

from __future__ import annotations

import numpy as np

from homoode import tensor as T


def _dims(rng, k, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=k))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _conv_inputs(rng, stride, padding, k):
    n, c, o = _dims(rng, 3, 1, 3)
    # sizes whose padded extent tiles exactly with the stride
    h, w = (k - 2 * padding + stride * int(rng.integers(0, 4)) for _ in range(2))
    return [rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)]


def _bcast_pair(rng):
    a = _dims(rng, 3)
    b = tuple(1 if rng.random() < 0.5 else d for d in a)
    return [rng.normal(size=a), rng.normal(size=b[1:])]


OPS = {
    "add": (lambda a, b: a + b, _bcast_pair),
    "sub": (lambda a, b: a - b, _bcast_pair),
    "mul": (lambda a, b: a * b, _bcast_pair),
    "div": (lambda a, b: a / b,
            lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(1, 4))]),
    "rsub": (lambda a: 2.0 - a, lambda r: [r.normal(size=_dims(r, 2))]),
    "rdiv": (lambda a: 1.5 / a, lambda r: [r.uniform(0.5, 2.0, size=_dims(r, 2))]),
    "neg": (lambda a: -a, lambda r: [r.normal(size=_dims(r, 2))]),
    "pow": (lambda a: a ** 2.5, lambda r: [r.uniform(0.5, 2.0, size=_dims(r, 2))]),
    "matmul": (lambda a, b: a @ b,
               lambda r: (lambda m, k, n: [r.normal(size=(m, k)), r.normal(size=(k, n))])(*_dims(r, 3))),
    "getitem_slice": (lambda a: a[1:, ::2], lambda r: [r.normal(size=(4, 5))]),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 2]), np.array([1, 0, 1])],
                      lambda r: [r.normal(size=(3, 3))]),
    "sum_axis": (lambda a: a.sum(axis=1), lambda r: [r.normal(size=_dims(r, 3))]),
    "sum_keepdims": (lambda a: a.sum(axis=(0, 2), keepdims=True), lambda r: [r.normal(size=_dims(r, 3))]),
    "mean": (lambda a: a.mean(axis=(1, 2)), lambda r: [r.normal(size=_dims(r, 3))]),
    "reshape": (lambda a: a.reshape(-1), lambda r: [r.normal(size=_dims(r, 3))]),
    "transpose": (lambda a: a.transpose(2, 0, 1), lambda r: [r.normal(size=_dims(r, 3))]),
    "T": (lambda a: a.T, lambda r: [r.normal(size=_dims(r, 2))]),
    "flatten_batch": (lambda a: a.flatten_batch(), lambda r: [r.normal(size=_dims(r, 4))]),
    "exp": (lambda a: a.exp(), lambda r: [r.normal(size=_dims(r, 2))]),
    "log": (lambda a: a.log(), lambda r: [r.uniform(0.5, 3.0, size=_dims(r, 2))]),
    "sin": (lambda a: a.sin(), lambda r: [r.normal(size=_dims(r, 2))]),
    "cos": (lambda a: a.cos(), lambda r: [r.normal(size=_dims(r, 2))]),
    "sqrt": (lambda a: a.sqrt(), lambda r: [r.uniform(0.5, 3.0, size=_dims(r, 2))]),
    "tanh": (lambda a: a.tanh(), lambda r: [r.normal(size=_dims(r, 2))]),
    "relu": (lambda a: a.relu(), lambda r: [_away_from_zero(r, _dims(r, 2))]),
    "softmax": (T.softmax, lambda r: [r.normal(size=_dims(r, 2, 2, 5))]),
    "log_softmax": (T.log_softmax, lambda r: [r.normal(size=_dims(r, 2, 2, 5))]),
    "concat": (lambda a, b: T.concat([a, b], axis=1),
               lambda r: [r.normal(size=(2, 3, 2)), r.normal(size=(2, 1, 2))]),
    "group_norm": (lambda x, w, b: T.group_norm(x, 2, w, b),
                   lambda r: [r.normal(size=(2, 4, 3, 3)), r.normal(size=4), r.normal(size=4)]),
    "conv2d": (lambda x, k, b: T.conv2d(x, k, b), lambda r: _conv_inputs(r, 1, 0, 3)),
    "conv2d_pad": (lambda x, k, b: T.conv2d(x, k, b, padding=1), lambda r: _conv_inputs(r, 1, 1, 3)),
    "conv2d_stride": (lambda x, k, b: T.conv2d(x, k, b, stride=2, padding=1),
                      lambda r: _conv_inputs(r, 2, 1, 4)),
}


def check_op(name: str, rng, eps: float = 1e-6):
    """Relative error between tape gradients and central differences for one op."""
    from oracles import central_diff, rel_err

    fn, make = OPS[name]
    arrays = make(rng)
    probe = rng.normal(size=fn(*[T.Tensor(a) for a in arrays]).shape)

    def scalar(*arrs):
        return float(np.sum(fn(*[T.Tensor(a) for a in arrs]).data * probe))

    with T.Tape() as tape:
        ts = [T.Tensor(a, requires_grad=True) for a in arrays]
        out = (fn(*ts) * T.Tensor(probe)).sum()
    grads = tape.gradient(out, ts)
    worst = 0.0
    for i, a in enumerate(arrays):
        def part(x, i=i):
            args = list(arrays)
            args[i] = x
            return scalar(*args)

        worst = max(worst, rel_err(grads[i], central_diff(part, a, eps)))
    return worst
