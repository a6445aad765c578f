"""Dense numpy-backed tensors with a reverse-mode tape.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs is tracked (a ``requires_grad`` leaf, or the output of a node on
that tape).  Nodes are appended in creation order, which is a topological
order, so the backward sweep is a single reversed pass over the tape.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> loss.backward()
    >>> w.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

from contextlib import contextmanager
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float64
_local = threading.local()


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes."""


class ParameterError(ValueError):
    """Raised on an out-of-range operation parameter."""


class UsageError(RuntimeError):
    """Raised when the tape is used incorrectly."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _stack() -> list:
    st = getattr(_local, "tapes", None)
    if st is None:
        st = _local.tapes = []
    return st


def current_tape() -> Optional["Tape"]:
    st = _stack()
    return st[-1] if st else None


@contextmanager
def no_grad():
    """Suspend recording: ops inside the block never touch any tape."""
    st = _stack()
    st.append(None)
    try:
        yield
    finally:
        st.pop()


class Node:
    __slots__ = ("inputs", "backward", "tape")

    def __init__(self, inputs, backward, tape):
        self.inputs = inputs
        self.backward = backward
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations.

    Tapes are thread-local; ops only record onto the tape on top of the
    calling thread's stack.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if not st or st[-1] is not self:
            raise UsageError("tape stack corrupted")
        st.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, t: "Tensor") -> bool:
        node = t._node
        if node is not None:
            return node.tape is self
        return t.requires_grad

    def _key(self, t: "Tensor"):
        node = t._node
        return node if node is not None and node.tape is self else t

    def _propagate(self, output: "Tensor", seed: np.ndarray, keep=()) -> dict:
        if not self.tracks(output):
            raise UsageError("output is not recorded on this tape")
        keep = set(keep)
        grads = {self._key(output): seed}
        for node in reversed(self.nodes):
            g = grads.get(node)
            if g is None:
                continue
            if node not in keep:
                del grads[node]
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not self.tracks(inp):
                    continue
                k = self._key(inp)
                prev = grads.get(k)
                grads[k] = gi if prev is None else prev + gi
        return grads

    def backward(self, output: "Tensor", seed=None) -> None:
        """Accumulate d(output)/d(leaf) into the ``grad`` of every reachable leaf."""
        seed = _seed_for(output, seed)
        for k, g in self._propagate(output, seed).items():
            if isinstance(k, Tensor):
                k.grad = g.copy() if k.grad is None else k.grad + g

    def gradient(self, output: "Tensor", sources: Sequence["Tensor"], seed=None) -> list:
        """Vector-Jacobian product of ``output`` against each source.

        Unreachable sources get zero arrays.  Leaf ``grad`` buffers are left
        untouched.
        """
        seed = _seed_for(output, seed)
        keys = [self._key(s) for s in sources]
        grads = self._propagate(output, seed, keep=[k for k in keys if isinstance(k, Node)])
        out = []
        for s, k in zip(sources, keys):
            g = grads.get(k)
            out.append(np.zeros_like(s.data) if g is None else g)
        return out


def _seed_for(output: "Tensor", seed) -> np.ndarray:
    if seed is None:
        if output.data.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
        return np.ones_like(output.data)
    seed = np.asarray(seed, dtype=output.data.dtype)
    if seed.shape != output.shape:
        raise DimensionError(f"seed shape {seed.shape} != output shape {output.shape}")
    return seed


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _wrap(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> "Tensor":
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._node = None
    tape = current_tape()
    if tape is not None:
        for t in inputs:
            if tape.tracks(t):
                out._node = Node(inputs, backward, tape)
                tape.nodes.append(out._node)
                break
    return out


def record_op(data: np.ndarray, inputs: Sequence["Tensor"], backward: Callable) -> "Tensor":
    """Build a custom differentiable op.

    ``backward(g)`` receives the upstream gradient and returns one gradient
    (or None) per input.
    """
    return _make(np.asarray(data), tuple(inputs), backward)


class Tensor:
    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node: Optional[Node] = None

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_node(self) -> Optional[Node]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def backward(self, seed=None) -> None:
        if self._node is not None:
            self._node.tape.backward(self, seed)
        elif self.requires_grad:
            g = _seed_for(self, seed)
            self.grad = g.copy() if self.grad is None else self.grad + g
        else:
            raise UsageError("tensor is not recorded on any tape")

    # ---- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        a, b = self.shape, other.shape
        return _make(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        a, b = self.shape, other.shape
        return _make(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        x, y = self.data, other.data
        return _make(x * y, (self, other),
                     lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        x, y = self.data, other.data
        return _make(x / y, (self, other),
                     lambda g: (_unbroadcast(g / y, x.shape),
                                _unbroadcast(-g * x / (y * y), y.shape)))

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise UsageError("only scalar exponents are supported")
        x = self.data
        return _make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_wrap(other), self)

    def __getitem__(self, idx):
        x = self.data
        if isinstance(idx, Tensor):
            idx = idx.data.astype(int)

        def back(g):
            out = np.zeros_like(x)
            np.add.at(out, idx, g)
            return (out,)

        return _make(x[idx], (self,), back)

    # ---- reductions and shape -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def flatten_batch(self):
        return self.reshape(self.shape[0], -1)

    # ---- elementwise ---------------------------------------------------
    def exp(self):
        y = np.exp(self.data)
        return _make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return _make(np.log(x), (self,), lambda g: (g / x,))

    def sin(self):
        x = self.data
        return _make(np.sin(x), (self,), lambda g: (g * np.cos(x),))

    def cos(self):
        x = self.data
        return _make(np.cos(x), (self,), lambda g: (-g * np.sin(x),))

    def sqrt(self):
        y = np.sqrt(self.data)
        return _make(y, (self,), lambda g: (0.5 * g / y,))

    def tanh(self):
        y = np.tanh(self.data)
        return _make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def relu(self):
        m = self.data > 0
        return _make(self.data * m, (self,), lambda g: (g * m,))


# ---- module-level ops -------------------------------------------------

def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return _make(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def relu(x: Tensor) -> Tensor:
    return _wrap(x).relu()


def tanh(x: Tensor) -> Tensor:
    return _wrap(x).tanh()


def exp(x: Tensor) -> Tensor:
    return _wrap(x).exp()


def sin(x: Tensor) -> Tensor:
    return _wrap(x).sin()


def cos(x: Tensor) -> Tensor:
    return _wrap(x).cos()


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = _wrap(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), back)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def group_norm(x: Tensor, groups: int, weight: Optional[Tensor] = None,
               bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """Group normalization over (channels-in-group, spatial...) of an (n, c, ...) tensor."""
    x = _wrap(x)
    n, c = x.shape[:2]
    if groups <= 0 or c % groups:
        raise DimensionError(f"{groups} groups do not divide {c} channels")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = (xg - mu) * inv
    shape = x.shape

    def back(g):
        g = g.reshape(n, groups, -1)
        dx = inv * (g - g.mean(axis=2, keepdims=True)
                    - xhat * (g * xhat).mean(axis=2, keepdims=True))
        return (dx.reshape(shape),)

    out = _make(xhat.reshape(shape), (x,), back)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if weight is not None:
        out = out * weight.reshape(bshape)
    if bias is not None:
        out = out + bias.reshape(bshape)
    return out


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    if stride < 1 or padding < 0:
        raise ParameterError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise DimensionError(f"stride {stride} does not tile padded input {hp}x{wp} with kernel {kh}x{kw}")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an (n, c_in, h, w) input via im2col."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"kernel expects {ck} input channels, got {c}")
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    kd = kernel.data
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def back(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, kd, axes=([1], [0]))  # (n, oh, ow, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gk

    y = _make(np.ascontiguousarray(out), (x, kernel), back)
    if bias is not None:
        y = y + _wrap(bias).reshape(1, o, 1, 1)
    return y


def conv2d_direct(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Nested-loop cross-correlation; no tape, used as the reference path."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for k in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ch, i * stride + u, j * stride + v] * kernel[k, ch, u, v]
                    out[b, k, i, j] = acc
    return out


def variational_dropout_mask(channels: int, rate: float, rng: np.random.Generator,
                             batch: int = 1, spatial_dims: int = 2) -> Tensor:
    """Channel-wise inverted-dropout mask of shape (batch, channels, 1, ...).

    Sample once per forward pass and multiply into every dynamics evaluation.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    shape = (batch, channels) + (1,) * spatial_dims
    if rate == 0.0:
        return Tensor(np.ones(shape))
    keep = rng.random(shape) >= rate
    return Tensor(keep / (1.0 - rate))
