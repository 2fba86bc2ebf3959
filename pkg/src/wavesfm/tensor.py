"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps one float array plus an optional gradient accumulator.  Ops
record closures on their outputs; ``Tensor.backward`` topologically sorts
the recorded graph (iteratively, so deep ViT graphs cannot hit the Python
recursion limit) and runs the closures in reverse.  Gradients are never
mutated in place, only rebound, so views handed out by a backward closure
stay valid.

Only requires_grad lineage is recorded: an op whose inputs are all frozen
produces a constant, which keeps frozen-backbone fine-tuning cheap.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_FLOAT_TYPES = (np.float32, np.float64)
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        Repeated calls without zeroing accumulate.  Raises for non-scalar
        outputs and for (malformed) cyclic graphs.
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("output does not depend on any tracked tensor")

        # Iterative post-order DFS.  State 0 marks a node whose children are
        # still being explored; popping such a node unprocessed means it
        # reaches itself.
        topo = []
        state = {}
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                state[id(node)] = 1
                topo.append(node)
                continue
            st = state.get(id(node))
            if st == 1:
                continue
            if st == 0:
                raise RuntimeError("cycle in computation graph")
            state[id(node)] = 0
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and state.get(id(p)) != 1:
                    stack.append((p, False))

        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap2(a, b):
    """Wrap a binary-op operand pair; a bare Python scalar adopts the other
    side's dtype so fp32 graphs are not silently promoted to fp64."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return _wrap(a), _wrap(b)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over the axes numpy broadcast to reach its shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap2(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap2(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap2(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap2(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped below first and the
    gradient is zero on the clamped region (a subgradient choice)."""
    a = _wrap(a)
    if floor is None:
        x = a.data

        def backward(g):
            _accumulate(a, g / x)

    else:
        x = np.maximum(a.data, floor)
        live = a.data >= floor

        def backward(g):
            _accumulate(a, g * live / x)

    return _make(np.log(x), (a,), backward)


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF gelu, x * Phi(x)."""
    a = _wrap(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out_data = x * phi_cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accumulate(a, g * (phi_cdf + x * pdf))

    return _make(out_data, (a,), backward)


# -- shape ops ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    orig = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a, ), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    shape = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg / count, shape).copy())

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def concat_rows(tensors) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[0] for t in ts]

    def backward(g):
        off = 0
        for t, n in zip(ts, sizes):
            _accumulate(t, g[off:off + n])
            off += n

    return _make(np.concatenate([t.data for t in ts], axis=0), ts, backward)


def concat_cols(tensors) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[1] for t in ts]

    def backward(g):
        off = 0
        for t, n in zip(ts, sizes):
            _accumulate(t, g[:, off:off + n])
            off += n

    return _make(np.concatenate([t.data for t in ts], axis=1), ts, backward)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)

    def backward(g):
        z = np.zeros_like(a.data)
        z[start:stop] = g
        _accumulate(a, z)

    return _make(a.data[start:stop].copy(), (a,), backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)

    def backward(g):
        z = np.zeros_like(a.data)
        z[:, start:stop] = g
        _accumulate(a, z)

    return _make(a.data[:, start:stop].copy(), (a,), backward)


def gather_rows(a, index) -> Tensor:
    """Select rows by an integer index array; backward scatter-adds."""
    a = _wrap(a)
    idx = np.asarray(index, dtype=np.int64)

    def backward(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        _accumulate(a, z)

    return _make(a.data[idx].copy(), (a,), backward)


# -- fused neural-net ops ----------------------------------------------------


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with max subtraction; rejects NaN input."""
    a = _wrap(a)
    if np.isnan(a.data).any():
        raise ValueError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - inner) * out_data)

    return _make(out_data, (a,), backward)


def layer_norm(x, scale, shift, eps: float = 1e-6) -> Tensor:
    """Normalize each row of x to zero mean / unit variance, then affine."""
    x, scale, shift = _wrap(x), _wrap(scale), _wrap(shift)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * scale.data + shift.data

    def backward(g):
        if scale.requires_grad:
            _accumulate(scale, _unbroadcast(g * xhat, scale.data.shape))
        if shift.requires_grad:
            _accumulate(shift, _unbroadcast(g, shift.data.shape))
        if x.requires_grad:
            h = g * scale.data
            m1 = h.mean(axis=-1, keepdims=True)
            m2 = (h * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (h - m1 - xhat * m2) * inv)

    return _make(out_data, (x, scale, shift), backward)
