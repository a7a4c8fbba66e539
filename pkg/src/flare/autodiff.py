"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps an ndarray and records the operation that produced
it. Calling ``backward()`` on a scalar loss walks the tape in reverse
topological order and accumulates gradients into every tensor with
``requires_grad``. Backward closures are only created when some input
requires grad, so inference-time forwards carry no tape overhead.

Gradient arrays are never mutated in place: accumulation always rebinds
``t.grad``. Backward closures may therefore hand the same array to several
parents.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_np(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- backprop ----------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _accum(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce gradient ``g`` down to ``shape`` (inverse of broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _link(out: Tensor, parents: tuple[Tensor, ...], bw) -> Tensor:
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bw
    return out


# ---------------------------------------------------------------- arith --


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _link(out, (a, b), bw)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        out = Tensor(a.data * b)

        def bw_scalar(g):
            _accum(a, g * b)

        return _link(out, (a,), bw_scalar)
    a = _as_tensor(a)
    b = _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _link(out, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    out = Tensor(a.data / b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _link(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _link(out, (a, b), bw)


def square(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * a.data)

    def bw(g):
        _accum(a, 2.0 * g * a.data)

    return _link(out, (a,), bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)

    def bw(g):
        _accum(a, 0.5 * g / y)

    return _link(out, (a,), bw)


def clamp_min(a, lo: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, lo))
    mask = a.data >= lo

    def bw(g):
        _accum(a, g * mask)

    return _link(out, (a,), bw)


# ---------------------------------------------------------------- shape --


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _link(out, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = Tensor(a.data.transpose(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _link(out, (a,), bw)


def getitem(a, idx) -> Tensor:
    """Basic (slice / integer) indexing. Each source element is selected at
    most once, so the backward scatter is a plain in-place add."""
    a = _as_tensor(a)
    out = Tensor(a.data[idx])

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[idx] += g
        _accum(a, buf)

    return _link(out, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accum(t, g[tuple(sl)])

    return _link(out, tuple(tensors), bw)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _link(out, (a,), bw)


# ----------------------------------------------------------- reductions --


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False))

    return _link(out, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    scale = a.data.size / out.data.size

    def bw(g):
        gg = g / scale
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False))

    return _link(out, (a,), bw)


# -------------------------------------------------------------- kernels --


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(kernels.gelu_fwd(a.data))

    def bw(g):
        _accum(a, kernels.gelu_bwd(g, a.data))

    return _link(out, (a,), bw)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    d = a.data.shape[-1]
    y2 = kernels.softmax_fwd(np.ascontiguousarray(a.data.reshape(-1, d)))
    out = Tensor(y2.reshape(a.data.shape))

    def bw(g):
        dx2 = kernels.softmax_bwd(np.ascontiguousarray(g.reshape(-1, d)), y2)
        _accum(a, dx2.reshape(a.data.shape))

    return _link(out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layernorm over the last axis of ``x`` with per-feature scale and shift."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    d = x.data.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y2, mu, rstd = kernels.layernorm_fwd(x2, gamma.data, beta.data, eps)
    out = Tensor(y2.reshape(x.data.shape))

    def bw(g):
        dx2, dgamma, dbeta = kernels.layernorm_bwd(
            np.ascontiguousarray(g.reshape(-1, d)), x2, gamma.data, mu, rstd
        )
        if x.requires_grad:
            _accum(x, dx2.reshape(x.data.shape))
        if gamma.requires_grad:
            _accum(gamma, dgamma)
        if beta.requires_grad:
            _accum(beta, dbeta)

    return _link(out, (x, gamma, beta), bw)


def embedding(table, idx: np.ndarray) -> Tensor:
    """Row gather ``table[idx]`` with scatter-add backward."""
    table = _as_tensor(table)
    idx = np.asarray(idx)
    out = Tensor(table.data[idx])

    def bw(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        _accum(table, buf)

    return _link(out, (table,), bw)
