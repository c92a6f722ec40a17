"""Dense float32 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation on gradient-requiring tensors records a node
holding its inputs and a local backward rule. `Tensor.backward()` rebuilds
the tape by topological sort and walks it once in reverse. The op set is
exactly what the model needs: matmul, masked softmax, RMS normalization,
elementwise arithmetic, activations, reductions, shape moves, embedding
lookup, and stop-gradient.

All model tensors are float32. Ops preserve dtype, and float64 payloads are
accepted so the finite-difference oracle can evaluate functions at full
precision; scalar schedule math elsewhere stays in float64.
"""

from __future__ import annotations

from contextlib import contextmanager, nullcontext

import numpy as np

RMS_NORM_EPS = 1e-6

_grad_enabled = True


def single_thread_blas():
    """Context limiting BLAS pools to one thread.

    The matrices here are small enough that thread fan-out costs more than
    it saves; falls back to a no-op when threadpoolctl is unavailable.
    """
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except Exception:
        return nullcontext()


@contextmanager
def no_grad():
    """Disable graph recording (used during sampling and evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    """One recorded operation: parent tensors plus a rule mapping the output
    gradient to per-parent gradients (None for parents not requiring grad)."""

    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values in tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, node: _Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = node is not None
        t.grad = None
        t._node = node
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, None)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

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

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self, grad: np.ndarray | None = None):
        """Reverse-mode pass from this tensor. Accumulates into `.grad` of
        every tensor in the graph that requires grad."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        # topological order of recorded operations: inputs precede outputs
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._node.parents:
                if p._node is not None and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        # each recorded op visited exactly once, in reverse topological order
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
            parent_grads = t._node.backward(g)
            for p, pg in zip(t._node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    # leaf: accumulate directly
                    p.grad = pg if p.grad is None else p.grad + pg
                else:
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else prev + pg
        # self may itself be a leaf
        if self._node is None and self.requires_grad:
            self.grad = grad if self.grad is None else self.grad + grad


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return Tensor._from_op(arr, None)


def _record(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor._from_op(data, _Node(parents, backward))
    return Tensor._from_op(data, None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting; gradients unbroadcast)

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _coerce(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (no gradient to the scalar)."""
    a = _coerce(a)
    c = a.data.dtype.type(s)
    return _record(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                # 2-D weight under batched inputs: one flattened GEMM beats
                # per-batch outer products plus a reduction
                k = a.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# shape moves

def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _record(out, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _coerce(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(a.shape, dtype=a.data.dtype)
        full[idx] = g
        return (full,)

    return _record(np.ascontiguousarray(a.data[idx]), (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    axes = _axis_tuple(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    inv = a.data.dtype.type(1.0 / count)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, a.shape).copy(),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# activations

def silu(a) -> Tensor:
    a = _coerce(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return _record(out, (a,),
                   lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximation GELU."""
    a = _coerce(a)
    x = a.data
    inner = (_GELU_C * (x + 0.044715 * x ** 3)).astype(x.dtype)
    th = np.tanh(inner)
    out = (0.5 * x * (1.0 + th)).astype(x.dtype)

    def backward(g):
        sech2 = 1.0 - th * th
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return ((g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * dinner)).astype(x.dtype),)

    return _record(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# normalization, attention softmax, lookup, stop-gradient

def rms_norm(x, gain) -> Tensor:
    """y = gain * x / sqrt(mean(x^2, last axis) + eps)."""
    x, gain = _coerce(x), _coerce(gain)
    d = x.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True) + RMS_NORM_EPS
    r = np.sqrt(ms)
    xn = x.data / r
    out = gain.data * xn

    def backward(g):
        gx = ggain = None
        if x.requires_grad:
            gg = g * gain.data
            dot = np.sum(gg * x.data, axis=-1, keepdims=True)
            gx = gg / r - x.data * dot / (d * r ** 3)
        if gain.requires_grad:
            ggain = _unbroadcast(g * xn, gain.shape)
        return gx, ggain

    return _record(out, (x, gain), backward)


def softmax_masked(logits, mask=None) -> Tensor:
    """Row softmax over the last axis restricted to mask==True positions.

    Masked positions get probability exactly 0 and contribute nothing to the
    row max or normalizer, so rows are bitwise independent of masked logits.
    mask=None means every position is attendable (plain stable softmax).
    """
    logits = _coerce(logits)
    if mask is None:
        x = logits.data
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        mask_b = np.broadcast_to(mask, logits.shape)
        if not mask_b.any(axis=-1).all():
            raise ValueError("softmax_masked: a row is fully masked")
        neg = np.where(mask_b, logits.data, -np.inf)
        m = neg.max(axis=-1, keepdims=True)
        e = np.exp(neg - m)
        p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record(p, (logits,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup; backward scatter-adds into the table."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding ids out of range")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros(table.shape, dtype=table.data.dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(np.ascontiguousarray(out), (table,), backward)


def stop_gradient(a) -> Tensor:
    """Forward identity; no backward rule is recorded."""
    a = _coerce(a)
    return Tensor._from_op(a.data, None)


# ---------------------------------------------------------------------------
# finite-difference oracle

def grad_check(f, x: Tensor, h: float = 1e-3) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    f must map a Tensor to a scalar Tensor and be twice differentiable at x.
    The analytic gradient is computed at the tensor's own precision; the
    central differences are evaluated at float64 so the oracle's own noise
    stays below the tolerance being checked.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError("step size h must lie in [1e-4, 1e-2]")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    y = f(leaf)
    if y.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise ValueError("non-finite function value at x")
    y.backward()
    analytic = leaf.grad.astype(np.float64).ravel()

    flat = x.data.astype(np.float64).ravel()
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("non-finite function value during finite differences")
        numeric[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
