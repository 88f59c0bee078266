"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that maps the output gradient to input gradients. The graph
is walked once by :func:`backward` and then released.

Matmuls report ``2 * M * K * P`` FLOPs (times any batch extent) to whichever
counters are active; see :mod:`adavid.flops`.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf


class RejectedInput(ValueError):
    """Raised when an operation is handed arguments outside its contract."""


_GRAD_ENABLED = True
_COUNTERS: list = []
_SCOPE: list[str] = []


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def flop_scope(name: str):
    """Tag matmuls issued inside the block; nests as ``outer/inner``."""
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def _record(kind: str, flops: int) -> None:
    if _COUNTERS:
        path = "/".join(_SCOPE)
        for c in _COUNTERS:
            c.record(kind, path, flops)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ----------------------------------------------------------- operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _elementwise(n: int) -> None:
    if _COUNTERS:
        _record("elementwise", int(n))


# ------------------------------------------------------------------ arithmetic
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _elementwise(out.size)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _elementwise(out.size)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _elementwise(out.size)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    _elementwise(out.size)

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), back)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    _elementwise(out.size)
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _elementwise(out.size)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    _elementwise(out.size)
    return _node(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    _elementwise(out.size)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise RejectedInput(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise RejectedInput(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one GEMM over all leading rows instead of a loop over the batch
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data
    if _COUNTERS:
        m, k, p = a.shape[-2], a.shape[-1], b.shape[-1]
        batch = math.prod(out.shape[:-2])
        _record("matmul", 2 * batch * m * k * p)

    def back(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            return ga, a2.T @ g2
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), back)


# ---------------------------------------------------------------- reductions
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), back)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else math.prod(
        a.shape[i] for i in np.atleast_1d(axis))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -------------------------------------------------------------------- shaping
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _node(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = np.broadcast_to(a.data, shape)
    return _node(out, (a,), lambda g: (_unbroadcast(g, old),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    # contiguous copy: downstream matmuls see the same memory layout as a
    # materialised sub-tensor would
    out = np.ascontiguousarray(a.data[idx])
    shape = a.shape
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(out, (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), back)


def pad_last(a: Tensor, width: int) -> Tensor:
    """Zero-pad the last axis up to ``width`` channels."""
    k = a.shape[-1]
    if width < k:
        raise RejectedInput(f"cannot pad {k} channels down to {width}")
    if width == k:
        return a
    pad = [(0, 0)] * (a.ndim - 1) + [(0, width - k)]
    out = np.pad(a.data, pad)
    return _node(out, (a,), lambda g: (np.ascontiguousarray(g[..., :k]),))


# -------------------------------------------------------------- nonlinearity
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf
    _elementwise(out.size)

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(out, (a,), back)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted."""
    x = a.data
    if not np.all(np.isfinite(x)):
        raise RejectedInput("softmax input contains non-finite values")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    _elementwise(3 * out.size)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise RejectedInput("log_softmax input contains non-finite values")
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    _elementwise(3 * out.size)

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), back)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    _elementwise(5 * out.size)

    def back(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gg, gb

    return _node(out, (a, gamma, beta), back)


def l2_normalize(a: Tensor, axis: int = -1, min_norm: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm < min_norm):
        raise RejectedInput("degenerate norm: cannot normalise a (near-)zero vector")
    return a / sqrt(tsum(a * a, axis=axis, keepdims=True))


# ------------------------------------------------------------------ backward
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that needs it.

    The recorded graph is released afterwards.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise RejectedInput(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    for node in order:
        node._parents = ()
        node._backward = None


Tensor.backward = backward


# ---------------------------------------------------------------- grad check
def grad_check(f, params, step: float = 1e-5, max_entries: int | None = None,
               seed: int = 0, floor: float = 1e-6) -> float:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Returns the maximum over parameter tensors of
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` with norms
    taken over the checked entries of each tensor. The floor keeps tensors
    whose exact gradient is zero (an attention key bias, for one) from
    turning central-difference roundoff into a large relative error. ``max_entries`` caps the
    number of entries probed per tensor (chosen deterministically from
    ``seed``).
    """
    if step <= 0:
        raise RejectedInput("step must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    with no_grad():
        again = f().item()
    if again != loss.item():
        raise RuntimeError("grad_check: f is not deterministic "
                           f"({loss.item()!r} vs {again!r})")
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * step)
        a = analytic.reshape(-1)[idx]
        err = np.linalg.norm(a - numeric) / max(
            np.linalg.norm(a), np.linalg.norm(numeric), floor)
        worst = max(worst, float(err))
    for p in params:
        p.grad = None
    return worst
