"""Dense tensors with a small reverse-mode autodiff engine.

Every op records a closure that pushes the upstream gradient into its
inputs.  The graph is rebuilt on each forward call; ``backward`` walks it
once in reverse topological order.  Leading batch axes are supported where
the model needs them (attention works on ``(B, heads, n, d)`` blocks).
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, DimensionError, StateError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference).  Thread-local."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


class Param(Tensor):
    """Trainable leaf: value plus a gradient buffer of identical shape."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.zero_grad()

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    # python scalars adopt the tensor's dtype so float32 graphs stay float32
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        a = as_tensor(a)
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(a, (int, float)) and not isinstance(b, (int, float)):
        b = as_tensor(b)
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _make(data, parents, backward_fn) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``."""
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise StateError("backward called on a node with no recorded forward graph")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

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

    # intermediate grads are transient; leaves accumulate
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    on = x.data > 0

    def bw(g):
        _accum(x, g * on)

    return _make(np.where(on, x.data, 0).astype(x.dtype, copy=False), (x,), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, 2.0 * x.data * g)

    return _make(x.data * x.data, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean()), (x,), bw)


# ------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), bw)


def take_rows(table: Tensor, idx) -> Tensor:
    """``table[idx]`` for an integer index array (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
            _accum(table, full)

    return _make(table.data[idx], (table,), bw)


# -------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def einsum2(spec: str, a, b) -> Tensor:
    """Two-operand einsum.  Every index of each operand must survive in the
    output or the other operand (true for the attention contractions)."""
    a, b = _pair(a, b)
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    if not (set(sa) <= set(out) | set(sb) and set(sb) <= set(out) | set(sa)):
        raise ContractError(f"einsum2 cannot differentiate {spec!r}")

    def bw(g):
        if a.requires_grad:
            _accum(a, np.einsum(f"{out},{sb}->{sa}", g, b.data))
        if b.requires_grad:
            _accum(b, np.einsum(f"{out},{sa}->{sb}", g, a.data))

    return _make(np.einsum(spec, a.data, b.data), (a, b), bw)


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"affine shapes disagree: x{x.shape} W{W.shape} b{b.shape}")
    return add(matmul(x, W), b)


# ------------------------------------------------------------- normalisation

def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x, mask=None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (bool, broadcastable) marks
    allowed entries; disallowed ones get probability exactly 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, z.shape).any(axis=-1).all():
            raise ContractError("softmax row with every entry disallowed")
        z = np.where(mask, z, -np.inf)
    p = _softmax_np(z)

    def bw(g):
        _accum(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets, ignore=()) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-ignored positions.

    ``logits`` is ``(..., V)``; ``targets`` has the leading shape.  Any
    target found in ``ignore`` contributes nothing.
    """
    logits = as_tensor(logits)
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.intp).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"{t.shape[0]} targets for {z.shape[0]} logit rows")
    keep = ~np.isin(t, list(ignore)) if ignore else np.ones_like(t, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise ContractError("cross_entropy with no supervised positions")
    rows = np.nonzero(keep)[0]
    tk = t[rows]
    if tk.min() < 0 or tk.max() >= V:
        raise ContractError("target index outside vocabulary")
    lp = log_softmax_np(z[rows])
    loss = -lp[np.arange(n), tk].sum() / n

    def bw(g):
        gz = np.exp(lp)
        gz[np.arange(n), tk] -= 1.0
        full = np.zeros_like(z)
        full[rows] = gz * (g / n)
        _accum(logits, full.reshape(logits.shape))

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw)


# ---------------------------------------------------------------- optimiser

class Adam:
    """Adaptive-moment optimiser over a name -> Param mapping."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.98), eps=1e-9):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        out = {"t": np.asarray(self.t)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(state[f"v/{k}"], dtype=self.params[k].data.dtype)
