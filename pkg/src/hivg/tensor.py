"""Dense tensors with tape-based reverse-mode differentiation.

Every op records a node carrying a monotonically increasing sequence number,
the input tensors, and a closure mapping the output gradient to input
gradients. ``backward`` gathers the nodes reachable from a scalar loss into a
:class:`Tape` ordered by execution and replays it in reverse.
"""
from __future__ import annotations

import itertools
import logging
import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEBUG = os.environ.get("HIVG_DEBUG", "") not in ("", "0")


class NonFiniteError(FloatingPointError):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.counter = itertools.count()


_state = _State()


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Node:
    __slots__ = ("seq", "parents", "backward", "op")

    def __init__(self, parents: tuple, backward: Callable, op: str):
        self.seq = next(_state.counter)
        self.parents = parents
        self.backward = backward
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc" and dtype is None:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    # Python scalars adopt the dtype of the tensor operand.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if DEBUG:
        _check_finite(data, op)
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(parents, backward_fn, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------
class Tape:
    """Execution-ordered record of the ops reachable from an output tensor."""

    def __init__(self, nodes: list[tuple[Node, Tensor]]):
        self.entries = nodes

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        entries: list[tuple[Node, Tensor]] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            entries.append((t.node, t))
            stack.extend(t.node.parents)
        entries.sort(key=lambda e: e[0].seq)
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ops(self) -> list[str]:
        return [n.op for n, _ in self.entries]

    def replay_backward(self, root: Tensor, seed: np.ndarray) -> list[str]:
        grads: dict[int, np.ndarray] = {id(root): seed}
        visited = []
        for node, out in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            visited.append(node.op)
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.node is None:
                    if DEBUG:
                        _check_finite(pg, f"backward of {node.op}")
                    p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        return visited


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing was recorded on the tape")
    tape = Tape.collect(loss)
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return tape
    tape.replay_backward(loss, np.ones_like(loss.data))
    return tape


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def power(x: Tensor, p: float) -> Tensor:
    out = x.data**p
    return _make(out, (x,), lambda g: (g * p * x.data ** (p - 1),), "power")


def maximum(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return (
            _unbroadcast(np.where(pick_a, g, 0), a.shape) if a.requires_grad else None,
            _unbroadcast(np.where(pick_a, 0, g), b.shape) if b.requires_grad else None,
        )

    return _make(np.maximum(a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    pick_a = a.data <= b.data

    def bw(g):
        return (
            _unbroadcast(np.where(pick_a, g, 0), a.shape) if a.requires_grad else None,
            _unbroadcast(np.where(pick_a, 0, g), b.shape) if b.requires_grad else None,
        )

    return _make(np.minimum(a.data, b.data), (a, b), bw, "minimum")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Huber-style penalty: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    ax = np.abs(x.data)
    quad = ax < beta
    out = np.where(quad, 0.5 * x.data * x.data / beta, ax - 0.5 * beta)
    return _make(out, (x,), lambda g: (g * np.where(quad, x.data / beta, np.sign(x.data)),), "smooth_l1")


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def log_sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z)))
    return _make(out, (x,), lambda g: (g * (1 - _sigmoid_np(z)),), "log_sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    z = x.data
    c = z.dtype.type(_GELU_C)
    ck = z.dtype.type(_GELU_C * 0.044715)
    z2 = z * z
    # t = tanh(c z + c k z^3), computed with in-place temporaries (memory-bound op)
    t = z2 * ck
    t += c
    t *= z
    np.tanh(t, out=t)
    half = z.dtype.type(0.5)
    out = t + 1
    out *= z
    out *= half

    def bw(g):
        # d/dz = 0.5 (1 + t) + 0.5 z (1 - t^2) (c + 3 c k z^2)
        d = z2 * (3 * ck)
        d += c
        d *= z
        sech2 = t * t
        np.subtract(1, sech2, out=sech2)
        d *= sech2
        d += t
        d += 1
        d *= half
        d *= g
        return (d,)

    return _make(out, (x,), bw, "gelu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = gb = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    advanced = _has_advanced(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return _make(x.data[idx], (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) if t.requires_grad else None for i, t in enumerate(tensors))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to dimension {x.shape[axis]}")
    out = []
    start = 0
    ax = axis % x.ndim
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + s)
        out.append(getitem(x, tuple(sl)))
        start += s
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.size // max(np.asarray(out).size, 1)
    return _make(
        np.asarray(out),
        (x,),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / x.dtype.type(n),),
        "mean",
    )


# ---------------------------------------------------------------------------
# Normalization and attention building blocks
# ---------------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError(f"layernorm eps must be positive, got {eps}")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(f"layernorm gain/bias {gain.shape}/{bias.shape} do not match last dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw, "layernorm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit-norm rows; an all-zero slice maps to zero (and is logged in debug mode)."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    zero = norm == 0
    if DEBUG and np.any(zero):
        logger.warning("l2_normalize: %d zero-norm slice(s) mapped to zero", int(zero.sum()))
    safe = np.where(zero, 1, norm)
    y = np.where(zero, 0, x.data / safe)

    def bw(g):
        gx = (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe
        return (np.where(zero, 0, gx),)

    return _make(y, (x,), bw, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return sum_(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids, dtype=np.int64)

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------
def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``x``."""
    g = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    denom = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / denom)


def gradcheck(f: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients."""
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(f, t, h)))
    return worst
