"""Reverse-mode automatic differentiation over dense float64 numpy buffers.

A Tensor wraps an ndarray plus an optional backward closure. Ops build the
graph eagerly; backward() walks it once in reverse topological order and
accumulates gradients into leaves that were created with requires_grad=True.
Everything is float64 and row-major. Broadcasting is deliberately narrow:
an elementwise op accepts two operands of identical shape, or a trailing-axis
vector against a matrix (bias addition), or a python scalar.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that suppresses graph construction.

    Ops executed inside run on raw arrays only; their outputs are constants
    with no parents, so nothing inside can be differentiated.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; scalars are fine, arrays must come pre-wrapped
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub_from(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    The loss must be scalar-shaped. Repeated calls keep accumulating; callers
    reset with zero_grad between steps.
    """
    if loss.data.size != 1:
        raise ValueError(
            f"backward() needs a scalar loss, got shape {loss.data.shape}"
        )

    # iterative post-order walk; recursion would blow the stack on big graphs
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                held = grads.get(key)
                grads[key] = pg if held is None else held + pg
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity whose output is detached from the graph."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _coerce(other):
    if isinstance(other, Tensor):
        return other
    if isinstance(other, (int, float, np.floating, np.integer)):
        return float(other)
    raise TypeError(f"expected Tensor or scalar, got {type(other).__name__}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the leading axes broadcast against `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, label: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise ValueError(f"{label}: shapes {a.shape} and {b.shape} do not align")


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if isinstance(b, float):
        def vjp_s(g):
            return (g,)

        return _make(a.data + b, (a,), vjp_s)
    _check_broadcast(a.data, b.data, "add")
    data = a.data + b.data

    def vjp(g):
        return (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape))

    return _make(data, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if isinstance(b, float):
        return add(a, -b)
    _check_broadcast(a.data, b.data, "sub")
    data = a.data - b.data

    def vjp(g):
        return (_reduce_to(g, a.data.shape), -_reduce_to(g, b.data.shape))

    return _make(data, (a, b), vjp)


def sub_from(a, b: Tensor) -> Tensor:
    """a - b where a is a python scalar."""
    a = float(a)
    data = a - b.data

    def vjp(g):
        return (-g,)

    return _make(data, (b,), vjp)


def neg(x: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _make(-x.data, (x,), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if isinstance(b, float):
        def vjp_s(g, _b=b):
            return (g * _b,)

        return _make(a.data * b, (a,), vjp_s)
    _check_broadcast(a.data, b.data, "mul")
    data = a.data * b.data

    def vjp(g):
        return (
            _reduce_to(g * b.data, a.data.shape),
            _reduce_to(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), vjp)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if isinstance(b, float):
        return mul(a, 1.0 / b)
    _check_broadcast(a.data, b.data, "div")
    if np.any(b.data == 0.0):
        raise FloatingPointError("div: divisor contains zero")
    inv = 1.0 / b.data
    data = a.data * inv

    def vjp(g):
        return (
            _reduce_to(g * inv, a.data.shape),
            _reduce_to(-g * data * inv, b.data.shape),
        )

    return _make(data, (a, b), vjp)


def square(x: Tensor) -> Tensor:
    def vjp(g):
        return (g * (2.0 * x.data),)

    return _make(x.data * x.data, (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise FloatingPointError("sqrt of negative value")
    data = np.sqrt(x.data)

    def vjp(g):
        return (g * (0.5 / data),)

    return _make(data, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def vjp(g):
        return (g * data,)

    return _make(data, (x,), vjp)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise FloatingPointError("log of non-positive value")
    data = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _make(data, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    data = sigmoid_kernel(x.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _make(data, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def vjp(g):
        return (g * (x.data > 0.0),)

    return _make(data, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-function form, x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * phi

    def vjp(g):
        dens = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (phi + x.data * dens),)

    return _make(data, (x,), vjp)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the interior."""
    data = np.clip(x.data, lo, hi)

    def vjp(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return _make(data, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions

def tsum(x: Tensor, axis=None) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _make(data, (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]
    data = np.asarray(x.data.mean(axis=axis))

    def vjp(g):
        scaled = g / count
        if axis is None:
            return (np.broadcast_to(scaled, x.data.shape).copy(),)
        return (
            np.broadcast_to(np.expand_dims(scaled, axis), x.data.shape).copy(),
        )

    return _make(data, (x,), vjp)


# ---------------------------------------------------------------------------
# shape plumbing

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with b strictly 2-D; a may carry leading batch axes."""
    if b.data.ndim != 2:
        raise ValueError(f"matmul: right operand must be 2-D, got {b.data.shape}")
    if a.data.ndim < 1 or a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} do not align"
        )
    data = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T
        if a.data.ndim == 2:
            gb = a.data.T @ g
        else:
            axes = list(range(a.data.ndim - 1))
            gb = np.tensordot(a.data, g, axes=(axes, axes))
        return (ga, gb)

    return _make(data, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects 2-D, got {x.data.shape}")

    def vjp(g):
        return (g.T.copy(),)

    return _make(x.data.T.copy(), (x,), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b in one graph node; the hot path of every block."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(
            f"linear: shapes {x.data.shape} and {w.data.shape} do not align"
        )
    data = x.data @ w.data + b.data

    def vjp(g):
        gx = g @ w.data.T
        if x.data.ndim == 2:
            gw = x.data.T @ g
        else:
            axes = list(range(x.data.ndim - 1))
            gw = np.tensordot(x.data, g, axes=(axes, axes))
        gb = _reduce_to(g, b.data.shape)
        return (gx, gw, gb)

    return _make(data, (x, w, b), vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"gather_rows: id out of range for table of {table.data.shape[0]} rows"
        )
    data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, (table,), vjp)


def take(x: Tensor, index: int) -> Tensor:
    """Scalar pick from a 1-D tensor."""
    if x.data.ndim != 1:
        raise ValueError(f"take expects 1-D, got {x.data.shape}")
    index = int(index)
    if not 0 <= index < x.data.shape[0]:
        raise IndexError(f"take: index {index} out of range {x.data.shape[0]}")
    data = np.asarray(x.data[index])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make(data, (x,), vjp)


def row(x: Tensor, index: int) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"row expects 2-D, got {x.data.shape}")
    data = x.data[index].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make(data, (x,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    widths = {p.data.shape[-1] for p in parts}
    if len(widths) != 1:
        raise ValueError(f"concat_rows: mixed widths {sorted(widths)}")
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def vjp(g):
        out = []
        offset = 0
        for n in sizes:
            out.append(g[offset:offset + n])
            offset += n
        return tuple(out)

    return _make(data, tuple(parts), vjp)


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    for p in parts:
        if p.data.size != 1:
            raise ValueError(f"stack_scalars: non-scalar part {p.data.shape}")
    data = np.array([float(p.data) for p in parts])

    def vjp(g):
        return tuple(np.asarray(g[i]).reshape(p.data.shape)
                     for i, p in enumerate(parts))

    return _make(data, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# normalization and attention

def softmax_kernel(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid_kernel(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def layer_norm_kernel(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                      eps: float = 1e-5) -> np.ndarray:
    inv_d = 1.0 / x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) * inv_d
    centered = x - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * inv_d
    xhat = centered / np.sqrt(var + eps)
    return xhat * gain + bias


def gelu_kernel(x: np.ndarray) -> np.ndarray:
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax: non-finite input")
    data = softmax_kernel(x.data, axis=axis)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("log_softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(data, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"layer_norm: gain/bias must be ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    inv_d = 1.0 / d
    mu = x.data.sum(axis=-1, keepdims=True) * inv_d
    centered = x.data - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * inv_d
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gain.data
        m1 = gx_hat.sum(axis=-1, keepdims=True) * inv_d
        m2 = (gx_hat * xhat).sum(axis=-1, keepdims=True) * inv_d
        gx = inv_std * (gx_hat - m1 - xhat * m2)
        return (gx, ggain, gbias)

    return _make(data, (x, gain, bias), vjp)


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int):
    """Scaled-dot multi-head self attention core.

    q, k, v are (s, d); columns are split evenly across heads. Returns the
    merged (s, d) output plus the (heads, s, s) row-stochastic weights as a
    plain array for inspection.
    """
    s, d = q.data.shape
    if d % num_heads != 0:
        raise ValueError(f"attention: dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    scale = 1.0 / math.sqrt(dh)

    def split(arr):
        # (s, d) -> (heads, s, dh)
        return arr.reshape(s, num_heads, dh).transpose(1, 0, 2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("attention: non-finite scores")
    weights = softmax_kernel(scores, axis=-1)
    out_h = np.matmul(weights, vh)                      # (heads, s, dh)
    data = out_h.transpose(1, 0, 2).reshape(s, d)

    def vjp(g):
        g_h = g.reshape(s, num_heads, dh).transpose(1, 0, 2)
        g_w = np.matmul(g_h, vh.transpose(0, 2, 1))
        g_v = np.matmul(weights.transpose(0, 2, 1), g_h)
        dot = (g_w * weights).sum(axis=-1, keepdims=True)
        g_scores = weights * (g_w - dot)
        g_q = np.matmul(g_scores, kh) * scale
        g_k = np.matmul(g_scores.transpose(0, 2, 1), qh) * scale

        def merge(arr):
            return arr.transpose(1, 0, 2).reshape(s, d)

        return (merge(g_q), merge(g_k), merge(g_v))

    return _make(data, (q, k, v), vjp), weights


def attention_kernel(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                     num_heads: int) -> np.ndarray:
    """Batched no-graph twin of attention(); q, k, v are (B, s, d)."""
    bsz, s, d = q.shape
    dh = d // num_heads
    scale = 1.0 / math.sqrt(dh)

    def split(arr):
        return arr.reshape(bsz, s, num_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    weights = softmax_kernel(scores, axis=-1)
    out = np.matmul(weights, vh)
    return out.transpose(0, 2, 1, 3).reshape(bsz, s, d)
