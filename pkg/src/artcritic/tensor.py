"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable function below builds a fresh node that remembers its
operands and a backward rule. :func:`backward` walks the nodes reachable from
a scalar loss in reverse topological order and accumulates gradients into
leaf tensors that have ``requires_grad`` set.

Calling :func:`backward` twice on the same graph without clearing gradients
accumulates: every leaf gradient is exactly doubled. Use :func:`zero_grad`
between passes.

numpy is used purely as the array container and for the BLAS matmul kernel;
all derivative rules live in this module.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64

# tanh-approximation GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording graph nodes (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float64 array that may participate in a graph.

    ``grad`` is ``None`` until a backward pass reaches this tensor; frozen
    tensors (``requires_grad=False``) never receive one.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor / tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


def _not_scalar(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _node(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if need_a else None,
            _unbroadcast(g * ad, bd.shape) if need_b else None,
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes batch).

    A 2-D right operand is shared across the batch of the left operand.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def rule(g):
        ga = gb = None
        if bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            if need_a:
                ga = g @ bd.T
            if need_b:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
        if need_a:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if need_b:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), rule)


# ---------------------------------------------------------------- pointwise


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_A * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), rule)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,))


def tabs(a: Tensor) -> Tensor:
    """Absolute value; the derivative at exactly 0 is taken as 0."""
    x = a.data
    return _node(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return _node(x**p, (a,), lambda g: (g * p * x ** (p - 1),))


_ELEMENTWISE = {"add", "mul", "gelu", "sigmoid", "scale"}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch a pointwise op by name: add, mul, gelu, sigmoid or scale."""
    if kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    if kind == "gelu":
        return gelu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "scale":
        return scale(a, b)
    if isinstance(b, Tensor) and b.shape != a.shape and b.size != 1:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")
    return add(a, b) if kind == "add" else mul(a, b)


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=axis))

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    return _node(out, tensors, rule)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {weight.shape[0]})")
    wshape = weight.shape

    def rule(g):
        gw = np.zeros(wshape, dtype=DTYPE)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (gw,)

    return _node(weight.data[ids], (weight,), rule)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Pick one position per batch element: ``x[b, rows[b]]`` for x of shape (B, T, d)."""
    rows = np.asarray(rows, dtype=np.int64)
    batch = np.arange(x.shape[0])
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[batch, rows] = g
        return (gx,)

    return _node(x.data[batch, rows], (x,), rule)


# ---------------------------------------------------------------- normalisation / losses


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks allowed entries (broadcastable)."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (a,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with the population variance, then scale and shift."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm: last dimension is empty")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last dim {d}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    need_affine = gamma.requires_grad or beta.requires_grad

    def rule(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        if not need_affine:
            return gx, None, None
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _node(xhat * gd + beta.data, (x, gamma, beta), rule)


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ``ignore_index``.

    ``logits`` has shape (n, V) (leading axes are flattened); rows are shifted
    by their max before exponentiation.
    """
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"cross-entropy: {z.shape[0]} logit rows vs {t.shape[0]} targets")
    keep = t != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ContractError("cross-entropy: every position is ignored, mean is undefined")
    tk = t[keep]
    if tk.min() < 0 or tk.max() >= V:
        raise DimensionError(f"cross-entropy: target outside [0, {V})")
    zk = z[keep]
    shifted = zk - zk.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, tk]).sum() / n
    shape = logits.shape

    def rule(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, tk] -= 1.0
        full = np.zeros_like(z)
        full[keep] = p * (float(g) / n)
        return (full.reshape(shape),)

    return _node(np.asarray(loss), (logits,), rule)


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable trainable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps a tensor to a scalar tensor. The relative error of a component
    is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ContractError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(probe.data.copy())).item()
            flat[i] = orig - step
            fm = f(Tensor(probe.data.copy())).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
