"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every differentiable primitive builds its output through ``_node`` which
records the parents and a closure mapping the output gradient to one
gradient per parent.  ``backward`` topologically orders the recorded graph
from a scalar loss and replays the closures in reverse.

Tensors are capped at rank 3 (batch x time x dim).  Attention heads are
folded into the leading axis by ``split_heads`` so the cap holds inside
multi-head attention as well.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

MAX_RANK = 3
MASK_FILL = -1e30
LN_EPS = 1e-5

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class ContractError(ValueError):
    """A precondition of a primitive was violated."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the rank cap of {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        raise TypeError("use slice_time / concat; general indexing is not a recorded primitive")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _node(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, (x,), lambda g: (g * c,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _node(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ---------------------------------------------------------------------------
# linear algebra and data movement


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; a leading batch axis broadcasts."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _node(np.matmul(a.data, b.data), (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {x.shape}")
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (the time axis by default)."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat of an empty sequence")
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                out.append(g[tuple(idx)])
            else:
                out.append(None)
        return tuple(out)
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[p.shape for p in parts]}: {exc}") from None
    return _node(data, parts, bw)


def slice_time(x: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    """Contiguous slice ``[start, stop)`` along the time axis."""
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise DimensionError(f"slice [{start}, {stop}) out of range for axis of length {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(x.shape)
        full[idx] = g
        return (full,)
    return _node(x.data[idx], (x,), bw)


def expand(x: Tensor, batch: int) -> Tensor:
    """Repeat an unbatched tensor along a new leading batch axis."""
    data = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return _node(data, (x,), lambda g: (g.sum(axis=0),))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[L, H*dk] -> [H, L, dk]; [B, L, H*dk] -> [B*H, L, dk] (batch-major)."""
    *lead, L, d = x.shape
    if d % heads:
        raise DimensionError(f"model dim {d} not divisible by {heads} heads")
    dk = d // heads
    B = lead[0] if lead else 1
    data = x.data.reshape(B, L, heads, dk).transpose(0, 2, 1, 3).reshape(B * heads, L, dk)

    def bw(g):
        return (g.reshape(B, heads, L, dk).transpose(0, 2, 1, 3).reshape(x.shape),)
    return _node(data, (x,), bw)


def merge_heads(x: Tensor, heads: int, batched: bool) -> Tensor:
    """Inverse of ``split_heads``."""
    BH, L, dk = x.shape
    B = BH // heads
    shape = (B, L, heads * dk) if batched else (L, heads * dk)
    data = x.data.reshape(B, heads, L, dk).transpose(0, 2, 1, 3).reshape(shape)

    def bw(g):
        return (g.reshape(B, L, heads, dk).transpose(0, 2, 1, 3).reshape(x.shape),)
    return _node(data, (x,), bw)


# ---------------------------------------------------------------------------
# normalisation


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis; ``mask`` True marks allowed entries.

    Masked logits get an additive -1e30 before max subtraction, so their
    probability underflows to exactly 0.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.any(mask, axis=-1)):
            raise ContractError("softmax_rows: a row has no allowed position")
        z = z + np.where(mask, 0.0, MASK_FILL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
    return _node(p, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)
    return _node(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    n = x.shape[-1]
    if n < 2:
        raise ContractError("layer_norm needs at least 2 features")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs width {n}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb
    return _node(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# reverse pass


def tape(loss: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``loss`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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
    """Populate ``.grad`` of every requires_grad leaf with d loss / d leaf.

    Leaf gradients are overwritten, not accumulated, so repeated calls on the
    same graph yield identical results.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any requires_grad tensor")
    order = tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            node.grad = np.array(g) if g is not None else np.zeros(node.shape)
            continue
        if g is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp
