"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation records its inputs and a backward closure on
the result node, and `backward()` walks the tape in reverse topological
order. Reductions go through numpy's deterministic pairwise summation, so
identical inputs always produce bit-identical values and gradients.

Gradients accumulate additively into `.grad`; callers reset between steps.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True

# Per-backward-call gradient buffers. Propagation never reads .grad, so a
# second backward() on the same loss adds exactly one more unit of gradient.
_tls = threading.local()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/eval fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.values.reshape(()))

    def _accumulate(self, delta: np.ndarray) -> None:
        scratch = getattr(_tls, "accum", None)
        if scratch is not None:
            buf = scratch.get(id(self))
            if buf is None:
                scratch[id(self)] = buf = np.zeros_like(self.values)
            buf += delta
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += delta

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _make_node(values: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also supports adding a 1-d bias along the last axis."""
    if a.shape != b.shape and not (b.values.ndim == 1 and a.shape[-1:] == b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    values = a.values + b.values

    def backward(dout: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(dout)
        if b.requires_grad:
            if b.shape == a.shape:
                b._accumulate(dout)
            else:
                b._accumulate(dout.reshape(-1, b.shape[0]).sum(axis=0))

    return _make_node(values, (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"multiply: incompatible shapes {a.shape} and {b.shape}")
    values = a.values * b.values

    def backward(dout: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(dout * b.values)
        if b.requires_grad:
            b._accumulate(dout * a.values)

    return _make_node(values, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    values = a.values * c

    def backward(dout: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(dout * c)

    return _make_node(values, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    values = a.values @ b.values

    def backward(dout: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(dout @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ dout)

    return _make_node(values, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    values = np.maximum(a.values, 0.0)

    def backward(dout: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(dout * (a.values > 0.0))

    return _make_node(values, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learnable gain and bias."""
    if x.values.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: shapes {x.shape}, {gain.shape}, {bias.shape}")
    mu = x.values.mean(axis=1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    values = xhat * gain.values + bias.values

    def backward(dout: np.ndarray) -> None:
        d = x.shape[1]
        dxhat = dout * gain.values
        if x.requires_grad:
            row_sum = dxhat.sum(axis=1, keepdims=True)
            proj = (dxhat * xhat).sum(axis=1, keepdims=True)
            x._accumulate(inv_std * (dxhat - row_sum / d - xhat * proj / d))
        if gain.requires_grad:
            gain._accumulate((dout * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(dout.sum(axis=0))

    return _make_node(values, (x, gain, bias), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows `ids` from an embedding table; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-d, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.shape[0]} rows")
    values = table.values[ids]

    def backward(dout: np.ndarray) -> None:
        if table.requires_grad:
            scatter = np.zeros_like(table.values)
            np.add.at(scatter, ids, dout)
            table._accumulate(scatter)

    return _make_node(values, (table,), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    values = x.values[start:stop]

    def backward(dout: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.values)
            full[start:stop] = dout
            x._accumulate(full)

    return _make_node(values, (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    values = x.values[:, start:stop]

    def backward(dout: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.values)
            full[:, start:stop] = dout
            x._accumulate(full)

    return _make_node(values, (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    values = np.concatenate([p.values for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(dout: np.ndarray) -> None:
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(dout[s:e])

    return _make_node(values, tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    values = np.concatenate([p.values for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(dout: np.ndarray) -> None:
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(dout[:, s:e])

    return _make_node(values, tuple(parts), backward)


def masked_softmax_rows(scores: Tensor, additive_mask: np.ndarray) -> Tensor:
    """Row softmax of (scores + additive_mask); mask entries are 0 or -inf.

    Each row must keep at least one finite entry. Disallowed positions get
    probability exactly 0 and receive exactly zero gradient.
    """
    shifted = scores.values + additive_mask
    row_max = shifted.max(axis=1, keepdims=True)
    expd = np.exp(shifted - row_max)
    probs = expd / expd.sum(axis=1, keepdims=True)

    def backward(dout: np.ndarray) -> None:
        if scores.requires_grad:
            inner = (dout * probs).sum(axis=1, keepdims=True)
            scores._accumulate(probs * (dout - inner))

    return _make_node(probs, (scores,), backward)


def sum_all(x: Tensor) -> Tensor:
    values = np.asarray(x.values.sum())

    def backward(dout: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.full_like(x.values, float(dout)))

    return _make_node(values, (x,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of per-row negative log-likelihoods, max-stabilized.

    Returns sum_i weights[i] * (-log softmax(logits[i])[targets[i]]) as a
    scalar. Rows with weight 0 contribute nothing and get zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n, v = logits.shape
    if targets.shape != (n,) or weights.shape != (n,):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape}, targets {targets.shape}, "
            f"weights {weights.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"softmax_cross_entropy: target out of range [0, {v})")
    if np.any(weights < 0):
        raise ValueError("softmax_cross_entropy: weights must be non-negative")

    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    log_z = np.log(expd.sum(axis=1))
    nll = log_z - shifted[np.arange(n), targets]
    values = np.asarray((weights * nll).sum())

    def backward(dout: np.ndarray) -> None:
        if logits.requires_grad:
            probs = expd / expd.sum(axis=1, keepdims=True)
            grad = probs * weights[:, None]
            grad[np.arange(n), targets] -= weights
            logits._accumulate(float(dout) * grad)

    return _make_node(values, (logits,), backward)


def argmax_rows(x: Tensor) -> np.ndarray:
    """Row-wise argmax of the raw values (no gradient)."""
    return np.argmax(x.values, axis=1)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable tensor.

    Repeated calls without zeroing add up. Raises on non-scalar input.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    scratch: dict[int, np.ndarray] = {}
    _tls.accum = scratch
    try:
        loss._accumulate(np.ones_like(loss.values))
        for node in reversed(topo):
            dout = scratch.get(id(node))
            if node._backward is not None and dout is not None:
                node._backward(dout)
        for node in topo:
            dout = scratch.get(id(node))
            if dout is not None:
                if node.grad is None:
                    node.grad = dout
                else:
                    node.grad = node.grad + dout
    finally:
        _tls.accum = None


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
