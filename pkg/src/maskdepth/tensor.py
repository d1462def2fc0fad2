"""Dense tensors with reverse-mode automatic differentiation.

Buffers are contiguous numpy arrays, float32 by default; gradient-check
runs build everything in float64 (finite differences are unreliable in
float32). Every differentiable op records its inputs and a backward
closure on the output tensor; ``backward(loss)`` walks the resulting DAG
in reverse topological order and accumulates into ``.grad`` buffers.

Semantics that callers rely on:

- gradients accumulate across ``backward`` calls until ``zero_grads`` is
  called (needed for gradient accumulation over micro-batches);
- tensors are immutable after creation except for their grad buffers;
- a graph is confined to one thread. Bitwise determinism holds for a
  fixed BLAS thread count, since numpy's reduction order is fixed per
  build and thread configuration.

Out of scope by design: GPU execution, sparse tensors, broadcasting
beyond scalars (plus the dedicated bias/row helpers below), and
higher-order gradients.
"""

from __future__ import annotations

import contextlib
import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Backward called on an unusable graph (e.g. non-scalar loss)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """n-d array that optionally participates in the gradient graph.

    ``data`` is never mutated by ops; ``grad`` is allocated lazily and
    accumulated in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # --- introspection ---

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"

    # --- grad plumbing ---

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # --- operator sugar ---

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable tensor that requires grad.

    ``loss`` must be scalar (size 1). Repeated calls accumulate until the
    grads are explicitly zeroed.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")

    # Reverse topological order, iteratively (graphs can be deep).
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --- elementwise ops ---


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    # Wrap raw scalars in the partner's dtype so float32 graphs stay float32.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # Undo a scalar broadcast when one operand was size-1.
    if t.size == 1 and g.size != 1:
        return np.sum(g).reshape(t.shape).astype(t.dtype)
    return g


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b))

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(-g, b))

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.data, a))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b))

    return _make(a.data * b.data, (a, b), bwd, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * np.asarray(s, dtype=x.dtype))

    return _make(x.data * np.asarray(s, dtype=x.dtype), (x,), bwd, "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        if x.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
            dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
            x.accumulate_grad(g * dx.astype(x.dtype))

    return _make(out.astype(x.dtype), (x,), bwd, "gelu")


def mul_const(x: Tensor, c) -> Tensor:
    """Elementwise multiply by a plain array/scalar that never needs grad."""
    c = np.asarray(c, dtype=x.dtype)
    if c.shape != () and c.shape != x.shape:
        raise ShapeError(f"mul_const: constant shape {c.shape} does not match {x.shape}")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * c)

    return _make(x.data * c, (x,), bwd, "mul_const")


# --- linear algebra ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g.T))

    return _make(np.ascontiguousarray(x.data.T), (x,), bwd, "transpose")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b`` to every row of ``x`` ([k, d] + [d])."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not fit {x.shape}")

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), bwd, "add_bias")


# --- normalization / attention ---


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not fit last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(((gx - m1 - xhat * m2) * inv).astype(x.dtype))

    return _make(out.astype(x.dtype), (x, gamma, beta), bwd, "layer_norm")


def standardize_rows(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row standardization without affine (loss-side normalization)."""
    if eps <= 0:
        raise ValueError("standardize_rows: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - mu) * inv

    def bwd(g):
        if x.requires_grad:
            m1 = g.mean(axis=-1, keepdims=True)
            m2 = (g * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(((g - m1 - xhat * m2) * inv).astype(x.dtype))

    return _make(xhat.astype(x.dtype), (x,), bwd, "standardize_rows")


def softmax(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis."""
    if logger.isEnabledFor(logging.DEBUG) and np.isnan(x.data).any():
        logger.debug("softmax input contains NaN; propagating")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            x.accumulate_grad((out * (g - dot)).astype(x.dtype))

    return _make(out.astype(x.dtype), (x,), bwd, "softmax")


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of [N, C] logits against int labels."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy_mean: labels shape {labels.shape} does not fit logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            logits.accumulate_grad((g * p / n).astype(logits.dtype))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bwd, "cross_entropy_mean")


# --- structural ops ---


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of ``x`` by integer index; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x.accumulate_grad(gx)

    return _make(x.data[idx], (x,), bwd, "gather_rows")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [p for p in parts if p.shape[0] > 0]
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ: {sorted(widths)}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[a:b])

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, bwd, "concat_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for shape {x.shape}")

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            x.accumulate_grad(gx)

    return _make(np.ascontiguousarray(x.data[:, start:stop]), (x,), bwd, "slice_cols")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {sorted(rows)}")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(np.ascontiguousarray(g[:, a:b]))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd, "concat_cols")


# --- reductions ---


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g))

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g / n))

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bwd, "mean_all")
