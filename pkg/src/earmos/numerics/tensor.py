"""Minimal reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` wraps a float64 ndarray and records the operation graph as it is
built; ``backward()`` walks the graph in reverse topological order and
accumulates exact analytic gradients. The op set is deliberately small: just
enough to express TDNN/attention/decoder style networks at desk scale.

Tensors are treated as immutable once created. The graph ("tape") is owned by
a single training thread; forward evaluation of frozen parameters builds no
graph at all (``requires_grad=False`` inputs are free).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from earmos.errors import DegenerateMaskError, ShapeError

# Additive score for masked attention positions. Large enough that exp()
# underflows to exactly 0.0 after the max-shift, so masked keys get weight 0.
_MASK_FILL = -1e30


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward_fn = _backward_fn

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing --------------------------------------------------------

    def _make(self, values, parents: Sequence["Tensor"], backward) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(values, True, tuple(parents), backward)
        return Tensor(values)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += grad

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node, accumulating into `.grad`."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.values)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return self._make(a.values + b.values, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return self._make(a.values - b.values, (a, b), backward)

    def __rsub__(self, other) -> "Tensor":
        return self._wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.values, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.values, b.shape))

        return self._make(a.values * b.values, (a, b), backward)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._wrap(other)
        a, b = self, other
        if a.values.ndim != 2 or b.values.ndim != 2:
            raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.values.T)
            if b.requires_grad:
                b._accumulate(a.values.T @ g)

        return self._make(a.values @ b.values, (a, b), backward)

    __matmul__ = matmul

    def __pow__(self, p: float) -> "Tensor":
        return self.power(p)

    def power(self, p: float) -> "Tensor":
        a = self
        out = a.values ** p

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * p * a.values ** (p - 1.0))

        return self._make(out, (a,), backward)

    # -- elementwise nonlinearities ----------------------------------------------

    def relu(self) -> "Tensor":
        a = self
        out = np.maximum(0.0, a.values)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * (a.values > 0.0))

        return self._make(out, (a,), backward)

    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.values)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * (1.0 - out * out))

        return self._make(out, (a,), backward)

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.values)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * out)

        return self._make(out, (a,), backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(g / a.values)

        return self._make(np.log(a.values), (a,), backward)

    def abs(self) -> "Tensor":
        """|x| with subgradient 0 at x = 0."""
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * np.sign(a.values))

        return self._make(np.abs(a.values), (a,), backward)

    def softplus(self) -> "Tensor":
        """log(1 + e^x), overflow-safe for large |x|."""
        a = self
        out = np.logaddexp(0.0, a.values)

        def backward(g):
            if a.requires_grad:
                # sigmoid(x) without overflow on either tail
                s = np.where(
                    a.values >= 0,
                    1.0 / (1.0 + np.exp(-np.clip(a.values, 0, None))),
                    np.exp(np.clip(a.values, None, 0))
                    / (1.0 + np.exp(np.clip(a.values, None, 0))),
                )
                a._accumulate(g * s)

        return self._make(out, (a,), backward)

    # -- reductions and shape ops -------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.values.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if a.requires_grad:
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.shape).copy())

        return self._make(out, (a,), backward)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self
        n = a.values.size if axis is None else a.shape[axis]
        out = a.values.mean(axis=axis, keepdims=keepdims)

        def backward(g):
            if a.requires_grad:
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.shape) / n)

        return self._make(out, (a,), backward)

    def softmax(self, axis: int) -> "Tensor":
        a = self
        shifted = a.values - a.values.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            if a.requires_grad:
                dot = (g * out).sum(axis=axis, keepdims=True)
                a._accumulate(out * (g - dot))

        return self._make(out, (a,), backward)

    def layer_norm(self, axis: int = -1, eps: float = 1e-5) -> "Tensor":
        """Standardize along `axis`: (x - mean) / sqrt(var + eps)."""
        centered = self - self.mean(axis=axis, keepdims=True)
        var = (centered * centered).mean(axis=axis, keepdims=True)
        return centered * (var + eps).power(-0.5)

    def transpose(self) -> "Tensor":
        a = self
        if a.values.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g.T)

        return self._make(a.values.T, (a,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def reshape(self, *shape: int) -> "Tensor":
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(g.reshape(a.shape))

        return self._make(a.values.reshape(*shape), (a,), backward)

    def __getitem__(self, key) -> "Tensor":
        a = self

        def backward(g):
            if a.requires_grad:
                full = np.zeros_like(a.values)
                full[key] = g
                a._accumulate(full)

        return self._make(a.values[key], (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis`; gradient splits back to each operand."""
    parts = [Tensor._wrap(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    ref = parts[0]
    return ref._make(out, tuple(parts), backward)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention with an optional 0/1 key mask.

    `q`: (n_q, d), `k`: (n_k, d), `v`: (n_k, d_v), `mask`: (n_q, n_k) where
    0 blocks a (query, key) pair and 1 permits it. Masked scores are pushed to
    -1e30 before the softmax, so blocked keys receive exactly zero weight.
    """
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key count {k.shape} does not match value count {v.shape}")
    scores = q.matmul(k.T) * (1.0 / np.sqrt(q.shape[1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (q.shape[0], k.shape[0]):
            raise ShapeError(f"mask shape {mask.shape} != {(q.shape[0], k.shape[0])}")
        if np.any(mask.sum(axis=1) == 0):
            raise DegenerateMaskError("a query row has all keys masked out")
        scores = scores + Tensor((1.0 - mask) * _MASK_FILL)
    weights = scores.softmax(axis=1)
    out = weights.matmul(v)
    if return_weights:
        return out, weights
    return out


def glorot_uniform(
    rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]
) -> Tensor:
    """Trainable parameter initialized uniform(-s, s), s = sqrt(6/(fan_in+fan_out))."""
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)
