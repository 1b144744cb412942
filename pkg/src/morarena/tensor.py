"""Dense float64 tensors with reverse-mode differentiation.

Only the handful of primitives needed for MLP training and gradient-sign
attacks are provided: matmul, (broadcast) add/sub, scaling, elementwise
multiply, ReLU, mean/sum and softmax cross-entropy with integer labels.

A graph is recorded only when at least one input requires a gradient, so
plain inference runs at numpy speed.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable value node. ``data`` is never written to after construction."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite value produced by {op}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward, op):
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def total(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.sum(), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        return (np.full(a.shape, float(g) / n),)

    return _node(a.data.mean(), (a,), backward, "mean")


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_xent(logits, labels, reduction="mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    ``logits`` is (n, C) with ``labels`` of length n, or a single (C,) row
    with a scalar label. ``reduction`` is "mean" or "sum" over rows.
    """
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError(f"softmax_xent: incompatible shapes {logits.shape} and {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ValueError(f"softmax_xent: label outside [0, {z.shape[1]})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    logp = log_softmax(z)
    rows = np.arange(len(y))
    nll = -logp[rows, y]
    denom = len(y) if reduction == "mean" else 1
    value = nll.sum() / denom

    def backward(g):
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        grad *= float(g) / denom
        return (grad[0] if single else grad,)

    return _node(value, (logits,), backward, "softmax_xent")


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> dict:
    """Gradients of a scalar ``loss`` for every leaf that requires them.

    Returns a dict keyed by the leaf tensors themselves (identity hashing).
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)
    return leaves


def grad(loss: Tensor, leaf: Tensor) -> np.ndarray:
    """Gradient of ``loss`` w.r.t. one leaf (zeros if it does not contribute)."""
    g = backward(loss).get(leaf)
    return np.zeros(leaf.shape) if g is None else g


def sign(t) -> np.ndarray:
    # np.sign already maps 0 -> 0
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return np.sign(data)


def clip_to_ball(candidate, anchor, epsilon, box=(0.0, 1.0)) -> np.ndarray:
    """Project onto the L-inf ball of radius ``epsilon`` around ``anchor``, then the box.

    ``epsilon`` may be a scalar or a per-feature array. The anchor is assumed
    to be inside the box, so the result satisfies both constraints.
    """
    eps = np.asarray(epsilon, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("epsilon must be non-negative")
    cand = candidate.data if isinstance(candidate, Tensor) else np.asarray(candidate, dtype=np.float64)
    anc = anchor.data if isinstance(anchor, Tensor) else np.asarray(anchor, dtype=np.float64)
    if cand.shape != anc.shape:
        raise ShapeError(f"clip_to_ball: incompatible shapes {cand.shape} and {anc.shape}")
    lo, hi = box
    return np.clip(np.clip(cand, *_ball_bounds(anc, eps)), lo, hi)


def _ball_bounds(anc, eps):
    """anchor -/+ eps, nudged inward until |bound - anchor| <= eps holds in floats."""
    lower, upper = anc - eps, anc + eps
    while True:
        bad_lo, bad_hi = anc - lower > eps, upper - anc > eps
        if not (bad_lo.any() or bad_hi.any()):
            return lower, upper
        lower = np.where(bad_lo, np.nextafter(lower, np.inf), lower)
        upper = np.where(bad_hi, np.nextafter(upper, -np.inf), upper)
