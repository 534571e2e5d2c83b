"""Dense float64 tensors with reverse-mode differentiation.

Everything is numpy underneath. A ``Tensor`` is a node in a computation
graph: leaves hold parameters or constants, interior nodes remember their
parents and a vector-Jacobian product. Gradients are computed by walking
the graph backwards from a scalar loss; they are returned as plain numpy
arrays rather than stored on the nodes, so graphs are single-use and there
is no ``zero_grad`` bookkeeping.

Only the primitives the model and losses need are provided. Anything else
(fancy broadcasting, in-place ops) is deliberately absent and will raise.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12  # guard for vector-norm division
EPS_BN = 1e-5  # guard for batch-norm variance


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Graph node wrapping a float64 ndarray.

    ``parents`` and ``vjp`` are set by the primitives below; user code only
    creates leaves (``Tensor(data)``) and composes primitives.
    """

    __slots__ = ("value", "_parents", "_vjp")

    def __init__(self, value, parents: tuple = (), vjp: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def detach(self) -> "Tensor":
        """Constant copy of this node; blocks gradient flow."""
        return Tensor(self.value.copy())

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        out = a.value + b.value
        return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        out = a.value - b.value
        return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        out = a.value * b.value
        return Tensor(
            out,
            (a, b),
            lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        out = a.value / b.value
        return Tensor(
            out,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
            ),
        )

    def __neg__(self):
        return Tensor(-self.value, (self,), lambda g: (-g,))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        a = self
        out = a.value.sum(axis=axis)
        if axis is None:
            return Tensor(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(np.float64),))

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(np.float64),)

        return Tensor(out, (a,), vjp)

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Leaf with no gradient path (same as Tensor(x); reads better at call sites)."""
    return Tensor(x)


# -- primitives --------------------------------------------------------------


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x[B,k] @ w[m,k]^T -> [B,m]."""
    x, w = _as_tensor(x), _as_tensor(w)
    out = x.value @ w.value.T
    return Tensor(out, (x, w), lambda g: (g @ w.value, g.T @ x.value))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.value, 0.0)
    return Tensor(out, (x,), lambda g: (g * (x.value > 0.0),))


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.value)
    return Tensor(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return Tensor(np.log(x.value), (x,), lambda g: (g / x.value,))


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.value)
    return Tensor(out, (x,), lambda g: (g * 0.5 / out,))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a [B,C] tensor, max-subtracted for stability."""
    x = _as_tensor(x)
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return Tensor(out, (x,), vjp)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """x[i, idx[i]] for each row i -> [B]."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.shape[0])
    out = x.value[rows, idx]

    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return Tensor(out, (x,), vjp)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row subset x[idx] -> [R, ...]; backward scatter-adds into the source."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = x.value[idx]

    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(out, (x,), vjp)


# -- gradients ----------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """d(loss)/d(p) for each p in params; zeros for params the loss never saw."""
    if loss.value.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [np.asarray(grads.get(id(p), np.zeros_like(p.value)), dtype=np.float64) for p in params]


def value_and_grad(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]):
    """Evaluate ``loss_fn`` and return (scalar value, gradient per param).

    The loss must be built from the primitives in this module; anything else
    has no vjp and contributes no gradient, so compose only registered ops.
    """
    loss = loss_fn()
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor")
    if loss.value.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    return float(loss.value), gradients(loss, params)


# -- plain ndarray ops (no graph) ---------------------------------------------


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax; raises on non-finite input."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax: non-finite input")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy (nats) of softmax(logits) along ``axis``."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("entropy: non-finite input")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    p = np.exp(logp)
    return -(p * logp).sum(axis=axis)


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """v / (||v||_2 + 1e-12); zero vectors come back zero."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / (norm + EPS_NORM)
