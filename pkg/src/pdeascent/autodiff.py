"""Reverse-mode automatic differentiation on numpy arrays.

The tape is deliberately small: it supports exactly the operations needed to
evaluate feed-forward networks, their input derivatives, and training losses
built from both.  Backward rules are themselves expressed with taped
operations, so gradients are differentiable: ``grad`` of an expression that
already contains a ``grad`` (double backprop) works, which is what training
a loss through an input-gradient requires.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A numpy array plus the recipe for its vector-Jacobian products."""

    __slots__ = ("value", "parents", "vjps", "tracked")

    # keep numpy from absorbing Tensors in mixed expressions; reflected
    # operators below handle ndarray-on-the-left arithmetic
    __array_ufunc__ = None

    def __init__(
        self,
        value,
        parents: tuple["Tensor", ...] = (),
        vjps: tuple[Callable[["Tensor"], "Tensor"], ...] = (),
        tracked: bool = False,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps
        self.tracked = tracked or any(p.tracked for p in parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, wrap(other))

    def __radd__(self, other):
        return add(wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(wrap(other)))

    def __rsub__(self, other):
        return add(wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, wrap(other))

    def __rmul__(self, other):
        return mul(wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, wrap(other))

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, tracked={self.tracked})"


def wrap(x) -> Tensor:
    """Lift numbers/arrays into constant (untracked) tensors."""
    return x if isinstance(x, Tensor) else Tensor(x)


def variable(x) -> Tensor:
    """A leaf tensor that gradients are taken with respect to."""
    return Tensor(x, tracked=True)


# -- shape plumbing ---------------------------------------------------------

def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcasted gradient back to ``shape`` (adjoint of broadcast)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = gsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = gsum(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = wrap(a)
    shape = tuple(shape)
    return Tensor(
        np.broadcast_to(a.value, shape),
        parents=(a,),
        vjps=(lambda g: _sum_to(g, a.shape),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    a = wrap(a)
    old = a.shape
    return Tensor(
        a.value.reshape(shape),
        parents=(a,),
        vjps=(lambda g: reshape(g, old),),
    )


# -- arithmetic primitives ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.value + b.value,
        parents=(a, b),
        vjps=(lambda g: _sum_to(g, a.shape), lambda g: _sum_to(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.value, parents=(a,), vjps=(lambda g: neg(g),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.value * b.value,
        parents=(a, b),
        vjps=(
            lambda g: _sum_to(mul(g, b), a.shape),
            lambda g: _sum_to(mul(g, a), b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    # 2-D only; enough for batched dense layers.
    return Tensor(
        a.value @ b.value,
        parents=(a, b),
        vjps=(
            lambda g: matmul(g, transpose(b)),
            lambda g: matmul(transpose(a), g),
        ),
    )


def transpose(a: Tensor) -> Tensor:
    a = wrap(a)
    return Tensor(a.value.T, parents=(a,), vjps=(lambda g: transpose(g),))


def tanh(a: Tensor) -> Tensor:
    a = wrap(a)
    out = Tensor(np.tanh(a.value), parents=(a,), vjps=())
    out.vjps = (lambda g: mul(g, add(wrap(1.0), neg(mul(out, out)))),)
    return out


def square(a: Tensor) -> Tensor:
    a = wrap(a)
    return mul(a, a)


def absolute(a: Tensor) -> Tensor:
    a = wrap(a)
    sign = Tensor(np.sign(a.value))  # constant: |x| has zero curvature a.e.
    return Tensor(np.abs(a.value), parents=(a,), vjps=(lambda g: mul(g, sign),))


def gsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = wrap(a)
    in_shape = a.shape

    def vjp(g: Tensor) -> Tensor:
        if axis is None:
            return broadcast_to(g, in_shape)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(in_shape) for ax in axes)
        if not keepdims:
            kept = [1 if i in axes else n for i, n in enumerate(in_shape)]
            g = reshape(g, tuple(kept))
        return broadcast_to(g, in_shape)

    return Tensor(
        np.sum(a.value, axis=axis, keepdims=keepdims), parents=(a,), vjps=(vjp,)
    )


def gmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = wrap(a)
    n = a.value.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(gsum(a, axis=axis, keepdims=keepdims), wrap(1.0 / float(n)))


def take(a: Tensor, key) -> Tensor:
    a = wrap(a)
    shape = a.shape

    def vjp(g: Tensor) -> Tensor:
        return scatter(g, key, shape)

    return Tensor(a.value[key], parents=(a,), vjps=(vjp,))


def scatter(g: Tensor, key, shape) -> Tensor:
    """Adjoint of ``take``: place ``g`` at ``key`` inside zeros of ``shape``."""
    g = wrap(g)
    out = np.zeros(shape, dtype=np.float64)
    out[key] = g.value
    return Tensor(out, parents=(g,), vjps=(lambda h: take(h, key),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    ndim = tensors[0].ndim
    ax = axis % ndim

    def make_vjp(i):
        key = tuple(
            slice(int(offsets[i]), int(offsets[i + 1])) if d == ax else slice(None)
            for d in range(ndim)
        )
        return lambda g: take(g, key)

    return Tensor(
        np.concatenate([t.value for t in tensors], axis=axis),
        parents=tuple(tensors),
        vjps=tuple(make_vjp(i) for i in range(len(tensors))),
    )


# -- reverse sweep ------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.tracked:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.tracked and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrts: Sequence[Tensor], seed: Tensor | None = None) -> list[Tensor]:
    """Gradients of ``output`` with respect to each tensor in ``wrts``.

    ``output`` must be scalar unless ``seed`` (the upstream gradient) is given.
    The returned tensors are part of the tape, so they can be differentiated
    again.
    """
    if seed is None:
        if output.value.size != 1:
            raise ValueError("grad of a non-scalar output requires a seed gradient")
        seed = Tensor(np.ones_like(output.value))
    grads: dict[int, Tensor] = {id(output): seed}
    for node in reversed(_topo_order(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.tracked:
                continue
            contribution = vjp(g)
            held = grads.get(id(parent))
            grads[id(parent)] = contribution if held is None else add(held, contribution)
        grads[id(node)] = g  # keep for aliased wrts
    return [grads.get(id(w)) or Tensor(np.zeros_like(w.value)) for w in wrts]
