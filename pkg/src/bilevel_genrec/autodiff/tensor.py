"""Tensor type and the reverse-mode sweep.

Every differentiable primitive records its inputs and a backward rule.  The
backward rules are written with the same primitives, so running the sweep with
``create_graph=True`` records the backward pass itself and the result can be
differentiated again.  That is all the meta-gradient needs.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_mode",
    "is_grad_enabled",
    "make_node",
    "topological_order",
    "grad",
]


class ShapeError(ValueError):
    """Raised when the inputs of a primitive have incompatible shapes."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class _GradState(threading.local):
    enabled = True


_state = _GradState()


def is_grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def grad_mode(enabled: bool):
    prev = _state.enabled
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return grad_mode(False)


class Tensor:
    """An immutable float64 array that may carry a node of the computation graph.

    ``parents`` and ``backward_fn`` are set only on recorded (non-leaf) nodes.
    ``backward_fn(g, out)`` returns one gradient (or ``None``) per parent.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "backward_fn", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    # -- array protocol --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})\n{self.data!r}"

    # -- operators (implemented in ops) ------------------------------------
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __rtruediv__(self, other):
        return _ops.div(other, self)

    def __neg__(self):
        return _ops.neg(self)

    def __pow__(self, p):
        return _ops.power(self, p)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def __rmatmul__(self, other):
        return _ops.matmul(other, self)

    def __getitem__(self, key):
        return _ops.getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops.transpose(self, axes or None)

    @property
    def T(self):
        return _ops.transpose(self, None)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a primitive's output, recording it only when some parent needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    if _state.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.op = "leaf"
        out.parents = ()
        out.backward_fn = None
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root``, every node after all of its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output: Tensor | np.ndarray | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian product of ``output`` with respect to each of ``inputs``.

    Inputs the output does not depend on get zero gradients.  With
    ``create_graph`` the returned gradients are themselves recorded nodes.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ValueError(f"gradient needs a scalar output, got shape {output.shape}")
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = grad_output if isinstance(grad_output, Tensor) else Tensor(grad_output)
        if seed.shape != output.shape:
            raise ShapeError("grad", f"grad_output shape {seed.shape} != output shape {output.shape}")

    wanted = {id(t) for t in inputs}
    results: dict[int, Tensor] = {}
    if output.requires_grad:
        order = topological_order(output)
        # Only nodes with a path down to some requested input are worth visiting.
        live: set[int] = set()
        for node in order:
            if id(node) in wanted or any(id(p) in live for p in node.parents):
                live.add(id(node))
        pending: dict[int, Tensor] = {id(output): seed}
        with grad_mode(create_graph):
            for node in reversed(order):
                g = pending.pop(id(node), None)
                if g is None or id(node) not in live:
                    continue
                if id(node) in wanted:
                    results[id(node)] = g
                if node.backward_fn is None:
                    continue
                parent_grads = node.backward_fn(g, node)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or id(p) not in live:
                        continue
                    prev = pending.get(id(p))
                    pending[id(p)] = pg if prev is None else _ops.add(prev, pg)
    elif id(output) in wanted:
        results[id(output)] = seed

    out = []
    for t in inputs:
        g = results.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


from . import ops as _ops  # noqa: E402  (operators resolve lazily)
