"""A small reverse-mode differentiation tape over dense (batched) arrays.

Every operation records a node on the tape in creation order, which is
already a topological order, so the backward pass simply walks the node list
in reverse.  Arrays may carry leading batch axes; ``matmul`` and the
elementwise operations broadcast like numpy, and gradients are summed back
to each operand's shape.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite; ``node_id`` names the culprit."""

    def __init__(self, node_id: int, op: str):
        super().__init__(f"non-finite value produced by node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting added or expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A value on a tape together with its accumulated gradient."""

    __slots__ = ("tape", "id", "value", "grad", "op", "parents", "backward_fn")

    def __init__(self, tape: "Tape", value: np.ndarray, op: str,
                 parents: Sequence["Tensor"] = (), backward_fn: Optional[Callable] = None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad: Optional[np.ndarray] = None
        self.id = tape._register(self)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, op={self.op}, shape={self.shape})"


class Tape:
    """Records operations; call :meth:`backward` once per recording."""

    def __init__(self, check_finite: bool = True):
        self.nodes: List[Tensor] = []
        self.check_finite = check_finite
        self._done = False

    def _register(self, node: Tensor) -> int:
        if self.check_finite and not np.all(np.isfinite(node.value)):
            raise NonFiniteError(len(self.nodes), node.op)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError("tensor belongs to another tape")
            return x
        return self.constant(x)

    # leaves ---------------------------------------------------------------
    def variable(self, value, name: str = "var") -> Tensor:
        return Tensor(self, np.array(value, dtype=np.float64, copy=True), name)

    def constant(self, value) -> Tensor:
        return Tensor(self, np.asarray(value, dtype=np.float64), "const")

    # elementwise ----------------------------------------------------------
    def add(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)

        def back(g):
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

        return Tensor(self, a.value + b.value, "add", (a, b), back)

    def sub(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)

        def back(g):
            return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

        return Tensor(self, a.value - b.value, "sub", (a, b), back)

    def mul(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)

        def back(g):
            return unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)

        return Tensor(self, a.value * b.value, "mul", (a, b), back)

    def scale(self, a, c: float) -> Tensor:
        a = self._lift(a)
        c = float(c)
        return Tensor(self, c * a.value, "scale", (a,), lambda g: (c * g,))

    def square(self, a) -> Tensor:
        a = self._lift(a)
        return Tensor(self, a.value * a.value, "square", (a,), lambda g: (2.0 * a.value * g,))

    def relu(self, a) -> Tensor:
        a = self._lift(a)
        mask = a.value > 0.0  # subgradient 0 at the kink
        return Tensor(self, np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))

    def tanh(self, a) -> Tensor:
        a = self._lift(a)
        out = np.tanh(a.value)
        return Tensor(self, out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))

    def exp(self, a) -> Tensor:
        a = self._lift(a)
        out = np.exp(a.value)
        return Tensor(self, out, "exp", (a,), lambda g: (g * out,))

    # structural -----------------------------------------------------------
    def matmul(self, a, b) -> Tensor:
        a, b = self._lift(a), self._lift(b)
        if a.value.ndim < 2 or b.value.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")

        def back(g):
            ga = g @ np.swapaxes(b.value, -1, -2)
            gb = np.swapaxes(a.value, -1, -2) @ g
            return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

        return Tensor(self, a.value @ b.value, "matmul", (a, b), back)

    def transpose(self, a) -> Tensor:
        """Swap the last two axes."""
        a = self._lift(a)
        return Tensor(self, np.swapaxes(a.value, -1, -2), "transpose", (a,),
                      lambda g: (np.swapaxes(g, -1, -2),))

    def sum(self, a, axis=None, keepdims: bool = False) -> Tensor:
        a = self._lift(a)
        out = np.sum(a.value, axis=axis, keepdims=keepdims)

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return Tensor(self, np.asarray(out, dtype=np.float64), "sum", (a,), back)

    def mean(self, a, axis=None, keepdims: bool = False) -> Tensor:
        a = self._lift(a)
        count = a.value.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        return self.scale(self.sum(a, axis=axis, keepdims=keepdims), 1.0 / count)

    def softmax(self, a) -> Tensor:
        """Softmax over the last axis with a max shift."""
        a = self._lift(a)
        z = a.value - np.max(a.value, axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / np.sum(e, axis=-1, keepdims=True)

        def back(g):
            inner = np.sum(g * p, axis=-1, keepdims=True)
            return (p * (g - inner),)

        return Tensor(self, p, "softmax", (a,), back)

    # backward -------------------------------------------------------------
    def backward(self, root: Tensor, seed=None) -> None:
        """Accumulate d(root)/d(node) into every node's ``grad``.

        ``seed`` defaults to ones (so a scalar root gets gradient 1).
        """
        if self._done:
            raise RuntimeError("backward already ran on this tape; record a new one")
        self._done = True
        root._accumulate(np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64))
        for node in reversed(self.nodes[: root.id + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if parent.op == "const":
                    continue
                parent._accumulate(g)

    def reset(self) -> None:
        """Clear gradients so that another backward pass can run on the same recording."""
        for node in self.nodes:
            node.grad = None
        self._done = False
