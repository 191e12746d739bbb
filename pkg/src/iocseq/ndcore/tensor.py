"""Tensors and the tape that records operations for reverse-mode differentiation."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A dense row-major array plus autodiff bookkeeping.

    Storage is float32 unless a different floating dtype is requested
    explicitly (the gradient checker evaluates ops in float64).
    """

    __slots__ = ("data", "name", "requires_grad", "node")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False,
                 dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.name = name
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Records nodes in execution order, which is a topological order.

    Use as a context manager; ops executed inside the block that touch a
    tensor requiring gradients are appended to ``nodes``.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        return backward(self, loss, wrt)


_local = threading.local()


def _stack() -> list[Graph]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_graph() -> Graph | None:
    st = _stack()
    return st[-1] if st else None


def record(op: str, inputs: Sequence, out: Tensor, backward_fn) -> Tensor:
    """Attach ``out`` to the active graph when any tensor input needs grad."""
    graph = active_graph()
    if graph is None:
        return out
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    node = Node(op, tuple(inputs), out, backward_fn)
    out.node = node
    graph.nodes.append(node)
    return out


def backward(graph: Graph, loss: Tensor, wrt: Sequence[Tensor] | None = None):
    """Reverse pass from a scalar ``loss``.

    Returns a dict mapping each leaf tensor (one with ``requires_grad`` that no
    recorded node produced) to its gradient array. With ``wrt`` the result is
    restricted to those tensors, and tensors the loss does not depend on get
    zero gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        g_in = node.backward(g_out)
        for t, g in zip(node.inputs, g_in):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise RuntimeError(
                    f"{node.op}: gradient shape {g.shape} != input shape {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if t.node is None:
                leaves[key] = t
    if wrt is not None:
        return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}
    return {t: grads[k] for k, t in leaves.items()}
