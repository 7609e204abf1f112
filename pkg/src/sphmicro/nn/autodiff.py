"""Minimal reverse-mode differentiation.

A :class:`Graph` records every operation of one forward pass in creation
order, which is already a topological order. :meth:`Graph.backward`
walks the nodes in reverse exactly once and accumulates gradients into
the parents of each node, including the :class:`Parameter` leaves.

Operations are plain functions ``op(graph, *nodes)`` that compute the
value with numpy and register a closure mapping the output gradient to
one gradient per parent (``None`` for parents that need none).
"""

import numpy as np


class Node:
    """A value in a computation graph with a gradient slot."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=""):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, shape={self.value.shape})"


class Parameter(Node):
    """Trainable leaf that outlives individual graphs."""

    __slots__ = ()

    def __init__(self, value, name=""):
        super().__init__(np.asarray(value), name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Graph:
    """Record of one forward pass."""

    def __init__(self):
        self.nodes = []
        self._done = False

    def constant(self, value, name="input"):
        node = Node(np.asarray(value), name=name)
        self.nodes.append(node)
        return node

    def add(self, value, parents, backward_fn, name=""):
        if self._done:
            raise RuntimeError("graph already differentiated; run a new forward pass")
        node = Node(value, parents, backward_fn, name)
        self.nodes.append(node)
        return node

    def parameters(self):
        """Parameter leaves reachable from this graph, in first-use order."""
        seen = {}
        for node in self.nodes:
            for p in node.parents:
                if isinstance(p, Parameter) and id(p) not in seen:
                    seen[id(p)] = p
        return list(seen.values())

    def backward(self, loss):
        """Fill ``.grad`` of every node and parameter reachable from ``loss``.

        ``loss`` must be a scalar node created by this graph. Parameter
        gradients are overwritten, not accumulated across calls.
        """
        if not self.nodes:
            raise RuntimeError("backward called before any forward pass")
        if self._done:
            raise RuntimeError("backward already run on this graph")
        if not any(node is loss for node in self.nodes):
            raise ValueError("loss node does not belong to this graph")
        if np.size(loss.value) != 1:
            raise ValueError("backward needs a scalar loss")
        for node in self.nodes:
            node.grad = None
        for p in self.parameters():
            p.zero_grad()
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
        self._done = True


# ---------------------------------------------------------------------------
# Elementary operations (enough for scalar test functions and losses)
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(graph, a, b):
    return graph.add(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(graph, a, b):
    return graph.add(a.value * b.value, (a, b),
                     lambda g: (_unbroadcast(g * b.value, a.shape),
                                _unbroadcast(g * a.value, b.shape)), "mul")


def total(graph, a):
    return graph.add(np.sum(a.value), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
