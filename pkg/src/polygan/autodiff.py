"""Reverse-mode automatic differentiation over dense tensors.

A :class:`Node` wraps a value array plus provenance (op tag, parent nodes) and
a vector-Jacobian closure.  ``backward(root)`` topologically sorts the graph
reachable from a scalar root and accumulates gradients into every node that
requires them.  Gradients sum across fan-out.

There is no implicit broadcasting: elementwise ops demand identical shapes,
the only scalar exception being :func:`scale`.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import Tensor, as_tensor


class Node:
    """One vertex of the autodiff graph."""

    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_vjp", "tag")

    def __init__(
        self,
        value: Tensor,
        op: str = "leaf",
        parents: Sequence["Node"] = (),
        vjp: Optional[Callable] = None,
        requires_grad: bool = False,
        tag: Optional[str] = None,
    ):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.grad: Optional[Tensor] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._vjp = vjp
        self.tag = tag

    @property
    def shape(self):
        return self.value.shape

    def detach(self) -> "Node":
        return Node(self.value.copy(), op="leaf")

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(value, requires_grad: bool = False, tag: Optional[str] = None) -> Node:
    return Node(as_tensor(value), op="leaf", requires_grad=requires_grad, tag=tag)


def _same_shape(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: operand shapes {a.value.shape} and {b.value.shape} differ")


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")
    return Node(a.value + b.value, "add", (a, b), vjp=lambda g: (g, g))


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")
    return Node(a.value * b.value, "mul", (a, b), vjp=lambda g: (g * b.value, g * a.value))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * np.asarray(c, dtype=a.value.dtype), "scale", (a,), vjp=lambda g: (g * c,))


def concat(nodes: Sequence[Node], axis: int) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat: need at least one operand")
    base = list(nodes[0].value.shape)
    for n in nodes[1:]:
        s = list(n.value.shape)
        if len(s) != len(base) or any(x != y for i, (x, y) in enumerate(zip(s, base)) if i != axis):
            raise ShapeError(
                f"concat: shapes {[tuple(m.value.shape) for m in nodes]} differ off axis {axis}"
            )
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=axis))

    return Node(np.concatenate([n.value for n in nodes], axis=axis), "concat", nodes, vjp=vjp)


def mean(a: Node) -> Node:
    inv = 1.0 / a.value.size

    def vjp(g):
        return (np.full(a.value.shape, float(g) * inv, dtype=a.value.dtype),)

    return Node(np.asarray(a.value.mean(dtype=a.value.dtype)), "mean", (a,), vjp=vjp)


def pad2d(a: Node, amount: int) -> Node:
    """Zero-pad the two trailing (spatial) axes by `amount` on every side."""
    if amount < 0:
        raise ShapeError(f"pad2d: negative amount {amount}")
    if a.value.ndim < 2:
        raise ShapeError(f"pad2d: need >= 2 dims, got shape {a.value.shape}")
    if amount == 0:
        return Node(a.value, "pad", (a,), vjp=lambda g: (g,))
    width = [(0, 0)] * (a.value.ndim - 2) + [(amount, amount), (amount, amount)]

    def vjp(g):
        sl = tuple([slice(None)] * (a.value.ndim - 2) + [slice(amount, -amount)] * 2)
        return (np.ascontiguousarray(g[sl]),)

    return Node(np.pad(a.value, width), "pad", (a,), vjp=vjp)


def relu(a: Node) -> Node:
    out = np.maximum(a.value, 0)
    return Node(out, "relu", (a,), vjp=lambda g: (g * (a.value > 0).astype(g.dtype),))


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    out = np.where(a.value > 0, a.value, a.value * a.value.dtype.type(slope))
    def vjp(g):
        return (g * np.where(a.value > 0, g.dtype.type(1), g.dtype.type(slope)),)
    return Node(out, "leaky_relu", (a,), vjp=vjp)


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(out, "tanh", (a,), vjp=lambda g: (g * (1.0 - out * out).astype(g.dtype),))


def linear(x: Node, w: Node, b: Optional[Node] = None) -> Node:
    """x @ w (+ b per output column); x is (B, F), w is (F, O), b is (O,)."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.value.shape} @ {w.value.shape}")
    out = x.value @ w.value
    parents: List[Node] = [x, w]
    if b is not None:
        if b.value.shape != (w.value.shape[1],):
            raise ShapeError(f"linear: bias shape {b.value.shape} != ({w.value.shape[1]},)")
        out = out + b.value
        parents.append(b)

    def vjp(g):
        grads = [g @ w.value.T, x.value.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return Node(out, "matmul", parents, vjp=vjp)


def l1(a: Node, b: Node) -> Node:
    """Mean absolute difference, reduced to a scalar."""
    _same_shape(a, b, "l1")
    diff = a.value - b.value
    inv = 1.0 / diff.size

    def vjp(g):
        d = np.sign(diff) * (float(g) * inv)
        d = d.astype(a.value.dtype)
        return (d, -d)

    return Node(np.asarray(np.abs(diff).mean(dtype=a.value.dtype)), "l1", (a, b), vjp=vjp)


def l2(a: Node, b: Node) -> Node:
    """Mean squared difference, reduced to a scalar."""
    _same_shape(a, b, "l2")
    diff = a.value - b.value
    inv = 2.0 / diff.size

    def vjp(g):
        d = diff * (float(g) * inv)
        d = d.astype(a.value.dtype)
        return (d, -d)

    return Node(np.asarray((diff * diff).mean(dtype=a.value.dtype)), "l2", (a, b), vjp=vjp)


def topo_order(root: Node) -> List[Node]:
    """Parents-before-children ordering of the graph reachable from root."""
    order: List[Node] = []
    seen = set()
    stack: List[tuple] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> Dict[Node, Tensor]:
    """Accumulate d(root)/d(node) into .grad for every requires_grad node.

    Root must be scalar (shape () or (1,)).  Returns {node: grad} for the
    nodes that received a gradient.  Accumulation never mutates in place, so
    vjps may safely return shared or viewed arrays.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
    order = topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    grads: Dict[Node, Tensor] = {}
    for node in reversed(order):
        if node.grad is None or not node.requires_grad:
            continue
        grads[node] = node.grad
        if node._vjp is None:
            continue
        parent_grads = node._vjp(node.grad)
        for p, g in zip(node.parents, parent_grads):
            if not p.requires_grad or g is None:
                continue
            if g.shape != p.value.shape:
                raise ShapeError(
                    f"vjp of {node.op}: grad shape {g.shape} != value shape {p.value.shape}"
                )
            p.grad = g if p.grad is None else p.grad + g
    return grads


def walk_tags(root: Node) -> List[str]:
    """All non-empty node tags in the graph reachable from root."""
    return [n.tag for n in topo_order(root) if n.tag]


def finite_diff_check(f: Callable[[Node], Node], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between backward() and central finite differences.

    `f` maps a Node to a scalar Node.  Relative error per element is
    |analytic - numeric| / max(|numeric|, 1e-8).
    """
    x = np.asarray(x, dtype=np.float64)
    xn = leaf(x, requires_grad=True)
    out = f(xn)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("finite_diff_check: f(x) is not finite")
    backward(out)
    analytic = xn.grad if xn.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(leaf(x)).value)
        flat[i] = orig - eps
        fm = float(f(leaf(x)).value)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("finite_diff_check: perturbed evaluation is not finite")
        num_flat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
