"""Reverse-mode automatic differentiation over Tensor values.

A ``Node`` records one produced tensor together with the nodes it was
computed from and a rule that maps the output gradient to the parent
gradients.  Graphs are acyclic by construction; ``backward`` visits each
node exactly once in reverse topological order.

The finite-difference checker in this module is the independent oracle
used to validate every backward rule.  It evaluates the graph in float64
(callers pass float64 inputs) so the central-difference error is far
below the tolerance being enforced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import Tensor


class Node:
    """One entry of the computation graph.

    ``_backward`` takes the gradient of the final scalar with respect to
    this node's value and returns one gradient array per parent (``None``
    for parents that do not require gradients).
    """

    __slots__ = ("value", "parents", "requires_grad", "grad", "_backward", "name")

    def __init__(self, value, parents: tuple = (), backward=None,
                 requires_grad: Optional[bool] = None, name: str = ""):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.value = value
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = backward
        self.name = name

    @classmethod
    def leaf(cls, value, requires_grad: bool = False, name: str = "") -> "Node":
        return cls(value, (), None, requires_grad, name)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        kind = "leaf" if not self.parents else f"op[{len(self.parents)} parents]"
        return f"Node({kind}, shape={self.shape}, name={self.name!r})"


def topo_order(root: Node) -> list[Node]:
    """Ancestors of ``root`` in topological order (parents before children).

    Iterative so that deep unit chains cannot hit the recursion limit.
    """
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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


def backward(root: Node) -> None:
    """Accumulate gradients of a scalar ``root`` into every ancestor that
    requires them.  Existing ``.grad`` buffers keep accumulating; call
    ``zero_grad`` on the model (or reset ``.grad`` yourself) between steps.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = topo_order(root)
    # gradients for the current pass live in a local table so that a second
    # backward over the same graph cannot re-propagate stale .grad buffers
    local: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        grads = node._backward(g)
        if len(grads) != len(node.parents):
            raise ShapeError(f"backward rule of {node.name!r} returned "
                             f"{len(grads)} gradients for {len(node.parents)} parents")
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"gradient shape {pg.shape} does not match "
                                 f"parent shape {parent.shape} ({node.name!r})")
            key = id(parent)
            local[key] = pg if key not in local else local[key] + pg


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference sweep."""
    max_rel_error: float
    tolerance: float
    coords_checked: int
    worst: tuple = ()          # (input index, coordinate, analytic, numeric)
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _rel_error(a: float, n: float) -> float:
    # Floor the denominator so near-zero gradients are judged on an
    # absolute scale instead of exploding the ratio.
    return abs(a - n) / max(abs(a), abs(n), 1e-2)


def grad_check(build: Callable[[Sequence[Node]], Node],
               inputs: Sequence[np.ndarray],
               step: float = 1e-3,
               tolerance: float = 1e-4,
               max_coords_per_input: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``build`` must construct a scalar-valued graph from a list of leaf
    nodes.  ``inputs`` are evaluated as float64 regardless of their dtype.
    By default every coordinate of every input is checked; large instances
    can cap the per-input coordinate count, sampled with ``rng``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]

    leaves = [Node.leaf(Tensor(a, dtype=np.float64), requires_grad=True)
              for a in arrays]
    out = build(leaves)
    if out.value.size != 1:
        raise ParameterError("grad_check requires a scalar-valued graph")
    backward(out)
    analytic = [np.zeros_like(a) if leaf.grad is None else np.array(leaf.grad)
                for a, leaf in zip(arrays, leaves)]

    def evaluate() -> float:
        nodes = [Node.leaf(Tensor(a, dtype=np.float64), requires_grad=False)
                 for a in arrays]
        return float(build(nodes).data)

    report = GradCheckReport(0.0, tolerance, 0)
    for idx, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_input is not None and flat.size > max_coords_per_input:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_coords_per_input, replace=False)
        worst_here = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = evaluate()
            flat[c] = orig - step
            f_minus = evaluate()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[idx].reshape(-1)[c])
            err = _rel_error(a, numeric)
            report.coords_checked += 1
            worst_here = max(worst_here, err)
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (idx, int(c), a, numeric)
        report.per_input.append(worst_here)
    return report
