"""
Reverse-mode automatic differentiation over dense 2-D float64 matrices.

Every differentiable quantity in the package is a :class:`DiffMatrix`. Ops
record their parents and a backward rule; :func:`backward` orders the graph
reachable from a scalar root into a :class:`ComputationTape` and propagates
gradients in reverse topological order.

Shapes are always explicit. The only implicit broadcasts are scalar
arithmetic (``M * 2.0``, ``M + 1.0``) and the per-row max subtraction inside
the softmax kernels; anything else must be spelled out, e.g. a bias row is
expanded with ``ones(n, 1) @ b``.
"""

from __future__ import annotations

import itertools
from numbers import Real
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_node_ids = itertools.count()


def _as_2d(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"DiffMatrix needs a 2-D array, got shape {arr.shape}")
    return arr


class DiffMatrix:
    """A matrix node in a computation graph.

    Leaves are created with :func:`param` (trainable) or :func:`const`.
    Op outputs carry the name of the producing primitive in ``op`` and its
    inputs in ``parents``; their ``values`` array is read-only.
    """

    __slots__ = ("_values", "_grad", "requires_grad", "op", "parents", "_backward", "node_id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = _as_2d(values)
        arr.flags.writeable = False
        self._values = arr
        self._grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[DiffMatrix, ...] = ()
        self._backward = None
        self.node_id = next(_node_ids)
        self.name = name

    @classmethod
    def _from_op(cls, values: np.ndarray, parents, op: str, backward) -> "DiffMatrix":
        out = cls.__new__(cls)
        values.flags.writeable = False
        out._values = values
        out._grad = None
        requires = False
        for p in parents:
            if p.requires_grad:
                requires = True
                break
        out.requires_grad = requires
        out.op = op
        out.parents = tuple(parents) if requires else ()
        out._backward = backward if requires else None
        out.node_id = next(_node_ids)
        out.name = None
        return out

    @property
    def values(self) -> np.ndarray:
        return self._values

    @values.setter
    def values(self, new) -> None:
        # Only leaves may be rebound (optimizer steps, finite differences).
        if self.op != "leaf":
            raise ContractError("cannot rebind values of a recorded op output")
        arr = _as_2d(new)
        if arr.shape != self._values.shape:
            raise DimensionError(f"cannot rebind {self._values.shape} leaf to shape {arr.shape}")
        arr.flags.writeable = False
        self._values = arr

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self._values)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple[int, int]:
        return self._values.shape

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self._values[0, 0])

    def numpy(self) -> np.ndarray:
        return self._values

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"DiffMatrix({tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the named primitives below
    def __add__(self, other):
        if isinstance(other, Real):
            return add_scalar(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Real):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Real):
            return mul_scalar(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Real):
            return mul_scalar(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def param(values, name: str | None = None) -> DiffMatrix:
    return DiffMatrix(values, requires_grad=True, name=name)


def const(values, name: str | None = None) -> DiffMatrix:
    return DiffMatrix(values, requires_grad=False, name=name)


def as_diff(x) -> DiffMatrix:
    """Wrap arrays as constants; pass DiffMatrix through untouched."""
    return x if isinstance(x, DiffMatrix) else const(x)


def ones(rows: int, cols: int) -> DiffMatrix:
    return const(np.ones((rows, cols)))


def _same_shape(op: str, a: DiffMatrix, b: DiffMatrix) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_finite(op: str, a: DiffMatrix) -> None:
    if not np.isfinite(a.values).all():
        raise NumericError(f"{op}: input contains non-finite entries")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: DiffMatrix, b: DiffMatrix) -> DiffMatrix:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return DiffMatrix._from_op(av @ bv, (a, b), "matmul", backward)


def add(a: DiffMatrix, b: DiffMatrix) -> DiffMatrix:
    _same_shape("add", a, b)
    return DiffMatrix._from_op(a.values + b.values, (a, b), "add", lambda g: (g, g))


def sub(a: DiffMatrix, b: DiffMatrix) -> DiffMatrix:
    _same_shape("sub", a, b)
    return DiffMatrix._from_op(a.values - b.values, (a, b), "sub", lambda g: (g, -g))


def hadamard(a: DiffMatrix, b: DiffMatrix) -> DiffMatrix:
    _same_shape("hadamard", a, b)
    av, bv = a.values, b.values
    return DiffMatrix._from_op(av * bv, (a, b), "hadamard", lambda g: (g * bv, g * av))


def div(a: DiffMatrix, b: DiffMatrix) -> DiffMatrix:
    _same_shape("div", a, b)
    av, bv = a.values, b.values
    if np.any(bv == 0.0):
        raise NumericError("div: division by an exact zero entry")
    out = av / bv
    return DiffMatrix._from_op(out, (a, b), "div", lambda g: (g / bv, -g * out / bv))


def mul_scalar(a: DiffMatrix, c: float) -> DiffMatrix:
    return DiffMatrix._from_op(a.values * c, (a,), "mul_scalar", lambda g: (g * c,))


def add_scalar(a: DiffMatrix, c: float) -> DiffMatrix:
    return DiffMatrix._from_op(a.values + c, (a,), "add_scalar", lambda g: (g,))


def exp(a: DiffMatrix) -> DiffMatrix:
    out = np.exp(a.values)
    return DiffMatrix._from_op(out, (a,), "exp", lambda g: (g * out,))


def log(a: DiffMatrix, floor: float | None = None) -> DiffMatrix:
    """Natural log. With ``floor`` set, entries below it are clamped first
    and receive zero gradient."""
    av = a.values
    if floor is None:
        if np.any(av <= 0.0):
            raise NumericError("log: non-positive entry")
        return DiffMatrix._from_op(np.log(av), (a,), "log", lambda g: (g / av,))
    if np.any(np.isnan(av)):
        raise NumericError("log: NaN entry")
    active = av > floor
    safe = np.where(active, av, floor)
    return DiffMatrix._from_op(np.log(safe), (a,), "log", lambda g: (np.where(active, g / safe, 0.0),))


def sqrt(a: DiffMatrix) -> DiffMatrix:
    av = a.values
    if np.any(av < 0.0):
        raise NumericError("sqrt: negative entry")
    out = np.sqrt(av)
    if np.any(out == 0.0):
        # derivative is unbounded at zero
        def backward(g):
            return (np.where(out > 0.0, 0.5 * g / np.where(out > 0.0, out, 1.0), 0.0),)
    else:
        def backward(g):
            return (0.5 * g / out,)
    return DiffMatrix._from_op(out, (a,), "sqrt", backward)


def square(a: DiffMatrix) -> DiffMatrix:
    av = a.values
    return DiffMatrix._from_op(av * av, (a,), "square", lambda g: (2.0 * g * av,))


def relu(a: DiffMatrix) -> DiffMatrix:
    mask = a.values > 0.0
    return DiffMatrix._from_op(np.where(mask, a.values, 0.0), (a,), "relu", lambda g: (g * mask,))


def tanh(a: DiffMatrix) -> DiffMatrix:
    out = np.tanh(a.values)
    return DiffMatrix._from_op(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def clip(a: DiffMatrix, lo: float, hi: float) -> DiffMatrix:
    av = a.values
    inside = (av >= lo) & (av <= hi)
    return DiffMatrix._from_op(np.clip(av, lo, hi), (a,), "clip", lambda g: (g * inside,))


def sum(a: DiffMatrix) -> DiffMatrix:  # noqa: A001 - mirrors the op tag
    shape = a.shape
    return DiffMatrix._from_op(np.array([[a.values.sum()]]), (a,), "sum", lambda g: (np.full(shape, g[0, 0]),))


def mean(a: DiffMatrix) -> DiffMatrix:
    shape = a.shape
    n = a.values.size
    return DiffMatrix._from_op(
        np.array([[a.values.mean()]]), (a,), "mean", lambda g: (np.full(shape, g[0, 0] / n),)
    )


def row_sum(a: DiffMatrix) -> DiffMatrix:
    """Sum across columns: n x m -> n x 1."""
    cols = a.shape[1]
    out = a.values.sum(axis=1, keepdims=True)
    return DiffMatrix._from_op(out, (a,), "row_sum", lambda g: (np.repeat(g, cols, axis=1),))


def col_sum(a: DiffMatrix) -> DiffMatrix:
    """Sum down rows: n x m -> 1 x m."""
    rows = a.shape[0]
    out = a.values.sum(axis=0, keepdims=True)
    return DiffMatrix._from_op(out, (a,), "col_sum", lambda g: (np.repeat(g, rows, axis=0),))


def transpose(a: DiffMatrix) -> DiffMatrix:
    return DiffMatrix._from_op(a.values.T.copy(), (a,), "transpose", lambda g: (g.T,))


def concat_cols(*parts: DiffMatrix) -> DiffMatrix:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return DiffMatrix._from_op(np.hstack([p.values for p in parts]), parts, "concat_cols", backward)


def concat_rows(*parts: DiffMatrix) -> DiffMatrix:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return DiffMatrix._from_op(np.vstack([p.values for p in parts]), parts, "concat_rows", backward)


def slice_rows(a: DiffMatrix, start: int, stop: int) -> DiffMatrix:
    if not 0 <= start < stop <= a.shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return DiffMatrix._from_op(a.values[start:stop].copy(), (a,), "slice_rows", backward)


def slice_cols(a: DiffMatrix, start: int, stop: int) -> DiffMatrix:
    if not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return DiffMatrix._from_op(a.values[:, start:stop].copy(), (a,), "slice_cols", backward)


def softmax_rows(a: DiffMatrix) -> DiffMatrix:
    _check_finite("softmax_rows", a)
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return DiffMatrix._from_op(out, (a,), "softmax_rows", backward)


def log_softmax_rows(a: DiffMatrix) -> DiffMatrix:
    _check_finite("log_softmax_rows", a)
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return DiffMatrix._from_op(out, (a,), "log_softmax_rows", backward)


# ---------------------------------------------------------------------------
# tape and backward pass
# ---------------------------------------------------------------------------


class ComputationTape:
    """Nodes reachable from ``root`` that require gradients, parents first."""

    def __init__(self, root: DiffMatrix):
        self.root = root
        self.nodes: list[DiffMatrix] = []
        if not root.requires_grad:
            return
        seen: set[int] = set()
        stack: list[tuple[DiffMatrix, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and parent.node_id not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[DiffMatrix]:
        return [n for n in self.nodes if n.op == "leaf"]


def backward(root: DiffMatrix) -> dict[DiffMatrix, np.ndarray]:
    """Backpropagate from a 1x1 root.

    Gradients of every node on the tape are reset first, so repeated calls
    do not accumulate across passes. Returns a map from each node that
    requires a gradient to its gradient array.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) root, got {root.shape}")
    tape = ComputationTape(root)
    for node in tape.nodes:
        node._grad = None
    if not tape.nodes:
        return {}
    root._grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        if node._backward is None or node._grad is None:
            continue
        for parent, pg in zip(node.parents, node._backward(node._grad)):
            if pg is None or not parent.requires_grad:
                continue
            # gradient arrays are never mutated in place, so aliasing is safe
            parent._grad = pg if parent._grad is None else parent._grad + pg
    return {node: node.grad for node in tape.nodes}


def grad_check(
    f: Callable[..., DiffMatrix],
    inputs: Sequence[DiffMatrix],
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    stencil: int = 2,
) -> float:
    """Max relative error between backprop and central differences.

    The error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    ``stencil=2`` is the usual (f(x+h) - f(x-h)) / 2h; ``stencil=4`` is the
    fourth-order central formula, whose smaller truncation error allows a
    larger ``eps`` and so less cancellation error on sharp losses.

    ``f(*inputs)`` must return a 1x1 DiffMatrix and be deterministic. When
    ``max_entries`` is given, at most that many coordinates per input are
    probed (chosen with ``seed``); otherwise every coordinate is.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if stencil not in (2, 4):
        raise ContractError("stencil must be 2 or 4")
    inputs = list(inputs)
    for x in inputs:
        if x.op != "leaf" or not x.requires_grad:
            raise ContractError("grad_check inputs must be trainable leaves")
    backward(f(*inputs))
    analytic = [x.grad.copy() for x in inputs]
    rng = np.random.default_rng(seed)

    worst = 0.0
    # the probes only need values, so skip graph bookkeeping while probing
    for x in inputs:
        x.requires_grad = False
    try:
        for x, a_grad in zip(inputs, analytic):
            base = x.values.copy()
            coords = np.arange(base.size)
            if max_entries is not None and base.size > max_entries:
                coords = rng.choice(base.size, size=max_entries, replace=False)
            for flat in coords:
                idx = np.unravel_index(flat, base.shape)
                probe = base.copy()

                def at(step):
                    probe[idx] = base[idx] + step
                    x.values = probe
                    return f(*inputs).item()

                numeric = (at(eps) - at(-eps)) / (2.0 * eps)
                if stencil == 4:
                    numeric = (4.0 * numeric - (at(2 * eps) - at(-2 * eps)) / (4.0 * eps)) / 3.0
                x.values = base
                analytic_v = a_grad[idx]
                denom = max(abs(analytic_v), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic_v - numeric) / denom)
    finally:
        for x in inputs:
            x.requires_grad = True
    return worst
