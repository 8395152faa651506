"""Define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` records every operation applied to its tensors in creation
order. :func:`backward` walks that record in reverse and accumulates
vector-Jacobian products into the leaves. Graphs are cheap and meant to be
rebuilt for every training step.

Shapes never broadcast implicitly. Operations that combine a matrix with a
row or per-row vector (bias add, row scaling, segment reductions) are
separate primitives with their own names.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError

VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An immutable float64 array plus its position in a graph."""

    __slots__ = ("value", "graph", "id", "op", "inputs", "vjp", "requires_grad", "name")

    def __init__(self, graph, value, op, inputs=(), vjp=None, requires_grad=False, name=None):
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by {op!r}" + (f" ({name})" if name else ""))
        arr.flags.writeable = False
        self.value = arr
        self.graph = graph
        self.op = op
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self.id = graph._register(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor(#{self.id}{label} op={self.op} shape={self.shape})"


class Graph:
    """Append-only record of tensors; ids are topological by construction."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _register(self, t: Tensor) -> int:
        self.nodes.append(t)
        return len(self.nodes) - 1

    def param(self, value, name: str | None = None) -> Tensor:
        return Tensor(self, value, "param", requires_grad=True, name=name)

    def constant(self, value, name: str | None = None) -> Tensor:
        return Tensor(self, value, "const", name=name)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.op == "param"]


def _check_same_graph(*ts: Tensor) -> Graph:
    g = ts[0].graph
    for t in ts[1:]:
        if t.graph is not g:
            raise DomainError("tensors belong to different graphs")
    return g


def _node(op: str, value, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    g = _check_same_graph(*inputs)
    rg = any(t.requires_grad for t in inputs)
    return Tensor(g, value, op, inputs, vjp if rg else None, requires_grad=rg)


def _require_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} must be equal")


# ---------------------------------------------------------------------------
# Linear algebra and elementwise primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.value, b.value
    return _node("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise ``x @ w + b`` with ``b`` a vector added to every row."""
    X, W, bv = x.value, w.value, b.value
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: cannot multiply {X.shape} by {W.shape}")
    if bv.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias shape {bv.shape} does not match output width {W.shape[1]}")
    return _node("affine", X @ W + bv, (x, w, b), lambda g: (g @ W.T, X.T @ g, g.sum(axis=0)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_shape("add", a, b)
    return _node("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_shape("sub", a, b)
    return _node("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def scale_add(a: Tensor, b: Tensor, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    """``alpha * a + beta * b``."""
    _require_shape("scale_add", a, b)
    return _node("scale_add", alpha * a.value + beta * b.value, (a, b), lambda g: (alpha * g, beta * g))


def scale(a: Tensor, alpha: float) -> Tensor:
    return _node("scale", alpha * a.value, (a,), lambda g: (alpha * g,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _node("add_scalar", a.value + c, (a,), lambda g: (g,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _require_shape("hadamard", a, b)
    A, B = a.value, b.value
    return _node("hadamard", A * B, (a, b), lambda g: (g * B, g * A))


def divide(a: Tensor, b: Tensor) -> Tensor:
    _require_shape("divide", a, b)
    A, B = a.value, b.value
    if np.any(B == 0):
        raise DomainError("divide: zero in denominator")
    out = A / B
    return _node("divide", out, (a, b), lambda g: (g / B, -g * out / B))


def square(x: Tensor) -> Tensor:
    X = x.value
    return _node("square", X * X, (x,), lambda g: (2.0 * X * g,))


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root. At exactly zero the subgradient 0 is used."""
    X = x.value
    if np.any(X < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(X)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _node("sqrt", out, (x,), vjp)


def elu(x: Tensor) -> Tensor:
    X = x.value
    neg = np.minimum(X, 0.0)
    out = np.where(X > 0, X, np.expm1(neg))
    deriv = np.where(X > 0, 1.0, np.exp(neg))
    return _node("elu", out, (x,), lambda g: (g * deriv,))


def log_clamped(x: Tensor, floor: float = 1e-30) -> Tensor:
    """``log(max(x, floor))``; gradient is zero where the clamp is active."""
    X = x.value
    active = X > floor
    safe = np.where(active, X, floor)
    return _node("log", np.log(safe), (x,), lambda g: (np.where(active, g / safe, 0.0),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {shape}: {exc}") from None
    return _node("reshape", out, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DomainError("concat: nothing to concatenate")
    vals = [t.value for t in tensors]
    nd = vals[0].ndim
    ax = axis % nd if nd else 0
    for v in vals:
        if v.ndim != nd or any(v.shape[d] != vals[0].shape[d] for d in range(nd) if d != ax):
            raise DimensionError(
                f"concat: shapes {[tuple(x.shape) for x in vals]} disagree off axis {axis}"
            )
    out = np.concatenate(vals, axis=ax)
    cuts = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return _node("concat", out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=ax)))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    shp = x.shape
    return _node("sum", np.sum(x.value), (x,), lambda g: (np.full(shp, float(g)),))


def mean(x: Tensor) -> Tensor:
    shp = x.shape
    n = x.value.size
    if n == 0:
        raise DomainError("mean of empty tensor")
    return _node("mean", np.mean(x.value), (x,), lambda g: (np.full(shp, float(g) / n),))


def softmax(x: Tensor) -> Tensor:
    X = x.value
    if X.ndim != 1:
        raise DimensionError(f"softmax expects a vector, got shape {X.shape}")
    if X.size == 0:
        raise DomainError("softmax of empty vector")
    e = np.exp(X - X.max())
    s = e / e.sum()
    return _node("softmax", s, (x,), lambda g: (s * (g - np.dot(g, s)),))


# ---------------------------------------------------------------------------
# Row / segment primitives used to process a batch of variable-length lists
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segments:
    """Contiguous partition of ``total`` rows into consecutive groups."""

    lengths: tuple[int, ...]
    starts: np.ndarray = field(init=False, repr=False, compare=False)
    ids: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.lengths or any(n < 1 for n in self.lengths):
            raise DomainError("segments must be non-empty")
        lengths = np.asarray(self.lengths, dtype=np.int64)
        object.__setattr__(self, "starts", np.concatenate([[0], np.cumsum(lengths)[:-1]]))
        object.__setattr__(self, "ids", np.repeat(np.arange(len(lengths)), lengths))

    @property
    def count(self) -> int:
        return len(self.lengths)

    @property
    def total(self) -> int:
        return int(np.sum(self.lengths))

    def slice(self, k: int) -> slice:
        s = int(self.starts[k])
        return slice(s, s + self.lengths[k])


def _check_rows(op: str, n: int, seg: Segments):
    if n != seg.total:
        raise DimensionError(f"{op}: {n} rows but segments cover {seg.total}")


def segment_softmax(x: Tensor, seg: Segments) -> Tensor:
    """Softmax applied independently within each segment of a vector."""
    X = x.value
    if X.ndim != 1:
        raise DimensionError(f"segment_softmax expects a vector, got {X.shape}")
    _check_rows("segment_softmax", X.size, seg)
    mx = np.maximum.reduceat(X, seg.starts)
    e = np.exp(X - mx[seg.ids])
    s = e / np.add.reduceat(e, seg.starts)[seg.ids]

    def vjp(g):
        inner = np.add.reduceat(g * s, seg.starts)
        return (s * (g - inner[seg.ids]),)

    return _node("segment_softmax", s, (x,), vjp)


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of matrix ``x`` by scalar ``w[i]``."""
    X, W = x.value, w.value
    if X.ndim != 2 or W.shape != (X.shape[0],):
        raise DimensionError(f"scale_rows: matrix {X.shape} with weights {W.shape}")
    return _node("scale_rows", X * W[:, None], (x, w), lambda g: (g * W[:, None], np.einsum("ij,ij->i", g, X)))


def segment_sum(x: Tensor, seg: Segments) -> Tensor:
    """Sum rows within each segment: (N, D) -> (count, D)."""
    X = x.value
    if X.ndim != 2:
        raise DimensionError(f"segment_sum expects a matrix, got {X.shape}")
    _check_rows("segment_sum", X.shape[0], seg)
    return _node("segment_sum", np.add.reduceat(X, seg.starts, axis=0), (x,), lambda g: (g[seg.ids],))


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``x[index]``; repeated indices accumulate in the gradient.

    Serves both to broadcast per-segment vectors back to their items and as
    an embedding lookup.
    """
    X = x.value
    idx = np.asarray(index, dtype=np.int64)
    if X.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got {X.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= X.shape[0]):
        raise DomainError(f"gather_rows: index out of range for {X.shape[0]} rows")
    shp = X.shape

    def vjp(g):
        out = np.zeros(shp)
        np.add.at(out, idx, g)
        return (out,)

    return _node("gather_rows", X[idx], (x,), vjp)


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between the rows of ``a`` and ``b``."""
    A, B = a.value, b.value
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimensionError(f"pairwise_sqdist: {A.shape} vs {B.shape}")
    n, m, d = A.shape[0], B.shape[0], A.shape[1]
    if n * m * d <= 2_000_000:
        diff = A[:, None, :] - B[None, :, :]
        out = np.einsum("ijk,ijk->ij", diff, diff)
    else:
        out = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
        np.maximum(out, 0.0, out=out)

    def vjp(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * A - g @ B)
        gb = 2.0 * (g.sum(axis=0)[:, None] * B - g.T @ A)
        return ga, gb

    return _node("pairwise_sqdist", out, (a, b), vjp)


def min_axis(x: Tensor, axis: int) -> Tensor:
    """Minimum along ``axis`` of a matrix; gradient routed to the first argmin."""
    X = x.value
    if X.ndim != 2 or X.shape[axis] == 0:
        raise DomainError(f"min_axis: cannot reduce shape {X.shape} along {axis}")
    arg = np.argmin(X, axis=axis)
    out = np.take_along_axis(X, np.expand_dims(arg, axis), axis).squeeze(axis)

    def vjp(g):
        full = np.zeros(X.shape)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _node("min_axis", out, (x,), vjp)


def segment_min_cols(x: Tensor, seg: Segments) -> Tensor:
    """For each row, the minimum over each column segment: (N, M) -> (N, count)."""
    X = x.value
    if X.ndim != 2:
        raise DimensionError(f"segment_min_cols expects a matrix, got {X.shape}")
    _check_rows("segment_min_cols", X.shape[1], seg)
    rows = np.arange(X.shape[0])[:, None]
    arg = np.empty((X.shape[0], seg.count), dtype=np.int64)
    for k in range(seg.count):
        sl = seg.slice(k)
        arg[:, k] = np.argmin(X[:, sl], axis=1) + sl.start
    out = X[rows, arg]

    def vjp(g):
        full = np.zeros(X.shape)
        np.add.at(full, (np.broadcast_to(rows, arg.shape), arg), g)
        return (full,)

    return _node("segment_min_cols", out, (x,), vjp)


# ---------------------------------------------------------------------------
# Reverse pass and gradient checking
# ---------------------------------------------------------------------------


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to every ``param`` leaf.

    Returns a mapping from leaf id to gradient array; leaves the loss does
    not depend on get zeros.
    """
    if loss.graph is not graph:
        raise DomainError("loss tensor belongs to a different graph")
    if loss.value.size != 1:
        raise DomainError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for node in reversed(graph.nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or node.vjp is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    return {leaf.id: grads.get(leaf.id, np.zeros(leaf.shape)) for leaf in graph.leaves()}


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tol]

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-8) -> float:
    """Norm-wise relative error; two gradients both below ``atol`` count as equal."""
    na, nn = np.linalg.norm(analytic), np.linalg.norm(numeric)
    if max(na, nn) < atol:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / max(na, nn))


def gradient_check(
    f: Callable[[Graph, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-6,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare :func:`backward` against central finite differences.

    ``f`` builds a scalar loss from leaf tensors created for ``params``.
    """
    def build(values):
        g = Graph()
        leaves = {k: g.param(v, name=k) for k, v in values.items()}
        return g, leaves, f(g, leaves)

    g, leaves, loss = build(params)
    analytic = backward(g, loss)
    errors = {}
    for name in names if names is not None else params:
        base = np.array(params[name], dtype=np.float64)
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = dict(params)
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[idx] += sign * step
                vals[name] = pert
                numeric[idx] += sign * float(build(vals)[2].value)
        numeric /= 2.0 * step
        errors[name] = relative_error(analytic[leaves[name].id], numeric)
    return GradCheckReport(errors, tol)
