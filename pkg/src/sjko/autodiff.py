"""Reverse-mode automatic differentiation on dense float64 arrays.

The computation graph is a DAG of :class:`Tensor` nodes.  Every operation
records, per parent, a closure mapping the upstream gradient (itself a
``Tensor``) to that parent's gradient contribution.  Because the closures
build ordinary graph nodes, the output of :func:`grad_tensors` is
differentiable again; that is how the squared input-gradient penalty gets
exact parameter gradients (reverse over reverse) without general Hessian
machinery.

Supported shapes are what MLPs need: scalars, vectors, matrices.  Binary
broadcasting is limited to scalar-with-anything and row-bias addition
``(n, m) op (m,)``.  Reductions go through numpy's deterministic pairwise
summation and gradient accumulation follows a fixed reverse topological
order, so identical inputs produce bitwise-identical outputs and gradients.
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class GraphError(ValueError):
    """Raised for malformed graph construction or gradient requests."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 2:
        raise GraphError(f"only scalars, vectors and matrices are supported, got ndim={arr.ndim}")
    return arr


class Tensor:
    """One node of the computation graph.

    ``smooth`` is False if any piecewise-linear nonlinearity fed this node;
    the input-gradient penalty rejects such graphs at build time because
    their second derivative is not defined everywhere.
    """

    __slots__ = ("data", "parents", "vjps", "requires_grad", "smooth", "__weakref__")

    def __init__(self, data, parents=(), vjps=(), requires_grad=False, smooth=True):
        self.data = _as_f64(data)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.vjps: tuple[Callable[["Tensor"], "Tensor"], ...] = tuple(vjps)
        self.requires_grad = requires_grad
        self.smooth = smooth

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Tensor:
    """A graph node that never receives a gradient."""
    return Tensor(value)


def leaf(value) -> Tensor:
    """A differentiable input (parameter or data point)."""
    return Tensor(value, requires_grad=True)


def _node(data, parents: tuple[Tensor, ...], vjps, smooth: bool = True) -> Tensor:
    return Tensor(
        data,
        parents=parents,
        vjps=vjps,
        requires_grad=any(p.requires_grad for p in parents),
        smooth=smooth and all(p.smooth for p in parents),
    )


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise GraphError(f"unsupported broadcast between shapes {sa} and {sb}")


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce an upstream gradient back to an operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return reduce_sum(g)
    if g.ndim == 2 and shape == (g.shape[1],):
        return reduce_sum(g, axis=0)
    raise GraphError(f"cannot reduce gradient of shape {g.shape} to {shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _node(
        a.data + b.data,
        (a, b),
        (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _node(
        a.data - b.data,
        (a, b),
        (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(neg(g), b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _node(
        a.data * b.data,
        (a, b),
        (lambda g: _sum_to(mul(g, b), a.shape), lambda g: _sum_to(mul(g, a), b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), (lambda g: neg(g),))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (no node for the constant)."""
    c = float(c)
    return _node(a.data * c, (a,), (lambda g: scale(g, c),))


def shift(a: Tensor, c: float) -> Tensor:
    """Add a Python constant elementwise."""
    return _node(a.data + float(c), (a,), (lambda g: g,))


def _self_vjp(out: Tensor, fn) -> tuple:
    """VJP closure that uses the op's own output without a reference cycle.

    A strong closure over ``out`` would make the node reference itself through
    its vjp tuple, leaving every graph to the cyclic collector; the weakref is
    always valid when the vjp runs because the backward traversal holds the
    node strongly.
    """
    ref = weakref.ref(out)

    def vjp(g: Tensor) -> Tensor:
        node = ref()
        if node is None:
            raise GraphError("graph node freed before its backward ran")
        return fn(g, node)

    return (vjp,)


def reciprocal(a: Tensor) -> Tensor:
    out = _node(1.0 / a.data, (a,), ())
    out.vjps = _self_vjp(out, lambda g, node: neg(mul(g, square(node))))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)),
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise GraphError("transpose expects a matrix")
    # view, not copy: BLAS consumes transposed strides directly
    return _node(a.data.T, (a,), (lambda g: transpose(g),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), (lambda g: reshape(g, old),))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum all entries (axis=None), down columns (axis=0) or across rows (axis=1)."""
    if axis is None:
        return _node(np.sum(a.data), (a,), (lambda g: _spread_full(g, a.shape),))
    if a.ndim != 2 or axis not in (0, 1):
        raise GraphError(f"reduce_sum axis={axis} needs a matrix operand")
    n, m = a.shape
    if axis == 0:
        return _node(np.sum(a.data, axis=0), (a,), (lambda g: _spread_rows(g, n),))
    return _node(np.sum(a.data, axis=1), (a,), (lambda g: _spread_cols(g, m),))


def _spread_full(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    # adjoint of full reduction: broadcast a scalar to `shape`
    return _node(np.broadcast_to(g.data, shape).copy(), (g,), (lambda u: reduce_sum(u),))


def _spread_rows(g: Tensor, n: int) -> Tensor:
    # adjoint of axis-0 reduction: repeat a row vector n times
    return _node(np.broadcast_to(g.data, (n, g.shape[0])).copy(), (g,), (lambda u: reduce_sum(u, axis=0),))


def _spread_cols(g: Tensor, m: int) -> Tensor:
    # adjoint of axis-1 reduction: repeat a column vector m times
    return _node(np.repeat(g.data[:, None], m, axis=1), (g,), (lambda u: reduce_sum(u, axis=1),))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), (lambda g: mul(g, scale(a, 2.0)),))


def exp(a: Tensor) -> Tensor:
    out = _node(np.exp(a.data), (a,), ())
    out.vjps = _self_vjp(out, lambda g, node: mul(g, node))
    return out


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), (lambda g: mul(g, reciprocal(a)),))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) in overflow-safe form
    return _node(np.logaddexp(0.0, a.data), (a,), (lambda g: mul(g, sigmoid(a)),))


def sigmoid(a: Tensor) -> Tensor:
    out = _node(expit(a.data), (a,), ())
    # sigma' = sigma - sigma^2, expressed through the forward node
    out.vjps = _self_vjp(out, lambda g, node: mul(g, sub(node, square(node))))
    return out


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0.0).astype(np.float64)
    return _node(a.data * mask, (a,), (lambda g: mul(g, constant(mask)),), smooth=False)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), a smooth rectifier; composite, so all derivatives follow."""
    return mul(a, sigmoid(a))


def mean_all(a: Tensor) -> Tensor:
    return scale(reduce_sum(a), 1.0 / a.data.size)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise GraphError(f"concat_rows shape mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0]
    total = n + b.shape[0]
    return _node(
        np.concatenate([a.data, b.data], axis=0),
        (a, b),
        (lambda g: slice_rows(g, 0, n), lambda g: slice_rows(g, n, total)),
    )


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise GraphError(f"concat_cols shape mismatch: {a.shape} vs {b.shape}")
    m = a.shape[1]
    total = m + b.shape[1]
    return _node(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        (lambda g: slice_cols(g, 0, m), lambda g: slice_cols(g, m, total)),
    )


def slice_rows(a: Tensor, i0: int, i1: int) -> Tensor:
    if a.ndim != 2 or not (0 <= i0 <= i1 <= a.shape[0]):
        raise GraphError(f"bad row slice [{i0}:{i1}] of shape {a.shape}")
    n = a.shape[0]
    return _node(a.data[i0:i1].copy(), (a,), (lambda g: _pad_rows(g, n, i0),))


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    if a.ndim != 2 or not (0 <= j0 <= j1 <= a.shape[1]):
        raise GraphError(f"bad column slice [{j0}:{j1}] of shape {a.shape}")
    m = a.shape[1]
    return _node(a.data[:, j0:j1].copy(), (a,), (lambda g: _pad_cols(g, m, j0),))


def _pad_rows(g: Tensor, n_total: int, i0: int) -> Tensor:
    k = g.shape[0]
    data = np.zeros((n_total, g.shape[1]))
    data[i0:i0 + k] = g.data
    return _node(data, (g,), (lambda u: slice_rows(u, i0, i0 + k),))


def _pad_cols(g: Tensor, m_total: int, j0: int) -> Tensor:
    k = g.shape[1]
    data = np.zeros((g.shape[0], m_total))
    data[:, j0:j0 + k] = g.data
    return _node(data, (g,), (lambda u: slice_cols(u, j0, j0 + k),))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(output: Tensor) -> list[Tensor]:
    """Deterministic post-order over the gradient-relevant subgraph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad_tensors(output: Tensor, wrts: Sequence[Tensor]) -> list[Tensor | None]:
    """Gradients of a scalar output as graph nodes (differentiable again).

    Entries are None for tensors the output does not depend on.
    """
    if output.shape != ():
        raise GraphError(f"gradient target must be scalar, got shape {output.shape}")
    grads: dict[int, Tensor] = {id(output): constant(np.float64(1.0))}
    if output.requires_grad:
        for node in reversed(_topo_order(output)):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.requires_grad:
                    continue
                contribution = vjp(g)
                prior = grads.get(id(parent))
                grads[id(parent)] = contribution if prior is None else add(prior, contribution)
    return [grads.get(id(w)) for w in wrts]


def gradient_arrays(output: Tensor, wrts: Sequence[Tensor]) -> list[np.ndarray]:
    """Like grad_tensors but as plain arrays, with exact zeros for unused inputs."""
    nodes = grad_tensors(output, wrts)
    return [np.zeros(w.shape) if n is None else n.data for w, n in zip(wrts, nodes)]


# ---------------------------------------------------------------------------
# parameter storage
# ---------------------------------------------------------------------------

class ParamVector:
    """Ordered, named float64 parameter segments with a stable flat layout.

    Segment order is fixed at construction; flat offsets therefore survive
    snapshot/restore round trips.
    """

    def __init__(self, segments: dict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = segments.items() if isinstance(segments, dict) else segments
        self._segments: dict[str, np.ndarray] = {
            name: _as_f64(arr).copy() for name, arr in items
        }

    @property
    def names(self) -> list[str]:
        return list(self._segments)

    @property
    def total_len(self) -> int:
        return sum(a.size for a in self._segments.values())

    def get(self, name: str) -> np.ndarray:
        return self._segments[name]

    def items(self):
        return self._segments.items()

    def copy(self) -> "ParamVector":
        return ParamVector(self._segments)

    def zeros_like(self) -> "ParamVector":
        return ParamVector({n: np.zeros_like(a) for n, a in self._segments.items()})

    def to_flat(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._segments.values()])

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        flat = _as_f64(flat)
        if flat.size != self.total_len:
            raise GraphError(f"flat vector length {flat.size} != total_len {self.total_len}")
        out: dict[str, np.ndarray] = {}
        offset = 0
        for name, arr in self._segments.items():
            out[name] = flat[offset:offset + arr.size].reshape(arr.shape).copy()
            offset += arr.size
        return ParamVector(out)

    def leaves(self) -> dict[str, Tensor]:
        return {name: leaf(arr) for name, arr in self._segments.items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.names == other.names and all(
            np.array_equal(self.get(n), other.get(n)) for n in self.names
        )


# ---------------------------------------------------------------------------
# recorded forward pass and its gradients
# ---------------------------------------------------------------------------

class ValueGraph:
    """One recorded builder evaluation: output node plus the leaves fed in."""

    def __init__(self, output: Tensor, input_leaves: list[Tensor], param_leaves: dict[str, Tensor]):
        self.output = output
        self.input_leaves = input_leaves
        self.param_leaves = param_leaves

    @property
    def has_nan(self) -> bool:
        return not np.all(np.isfinite(self.output.data))


def forward(builder, inputs: Sequence[np.ndarray], params: ParamVector) -> tuple[np.ndarray, ValueGraph]:
    """Evaluate ``builder(input_leaves, param_leaves)`` and record the graph.

    The builder must compose only the operations of this module; anything
    else fails at construction because foreign values cannot enter a Tensor.
    """
    input_leaves = [leaf(x) for x in inputs]
    param_leaves = params.leaves()
    output = builder(input_leaves, param_leaves)
    if not isinstance(output, Tensor):
        raise GraphError("builder must return a Tensor")
    return output.data.copy(), ValueGraph(output, input_leaves, param_leaves)


def grad(graph: ValueGraph) -> ParamVector:
    """d(output)/d(params); parameters the output never touched get exact zeros."""
    names = list(graph.param_leaves)
    leaves = [graph.param_leaves[n] for n in names]
    arrays = gradient_arrays(graph.output, leaves)
    return ParamVector({n: a for n, a in zip(names, arrays)})


def input_gradient(graph: ValueGraph, index: int = 0) -> np.ndarray:
    """d(output)/d(inputs[index]) for a scalar-output graph."""
    if not 0 <= index < len(graph.input_leaves):
        raise GraphError(f"no input with index {index}")
    target = graph.input_leaves[index]
    node = grad_tensors(graph.output, [target])[0]
    if node is None:
        raise GraphError("requested input does not participate in the graph")
    return node.data


def r1_param_gradient(potential_builder, y: np.ndarray, params: ParamVector) -> tuple[float, ParamVector]:
    """Squared input-gradient penalty and its exact parameter gradient.

    ``potential_builder(y_leaf, param_leaves)`` must return a scalar.  For a
    batched ``y`` the builder should sum per-row potential values; the
    returned penalty is then the sum of per-row squared gradient norms.
    Piecewise-linear nonlinearities anywhere in the potential are rejected.
    """
    y_leaf = leaf(y)
    param_leaves = params.leaves()
    out = potential_builder(y_leaf, param_leaves)
    if out.shape != ():
        raise GraphError("potential must produce a scalar")
    if not out.smooth:
        raise GraphError("input-gradient penalty requires smooth nonlinearities in the potential")
    gy = grad_tensors(out, [y_leaf])[0]
    if gy is None:
        raise GraphError("potential does not depend on its input")
    penalty = reduce_sum(square(gy))
    names = list(param_leaves)
    arrays = gradient_arrays(penalty, [param_leaves[n] for n in names])
    return float(penalty.data), ParamVector({n: a for n, a in zip(names, arrays)})


def finite_diff_check(builder, inputs: Sequence[np.ndarray], params: ParamVector,
                      epsilon: float = 1e-5) -> float:
    """Max relative error of reverse-mode gradients vs central differences.

    Returns max over parameter coordinates of
    ``|analytic - central| / (|analytic| + 1e-12)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise GraphError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    _, graph = forward(builder, inputs, params)
    analytic = grad(graph).to_flat()

    flat = params.to_flat()

    def value_at(vec: np.ndarray) -> float:
        out, _ = forward(builder, inputs, params.with_flat(vec))
        return float(out)

    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + epsilon
        hi = value_at(bumped)
        bumped[i] = flat[i] - epsilon
        lo = value_at(bumped)
        central = (hi - lo) / (2.0 * epsilon)
        rel = abs(analytic[i] - central) / (abs(analytic[i]) + 1e-12)
        worst = max(worst, rel)
    return worst
