"""Dense float64 arrays with a minimal reverse-mode gradient tape.

Every primitive computes its forward value with numpy and, when at least one
input is tracked, appends a node to the shared :class:`Tape` holding the
closure that maps the output cotangent to input cotangents. ``Tape.grad``
walks the nodes once in reverse creation order.

Only scalar<->tensor broadcasting is accepted by the elementwise ops. Adding a
bias row to every row of a matrix goes through the explicit :func:`add_row`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class DegenerateInputError(ValueError):
    """A row is too close to zero to define a direction."""

    def __init__(self, row: int, norm: float):
        super().__init__(f"row {row} has norm {norm:.3e} below {NORM_EPS:g}")
        self.row = row
        self.norm = norm


class DomainError(ValueError):
    """Input outside the domain of a primitive (e.g. log of a non-positive)."""


class NumericError(ArithmeticError):
    """A non-finite value turned up where a finite one was required."""


@dataclass
class _Node:
    out: int
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Creation order is a topological order, so the backward pass is a single
    reverse sweep. A tape belongs to one thread.
    """

    nodes: list[_Node] = field(default_factory=list)
    _shapes: list[tuple[int, ...]] = field(default_factory=list)

    def _new_id(self, shape: tuple[int, ...]) -> int:
        self._shapes.append(shape)
        return len(self._shapes) - 1

    def leaf(self, value, name: str | None = None) -> "Tensor":
        """Register a differentiable input."""
        arr = _as_array(value).copy()
        return Tensor(arr, self, self._new_id(arr.shape), name=name)

    def _record(self, value: np.ndarray, inputs: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(value, self, self._new_id(value.shape))
        ids = tuple(t.id if t.tracked else -1 for t in inputs)
        self.nodes.append(_Node(out.id, ids, backward))
        return out

    def grad(self, output: "Tensor", wrt: Sequence["Tensor"], seed=None) -> list[np.ndarray]:
        """Gradients of ``output`` with respect to ``wrt``.

        The tape is not consumed; calling this again replays the same sweep
        and returns bit-identical arrays.
        """
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        grads: dict[int, np.ndarray] = {
            output.id: np.ones(output.shape) if seed is None else _as_array(seed).reshape(output.shape)
        }
        for node in reversed(self.nodes):
            g = grads.pop(node.out, None)
            if g is None:
                continue
            for idx, contrib in zip(node.inputs, node.backward(g)):
                if idx < 0 or contrib is None:
                    continue
                if idx in grads:
                    grads[idx] = grads[idx] + contrib
                else:
                    grads[idx] = contrib
        return [grads.get(t.id, np.zeros(t.shape)) if t.tracked else np.zeros(t.shape) for t in wrt]


class Tensor:
    """A float64 array, optionally tracked on a :class:`Tape`."""

    __slots__ = ("data", "tape", "id", "name")
    __array_priority__ = 100

    def __init__(self, data: np.ndarray, tape: Tape | None = None, id: int = -1, name: str | None = None):
        self.data = data
        self.tape = tape
        self.id = id
        self.name = name

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" id={self.id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(_as_array(value))


def _apply(value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tapes = {id(t.tape): t.tape for t in inputs if t.tracked}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise ValueError("operands live on different tapes")
    (tape,) = tapes.values()
    return tape._record(value, inputs, backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _apply(A @ B, (a, b), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {x.shape}")
    return _apply(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _apply(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(old),))


def add_row(x, row) -> Tensor:
    """Add the vector ``row`` to every row of ``x``."""
    x, row = as_tensor(x), as_tensor(row)
    if x.data.ndim != 2 or row.shape != (x.shape[1],):
        raise DimensionError(f"add_row: row {row.shape} does not fit matrix {x.shape}")
    return _apply(x.data + row.data, (x, row), lambda g: (g, g.sum(axis=0)))


def concat_cols(*parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, widths[k]:widths[k + 1]] for k in range(len(parts)))

    return _apply(np.concatenate([p.data for p in parts], axis=1), parts, backward)


def take_rows(x, index) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def backward(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return _apply(x.data[idx], (x,), backward)


def diag(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"diag needs a square matrix, got {x.shape}")
    return _apply(np.diag(x.data).copy(), (x,), lambda g: (np.diag(g),))


def row_dot(x, y) -> Tensor:
    """Per-row inner products of two equally shaped matrices."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape or x.data.ndim != 2:
        raise DimensionError(f"row_dot: shapes {x.shape} and {y.shape} differ")
    X, Y = x.data, y.data
    return _apply(np.einsum("ij,ij->i", X, Y), (x, y), lambda g: (g[:, None] * Y, g[:, None] * X))


def reduce_sum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _apply(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def reduce_mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    return mul(reduce_sum(x), 1.0 / n)


def row_l2_normalize(x) -> Tensor:
    """Scale each row of ``x`` to unit Euclidean norm.

    Backward applies the row Jacobian ``(I - v v^T) / ||h||``.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"row_l2_normalize needs a matrix, got {x.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))
    bad = np.flatnonzero(~(norms >= NORM_EPS))
    if bad.size:
        raise DegenerateInputError(int(bad[0]), float(norms[bad[0]]))
    v = x.data / norms[:, None]

    def backward(g):
        radial = np.einsum("ij,ij->i", g, v)
        return ((g - radial[:, None] * v) / norms[:, None],)

    return _apply(v, (x,), backward)


def log_softmax(x, axis: int) -> Tensor:
    """Max-subtracted log-softmax along ``axis`` of a matrix."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax needs a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _apply(out, (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping was active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _apply(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b, opname):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are not scalar-compatible")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return _apply(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _apply(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    A, B = a.data, b.data
    return _apply(A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    # derivative at the kink is 0
    active = x.data > 0
    return _apply(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflowed")
    return _apply(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(~(x.data > 0)):
        raise DomainError(f"log of non-positive value {x.data.min():g}")
    X = x.data
    return _apply(np.log(X), (x,), lambda g: (g / X,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    # two-branch form avoids overflow in exp
    e = np.exp(-np.abs(X))
    out = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _apply(out, (x,), lambda g: (g * out * (1.0 - out),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name to one of add, sub, mul, relu, exp, log, sigmoid."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


def custom(value: np.ndarray, inputs: Sequence, backward) -> Tensor:
    """Record a primitive whose backward rule is supplied by the caller.

    Used by modules that own an analytic gradient (the batched triangle
    scores) so the rule stays next to its derivation.
    """
    return _apply(np.asarray(value, dtype=np.float64), [as_tensor(t) for t in inputs], backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: np.ndarray
    numeric: np.ndarray


def numeric_gradient(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` per coordinate."""
    x = np.array(_as_array(point), dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(Tensor(x.copy())).data)
        flat[k] = orig - step
        fm = float(f(Tensor(x.copy())).data)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite f while probing coordinate {np.unravel_index(k, x.shape)}")
        g[k] = (fp - fm) / (2.0 * step)
    return out


def finite_diff_check(
    f: Callable[[Tensor], Tensor], point, step: float = 1e-5, abs_floor: float = 1e-8
) -> GradCheckResult:
    """Compare the tape gradient of scalar ``f`` at ``point`` to central differences.

    Per coordinate the error is ``|a - n| / |a|``, falling back to ``|a - n|``
    when ``|a| < abs_floor``. The maximum over coordinates is reported.
    """
    tape = Tape()
    x = tape.leaf(point)
    y = f(x)
    if y.data.size != 1:
        raise DimensionError(f"finite_diff_check needs a scalar function, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise NumericError("non-finite f at the base point")
    (analytic,) = tape.grad(y, [x])
    numeric = numeric_gradient(f, point, step)
    diff = np.abs(analytic - numeric)
    mag = np.abs(analytic)
    err = np.where(mag < abs_floor, diff, diff / np.maximum(mag, abs_floor))
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    return GradCheckResult(float(err.max()) if err.size else 0.0, tuple(int(i) for i in worst), analytic, numeric)
