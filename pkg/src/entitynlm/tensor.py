"""Dense float64 tensors with a reverse-mode autodiff tape.

Operations always compute eagerly on numpy arrays.  When a :class:`Tape` is
active (``with Tape() as tape:``) and at least one input requires a gradient,
the operation is appended to the tape together with a closure that maps the
output gradient to input gradients.  ``tape.backward(loss)`` then sweeps the
nodes in reverse order.

Outside a tape the same functions are plain numpy computations, which is what
sampling and evaluation use.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import math

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericalError

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("entitynlm_tape", default=None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class RowGrad:
    """Sparse gradient: values to scatter-add into selected rows."""

    __slots__ = ("rows", "values")

    def __init__(self, rows, values):
        self.rows = rows
        self.values = values


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations for one loss."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss was not recorded on a tape (compute it inside the `with Tape()` block)")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if isinstance(gi, RowGrad):
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    np.add.at(inp.grad, gi.rows, gi.values)
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64).reshape(inp.shape)
                else:
                    inp.grad += gi


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def grad_enabled() -> bool:
    return _ACTIVE.get() is not None


@contextlib.contextmanager
def no_grad():
    """Suspend recording on the active tape (results are constants)."""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def apply(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result and, if recording, attach ``backward_fn``.

    ``backward_fn(g)`` must return one gradient (array, RowGrad or None) per input.
    """
    # a sum is non-finite iff some entry is (short of overflow, which is also worth flagging)
    if not math.isfinite(data.sum()):
        raise NumericalError(f"{op}: non-finite value in result")
    out = Tensor(data)
    tape = _ACTIVE.get()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                tape.nodes.append(Node(op, tuple(inputs), out, backward_fn))
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    sa, sb = a.shape, b.shape
    return apply("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    sa, sb = a.shape, b.shape
    return apply("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return apply(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    return apply("scale", a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return apply("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return apply("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_value(x) -> np.ndarray:
    return _sigmoid(np.asarray(x, dtype=np.float64))


# reductions and indexing ----------------------------------------------------


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return apply("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def take(a: Tensor, index) -> Tensor:
    """Select ``a.data[index]`` (integer or slice on the first axis)."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return apply("take", np.array(a.data[index]), (a,), back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: need equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return apply("dot", np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


def concat(parts: Sequence[Tensor]) -> Tensor:
    for p in parts:
        if p.data.ndim != 1:
            raise DimensionError(f"concat: expects vectors, got shape {p.shape}")
    sizes = [p.size for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return apply("concat", np.concatenate([p.data for p in parts]), tuple(parts), back)


def stack(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix (one row each)."""
    if not rows:
        raise DimensionError("stack: no inputs")
    shape = rows[0].shape
    for r in rows:
        if r.shape != shape or r.data.ndim != 1:
            raise DimensionError(f"stack: row shapes differ ({shape} vs {r.shape})")
    return apply("stack", np.stack([r.data for r in rows]), tuple(rows), lambda g: tuple(g))


def embedding(table: Tensor, index: int) -> Tensor:
    """Row lookup; the gradient is scattered back into that single row."""
    if table.data.ndim != 2:
        raise DimensionError(f"embedding: table must be a matrix, got {table.shape}")
    n = table.shape[0]
    if not 0 <= index < n:
        raise DimensionError(f"embedding: row {index} outside table with {n} rows")
    return apply("embedding", table.data[index].copy(), (table,), lambda g: (RowGrad(index, g),))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None (evaluation)."""
    if p <= 0.0 or rng is None:
        return a
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return apply("dropout", a.data * mask, (a,), lambda g: (g * mask,))


# linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands (vectors act as rows/columns)."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise DimensionError(f"matmul: operands must be 1-D or 2-D, got {a.shape} and {b.shape}")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0]
    if inner_a != inner_b:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")

    def back(g):
        g2 = g.reshape(ad.shape[0] if ad.ndim == 2 else 1, bd.shape[1] if bd.ndim == 2 else 1)
        a2 = ad.reshape(1, -1) if ad.ndim == 1 else ad
        b2 = bd.reshape(-1, 1) if bd.ndim == 1 else bd
        ga = (g2 @ b2.T).reshape(ad.shape) if a.requires_grad else None
        gb = (a2.T @ g2).reshape(bd.shape) if b.requires_grad else None
        return ga, gb

    return apply("matmul", np.asarray(ad @ bd), (a, b), back)


def bilinear(h: Tensor, W: Tensor, v: Tensor) -> Tensor:
    """Scalar ``h^T W v``."""
    hd, Wd, vd = h.data, W.data, v.data
    if hd.ndim != 1 or vd.ndim != 1 or Wd.shape != (hd.size, vd.size):
        raise DimensionError(f"bilinear: shapes h{h.shape}, W{W.shape}, v{v.shape} do not conform")
    Wv = Wd @ vd
    hW = hd @ Wd

    def back(g):
        return g * Wv, g * np.outer(hd, vd), g * hW

    return apply("bilinear", np.asarray(hd @ Wv), (h, W, v), back)


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    if x.ndim != 1 or x.size == 0:
        raise DimensionError(f"log_softmax: needs a non-empty vector, got shape {logits.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("log_softmax: non-finite logits")
    shifted = x - x.max()
    out = shifted - np.log(np.exp(shifted).sum())
    p = np.exp(out)
    return apply("log_softmax", out, (logits,), lambda g: (g - p * g.sum(),))


softmax_log = log_softmax


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def logsumexp(values: Iterable[float]) -> float:
    """Stable log(sum(exp(values))) for plain floats; -inf for an all -inf input."""
    x = np.fromiter(values, dtype=np.float64)
    if x.size == 0:
        return -np.inf
    m = x.max()
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.exp(x - m).sum()))


def l2_normalize(u: Tensor) -> Tensor:
    x = u.data
    n = float(np.sqrt(x @ x))
    if n == 0.0 or not np.isfinite(n):
        raise DegenerateInputError("l2_normalize: vector has zero (or non-finite) norm")
    y = x / n
    return apply("l2_normalize", y, (u,), lambda g: ((g - y * (y @ g)) / n,))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors, accumulated left to right."""
    if not terms:
        raise DimensionError("add_n: no terms")
    shape = terms[0].shape
    total = np.zeros(shape)
    for t in terms:
        if t.shape != shape:
            raise DimensionError(f"add_n: shape {t.shape} differs from {shape}")
        total = total + t.data
    return apply("add_n", total, tuple(terms), lambda g: tuple(g for _ in terms))
