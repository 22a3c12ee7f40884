"""Dense-matrix reverse-mode autodiff and Adam.

Every value is a 2-D float64 :class:`Matrix`. Operations executed inside an
active :class:`Tape` are recorded in forward order; :meth:`Tape.backward`
walks the record in exact reverse order. Outside a tape, operations only
compute values, which is what inference and finite differences use.

>>> w = Matrix([[3.0]], requires_grad=True)
>>> with Tape() as tape:
...     loss = square(w).sum()
>>> float(tape.backward(loss)[w][0, 0])
6.0
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Matrix",
    "Tape",
    "Gradients",
    "ShapeError",
    "AdamState",
    "adam_step",
    "gradient_check",
    "as_matrix",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "neg",
    "sigmoid",
    "tanh",
    "log",
    "clamp",
    "softplus",
    "square",
    "sum_all",
    "sum_rows",
    "sum_cols",
    "mean",
    "concat",
    "row_slice",
    "LOG_EPS",
]

LOG_EPS = 1e-7

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "tsdr_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operands of a primitive have incompatible shapes."""


class Matrix:
    """A 2-D float64 array that may carry gradients.

    1-D input becomes a row vector and scalars become 1x1.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Matrix needs at most 2 dimensions, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Matrix":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Matrix(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if np.isscalar(other):
            return shift(self, float(other))
        return add(self, other)

    def __radd__(self, other):
        if np.isscalar(other):
            return shift(self, float(other))
        return add(as_matrix(other), self)

    def __sub__(self, other):
        if np.isscalar(other):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if np.isscalar(other):
            return shift(neg(self), float(other))
        return sub(as_matrix(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(as_matrix(other), self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean(self)


def as_matrix(x) -> Matrix:
    return x if isinstance(x, Matrix) else Matrix(x)


@dataclass
class _Node:
    out: Matrix
    inputs: tuple[Matrix, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Gradients(Mapping):
    """Gradient buffers keyed by :class:`Matrix` identity.

    Values that did not participate in the loss read as zeros.
    """

    def __init__(self, store: dict[int, np.ndarray], refs: dict[int, Matrix]):
        self._store = store
        self._refs = refs

    def __getitem__(self, m: Matrix) -> np.ndarray:
        g = self._store.get(id(m))
        if g is None or self._refs.get(id(m)) is not m:
            return np.zeros_like(m.data)
        return g

    def __iter__(self):
        return iter(self._refs.values())

    def __len__(self) -> int:
        return len(self._refs)

    def __contains__(self, m) -> bool:
        return isinstance(m, Matrix) and self._refs.get(id(m)) is m


class Tape:
    """Ordered record of primitive applications for one execution context."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Matrix, inputs: tuple[Matrix, ...], backward, op: str) -> None:
        self.nodes.append(_Node(out, inputs, backward, op))

    def backward(self, loss: Matrix) -> Gradients:
        if loss.data.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
        store: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        refs: dict[int, Matrix] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = store.get(id(node.out))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = store.get(key)
                if prev is None:
                    store[key] = gi
                    refs[key] = inp
                else:
                    store[key] = prev + gi
        return Gradients(store, refs)


def _emit(arr: np.ndarray, inputs: tuple[Matrix, ...], backward, op: str) -> Matrix:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(m.requires_grad for m in inputs)
    out = Matrix._wrap(arr, needs)
    if needs:
        tape.record(out, inputs, backward, op)
    return out


def _check_same(op: str, a: Matrix, b: Matrix) -> bool:
    """True if b is a row vector to broadcast over a's rows."""
    if a.shape == b.shape:
        return False
    if b.rows == 1 and b.cols == a.cols:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- primitives -------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _emit(ad @ bd, (a, b), back, "matmul")


def add(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    bcast = _check_same("add", a, b)

    def back(g):
        return g, (g.sum(axis=0, keepdims=True) if bcast else g)

    return _emit(a.data + b.data, (a, b), back, "add")


def sub(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    bcast = _check_same("sub", a, b)

    def back(g):
        return g, (-g.sum(axis=0, keepdims=True) if bcast else -g)

    return _emit(a.data - b.data, (a, b), back, "sub")


def mul(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a), as_matrix(b)
    bcast = _check_same("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        ga = g * bd if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * ad
            if bcast:
                gb = gb.sum(axis=0, keepdims=True)
        return ga, gb

    return _emit(ad * bd, (a, b), back, "mul")


def scale(a: Matrix, s: float) -> Matrix:
    return _emit(a.data * s, (a,), lambda g: (g * s,), "scale")


def shift(a: Matrix, s: float) -> Matrix:
    return _emit(a.data + s, (a,), lambda g: (g,), "shift")


def neg(a: Matrix) -> Matrix:
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(a: Matrix) -> Matrix:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Matrix) -> Matrix:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def log(a: Matrix) -> Matrix:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log: non-positive input; clamp before taking logs")
    return _emit(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a: Matrix, lo: float, hi: float) -> Matrix:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def softplus(a: Matrix) -> Matrix:
    x = a.data
    y = np.logaddexp(0.0, x)

    def back(g):
        return (g * np.exp(x - y),)

    return _emit(y, (a,), back, "softplus")


def square(a: Matrix) -> Matrix:
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * x * g,), "square")


def sum_all(a: Matrix) -> Matrix:
    shape = a.shape
    return _emit(
        np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum"
    )


def sum_rows(a: Matrix) -> Matrix:
    """Sum across columns: (r, c) -> (r, 1)."""
    cols = a.cols
    return _emit(
        a.data.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.repeat(g, cols, axis=1),),
        "sum_rows",
    )


def sum_cols(a: Matrix) -> Matrix:
    """Sum down rows: (r, c) -> (1, c)."""
    rows = a.rows
    return _emit(
        a.data.sum(axis=0, keepdims=True),
        (a,),
        lambda g: (np.repeat(g, rows, axis=0),),
        "sum_cols",
    )


def mean(a: Matrix) -> Matrix:
    n = a.data.size
    shape = a.shape
    return _emit(
        np.array([[a.data.mean()]]),
        (a,),
        lambda g: (np.full(shape, g[0, 0] / n),),
        "mean",
    )


def concat(parts: Sequence[Matrix], axis: int = 0) -> Matrix:
    parts = tuple(as_matrix(p) for p in parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    other = 1 - axis
    ref = parts[0].shape[other]
    for p in parts:
        if p.shape[other] != ref:
            shapes = [q.shape for q in parts]
            raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        if axis == 0:
            return [g[bounds[i] : bounds[i + 1]] for i in range(len(parts))]
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    return _emit(np.concatenate([p.data for p in parts], axis=axis), parts, back, "concat")


def row_slice(a: Matrix, start: int, stop: int) -> Matrix:
    if not 0 <= start <= stop <= a.rows:
        raise ShapeError(f"row_slice: [{start}:{stop}] out of range for shape {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit(a.data[start:stop], (a,), back, "row_slice")


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, Matrix]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Matrix],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{params[name].data.shape} for {name!r}"
            )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- gradient check ---------------------------------------------------------


def gradient_check(
    forward: Callable[[], Matrix],
    params: Mapping[str, Matrix] | Iterable[Matrix],
    probes: int = 50,
    seed: int = 0,
    h: float = 1e-3,
) -> float:
    """Max relative error between autodiff and central differences.

    ``forward`` must rebuild the loss from the current parameter values each
    call. Probes pick (parameter, coordinate) pairs uniformly at random.
    The difference quotient uses the fourth-order five-point stencil, whose
    roundoff stays well below 1e-8 for O(1) losses. A NaN anywhere makes the
    result ``inf``.
    """
    if isinstance(params, Mapping):
        plist = list(params.values())
    else:
        plist = list(params)
    with Tape() as tape:
        loss = forward()
    grads = tape.backward(loss)

    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in plist])
    worst = 0.0
    for _ in range(probes):
        k = int(rng.choice(len(plist), p=sizes / sizes.sum()))
        p = plist[k]
        flat = p.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        vals = []
        for step in (2.0 * h, h, -h, -2.0 * h):
            flat[i] = orig + step
            vals.append(forward().item())
        flat[i] = orig
        fd = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * h)
        ad = float(grads[p].reshape(-1)[i])
        if not (np.isfinite(fd) and np.isfinite(ad)):
            return float("inf")
        worst = max(worst, abs(ad - fd) / max(abs(fd), 1e-8))
    return worst
