"""Reverse-mode autodiff core and Adam optimizer.

Everything downstream (relationship encoder, attention, motion LSTM, loss)
is composed from the primitives in this module, so training needs no
hand-derived gradients anywhere else.

Conventions:
  * all values are float64 numpy arrays, row-major;
  * binary elementwise ops require identical shapes (no broadcasting);
  * vectors are column matrices of shape (n, 1) unless noted;
  * ops record onto the active ``Tape`` when one is open, and compute
    plain forward values otherwise.

A tape and the tensors it references form a single-threaded unit of work.
The active tape is thread-local, so distinct tapes (e.g. independent
evaluation windows) may run on distinct threads concurrently.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NonFiniteError(ArithmeticError):
    """A value became NaN or infinite."""


class EmptyNeighborSetError(ValueError):
    """masked_softmax was asked to normalize over an empty neighbor set."""


class MissingGradientError(RuntimeError):
    """An optimizer step touched a parameter whose grad slot is empty."""


class Tensor:
    """A float64 array plus an additively-accumulated gradient slot."""

    __slots__ = ("values", "grad")

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite values")
        self.values = arr
        self.grad = None

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return _fresh(np.zeros(shape, dtype=np.float64))

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)})"


def _fresh(arr: np.ndarray) -> Tensor:
    """Wrap an op output without copying; outputs must stay finite."""
    t = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("operation produced non-finite values")
    t.values = arr
    t.grad = None
    return t


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of executed primitives for one forward pass.

    Execution order is a valid topological order, so ``backward`` replays
    the record once, in reverse. Tapes do not nest.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        """Drop all recorded nodes; tensors stay valid."""
        self.nodes.clear()


def _record(inputs, output, vjp) -> None:
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(_Node(inputs, output, vjp))


def _require_2d(op: str, t: Tensor) -> None:
    if t.values.ndim != 2:
        raise ShapeMismatchError(f"{op} needs 2-D operands, got shape {t.shape}")


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    # inf/nan products are caught by the finite check, not warned about
    with np.errstate(over="ignore", invalid="ignore"):
        out = _fresh(a.values @ b.values)
    av, bv = a.values, b.values
    _record((a, b), out, lambda g: (g @ bv.T, av.T @ g))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    out = _fresh(a.values + b.values)
    _record((a, b), out, lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    out = _fresh(a.values - b.values)
    _record((a, b), out, lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    out = _fresh(a.values * b.values)
    av, bv = a.values, b.values
    _record((a, b), out, lambda g: (g * bv, g * av))
    return out


def sigmoid(x: Tensor) -> Tensor:
    # exp may overflow to inf for very negative inputs; 1/(1+inf) -> 0 is exact
    with np.errstate(over="ignore"):
        out = _fresh(1.0 / (1.0 + np.exp(-x.values)))
    s = out.values
    _record((x,), out, lambda g: (g * s * (1.0 - s),))
    return out


def tanh(x: Tensor) -> Tensor:
    out = _fresh(np.tanh(x.values))
    t = out.values
    _record((x,), out, lambda g: (g * (1.0 - t * t),))
    return out


def relu(x: Tensor) -> Tensor:
    out = _fresh(np.maximum(x.values, 0.0))
    mask = x.values > 0.0
    _record((x,), out, lambda g: (g * mask,))
    return out


def exp(x: Tensor) -> Tensor:
    # overflow to inf is caught by the finite check, not warned about
    with np.errstate(over="ignore"):
        out = _fresh(np.exp(x.values))
    e = out.values
    _record((x,), out, lambda g: (g * e,))
    return out


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "add": add,
    "mul": mul,
    "sub": sub,
}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeMismatchError("concat of zero tensors")
    _require_2d("concat", tensors[0])
    ndim = tensors[0].values.ndim
    if axis not in (0, 1):
        raise ShapeMismatchError(f"concat: axis {axis} out of range for 2-D tensors")
    other = 1 - axis
    ext = tensors[0].shape[other]
    for t in tensors[1:]:
        _require_2d("concat", t)
        if t.shape[other] != ext:
            raise ShapeMismatchError(
                f"concat: shapes {tensors[0].shape} and {t.shape} disagree off-axis"
            )
    out = _fresh(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(piece.copy() for piece in np.split(g, bounds, axis=axis))

    _record(tuple(tensors), out, vjp)
    return out


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the unmasked entries of a vector; masked entries are 0.

    The max-shift keeps exp in range, and the denominator accumulates the
    exp terms in sorted order so the result is invariant to the order in
    which neighbors are listed, bit for bit.
    """
    if logits.values.ndim > 2 or (logits.values.ndim == 2 and 1 not in logits.shape):
        raise ShapeMismatchError(f"masked_softmax needs a vector, got shape {logits.shape}")
    flat = logits.values.reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if m.shape != flat.shape:
        raise ShapeMismatchError(
            f"masked_softmax: mask length {m.size} != logits length {flat.size}"
        )
    if not m.any():
        raise EmptyNeighborSetError("masked_softmax over an empty neighbor set")
    shifted = np.zeros_like(flat)
    shifted[m] = np.exp(flat[m] - flat[m].max())
    total = float(np.sum(np.sort(shifted[m])))
    out = _fresh((shifted / total).reshape(logits.shape))
    s = out.values.reshape(-1)

    def vjp(g):
        gf = g.reshape(-1)
        inner = float(np.dot(gf, s))
        # s is exactly 0 on masked entries, so they get exactly 0 gradient
        return ((s * (gf - inner)).reshape(logits.shape),)

    _record((logits,), out, vjp)
    return out


def weighted_sum(weights: Tensor, columns: Tensor) -> Tensor:
    """Sum of matrix columns scaled by per-column weights.

    Accumulation runs in sorted order per output component, so permuting
    (weights, columns) pairs cannot change the result even in the last bit.
    """
    _require_2d("weighted_sum", columns)
    w = weights.values.reshape(-1)
    if weights.values.ndim > 2:
        raise ShapeMismatchError(f"weighted_sum: weights shape {weights.shape} is not a vector")
    if w.size != columns.shape[1]:
        raise ShapeMismatchError(
            f"weighted_sum: {w.size} weights for {columns.shape[1]} columns"
        )
    terms = columns.values * w[np.newaxis, :]
    out = _fresh(np.sum(np.sort(terms, axis=1), axis=1).reshape(columns.shape[0], 1))
    cv = columns.values
    wshape = weights.shape

    def vjp(g):
        return ((cv.T @ g).reshape(wshape), g @ w[np.newaxis, :])

    _record((weights, columns), out, vjp)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _fresh(np.asarray(np.sum(x.values)))
    shape = x.shape
    _record((x,), out, lambda g: (np.full(shape, float(g)),))
    return out


def scale(x: Tensor, alpha: float) -> Tensor:
    a = float(alpha)
    out = _fresh(x.values * a)
    _record((x,), out, lambda g: (g * a,))
    return out


# ---------------------------------------------------------------------------
# reverse pass

def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(tensor) into grad slots for every tensor on the tape.

    Adjoints are computed fresh per call and then added, so grads accumulate
    across roots until zeroed, and a repeated call doubles them exactly.
    """
    if root.values.size != 1:
        raise ShapeMismatchError(f"backward root must be scalar, got shape {root.shape}")
    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    holders: dict[int, Tensor] = {id(root): root}
    for node in reversed(tape.nodes):
        g = adjoint.get(id(node.output))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(t)
            prev = adjoint.get(key)
            adjoint[key] = gi if prev is None else prev + gi
            holders[key] = t
    for key, t in holders.items():
        g = adjoint[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def global_grad_norm(tensors: Iterable[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is None:
            raise MissingGradientError("gradient norm over a tensor with no grad")
        total += float(np.sum(t.grad * t.grad))
    return float(np.sqrt(total))


def clip_grad_norm(tensors: Sequence[Tensor], max_norm: float) -> float:
    """Scale all grads in place so their global L2 norm is at most max_norm."""
    norm = global_grad_norm(tensors)
    if norm > max_norm:
        factor = max_norm / norm
        for t in tensors:
            t.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, named: Mapping[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = {name: np.zeros_like(t.values) for name, t in named.items()}
        self.v = {name: np.zeros_like(t.values) for name, t in named.items()}


def adam_step(named: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Grads are left untouched."""
    for name, t in named.items():
        if name not in state.m:
            raise KeyError(f"optimizer state has no entry for {name!r}")
        if t.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in named.items():
        g = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(t.values)):
            raise NonFiniteError(f"parameter {name!r} became non-finite during the update")
