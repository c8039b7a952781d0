"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: scalars, vectors and matrices, with a
define-by-run tape that is rebuilt on every forward pass.  Broadcasting is
restricted to scalar-vs-tensor and equal-shape operands.  Primitives cover
exactly what the graph/image encoders and the contrastive loss need; there
is no general broadcasting or einsum machinery.

Gradient flow: run the forward computation inside a ``Tape`` context, then
call ``backward(loss)`` (or ``tape.backward(loss)``).  One backward pass
per tape; a second call without ``tape.reset()`` raises ``TapeError``.
Distinct tapes over shared read-only parameters are safe to run in
parallel threads; the active-tape stack is thread-local.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """Operand values outside the mathematical domain of the operation."""


class TapeError(RuntimeError):
    """Misuse of the recording tape (double backward, non-scalar loss, ...)."""


class Tensor:
    """A dense float64 array plus autodiff bookkeeping.

    ``data`` is a row-major numpy array, ``grad`` (filled in by backward)
    always matches ``data``'s shape.  Tensors are never mutated by
    operations; every primitive allocates a fresh output.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def clear_grad(self) -> None:
        self.grad = None

    # Operator sugar; the named module functions are the primary surface.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_as_tensor(other)))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data) -> Tensor:
    """Constant tensor (no gradient tracking)."""
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    """Learnable tensor; receives a gradient on backward."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(float(x))
    raise TypeError(f"expected Tensor or number, got {type(x).__name__}")


class _TapeEntry:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Entries are appended in execution order, so inputs always precede the
    operations that consume them; backward walks the list in reverse.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def reset(self) -> None:
        """Allow another backward pass over the same recorded entries."""
        self._used = False

    def backward(self, loss: Tensor) -> None:
        """Distribute d(loss)/d(leaf) into every requires_grad leaf.

        The loss must be a scalar produced by operations recorded on this
        tape.  Gradients are accumulated into ``leaf.grad`` exactly once
        per backward pass; repeated passes add up unless grads are cleared.
        """
        if loss.ndim != 0:
            raise TapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        if self._used:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss._tape is not self and not loss.requires_grad:
            raise TapeError("loss was not produced by operations recorded on this tape")
        self._used = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        produced = {id(e.out) for e in self.entries}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss

        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            input_grads = entry.backward_fn(g)
            for t, gi in zip(entry.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t

        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape that recorded ``loss``."""
    if loss._tape is None:
        raise TapeError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.entries.append(_TapeEntry(out, inputs, backward_fn))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), back)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.shape}")

    def back(g):
        return (g.T,)

    return _record(x.data.T.copy(), (x,), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _record(y, (x,), back)


def _binary(a, b, fwd, back_a, back_b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not equal "
                         "(only scalar-vs-tensor broadcasting is supported)")
    out = fwd(a.data, b.data)

    def back(g):
        ga = back_a(g)
        gb = back_b(g)
        if a.ndim == 0 and ga.ndim != 0:
            ga = ga.sum()
        if b.ndim == 0 and gb.ndim != 0:
            gb = gb.sum()
        return ga, gb

    return _record(out, (a, b), back)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    ad, bd = a.data, b.data
    return _binary(a, b, lambda x, y: x * y, lambda g: g * bd, lambda g: g * ad)


def neg(x: Tensor) -> Tensor:
    return _record(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        worst = float(x.data.min())
        raise DomainError(f"log of nonpositive value (min entry {worst})")
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def power(x: Tensor, p: float) -> Tensor:
    """x ** p for strictly positive x (used for norms and reciprocals)."""
    if np.any(x.data <= 0.0):
        worst = float(x.data.min())
        raise DomainError(f"power of nonpositive value (min entry {worst})")
    p = float(p)
    xd = x.data
    return _record(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1.0),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def reduce(x: Tensor, axis: int | None, kind: str) -> Tensor:
    """Reduce along ``axis`` (or everything when axis is None).

    ``max``/``min`` route the backward gradient to the first extreme index
    along the axis, which makes tie-breaking deterministic.
    """
    if kind not in ("sum", "mean", "max", "min"):
        raise ValueError(f"unknown reduce kind {kind!r}")
    if x.size == 0:
        raise ShapeError("reduce over an empty tensor")
    xd = x.data
    if axis is None:
        flat = xd.reshape(-1)
        if kind == "sum":
            out = flat.sum()
            back = lambda g: (np.full_like(xd, g),)
        elif kind == "mean":
            out = flat.mean()
            back = lambda g: (np.full_like(xd, g / flat.size),)
        else:
            idx = int(np.argmax(flat) if kind == "max" else np.argmin(flat))
            out = flat[idx]

            def back(g, idx=idx):
                gx = np.zeros_like(xd)
                gx.reshape(-1)[idx] = g
                return (gx,)
        return _record(np.asarray(out), (x,), back)

    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    if xd.shape[axis] == 0:
        raise ShapeError(f"reduce over empty axis {axis} of shape {x.shape}")
    if kind == "sum":
        out = xd.sum(axis=axis)
        back = lambda g: (np.repeat(np.expand_dims(g, axis), xd.shape[axis], axis=axis),)
    elif kind == "mean":
        n = xd.shape[axis]
        out = xd.mean(axis=axis)
        back = lambda g: (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)
    else:
        pick = np.argmax(xd, axis=axis) if kind == "max" else np.argmin(xd, axis=axis)
        out = np.take_along_axis(xd, np.expand_dims(pick, axis), axis=axis).squeeze(axis)

        def back(g, pick=pick):
            gx = np.zeros_like(xd)
            np.put_along_axis(gx, np.expand_dims(pick, axis),
                              np.expand_dims(g, axis), axis=axis)
            return (gx,)
    return _record(out, (x,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    nd = parts[0].ndim
    if any(p.ndim != nd for p in parts):
        raise ShapeError("concat operands must share rank")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _record(out, tuple(parts), back)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}) invalid for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(x.data[idx].copy(), (x,), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(old),))


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix."""
    if not rows:
        raise ShapeError("stack_rows of zero tensors")
    if any(r.ndim != 1 or r.shape != rows[0].shape for r in rows):
        raise ShapeError("stack_rows needs equal-length vectors")
    out = np.stack([r.data for r in rows], axis=0)

    def back(g):
        return tuple(g[i] for i in range(len(rows)))

    return _record(out, tuple(rows), back)


def take_diag(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"take_diag needs a square matrix, got {x.shape}")
    n = x.shape[0]

    def back(g):
        gx = np.zeros_like(x.data)
        np.fill_diagonal(gx, g)
        return (gx,)

    return _record(np.diagonal(x.data).copy(), (x,), back)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a matrix by integer index; duplicates accumulate grads."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a matrix table, got {table.shape}")
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a flat index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = int(idx[(idx < 0) | (idx >= table.shape[0])][0])
        raise DomainError(f"row index {bad} out of range for table with "
                          f"{table.shape[0]} rows")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(table.data[idx].copy(), (table,), back)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    if x.ndim != 2:
        raise ShapeError(f"normalize_rows needs a matrix, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        row = int(np.where(norms.reshape(-1) == 0.0)[0][0])
        raise DomainError(f"zero-norm row {row} cannot be normalized")
    y = x.data / norms

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _record(y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learned per-feature gain and bias."""
    if x.ndim != 2 or gain.ndim != 1 or bias.ndim != 1:
        raise ShapeError("layer_norm expects (matrix, vector, vector)")
    if gain.shape[0] != x.shape[1] or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"layer_norm width mismatch: x {x.shape}, "
                         f"gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def back(g):
        d = x.shape[1]
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Compare tape gradients of a scalar function against central differences.

    Returns max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.  ``coords`` restricts the
    sweep to a subset of flat indices of ``x`` (all coordinates by default).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    was_leaf = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
        if y.ndim != 0:
            raise ShapeError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
        tape.backward(y)
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1)
    finally:
        x.requires_grad = was_leaf
        x.grad = saved_grad

    flat = x.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        a = analytic[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        if err > worst:
            worst = err
    return worst
