"""Dense float64 tensors with reverse-mode automatic differentiation.

Storage is a C-contiguous (row-major) numpy array; every operation allocates
a fresh output, so tensors are immutable after creation except for the
``grad`` slot. Differentiable operations append an :class:`OpRecord` to the
active :class:`GradTape`; :func:`backward` replays the records reachable from
the loss in reverse execution order, which is a valid reverse topological
order because an operation is always recorded after its inputs exist.

There is no implicit broadcasting: binary operations require identical
shapes, and :func:`expand` is the explicit broadcast helper.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend as bk
from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "GradTape",
    "no_grad",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "linear",
    "affine_lastaxis",
    "elementwise",
    "add",
    "mul",
    "sub",
    "neg",
    "scale",
    "relu",
    "gelu",
    "softmax",
    "layernorm",
    "sum_all",
    "sum_axis",
    "mean_axis",
    "reshape",
    "transpose",
    "take",
    "concat",
    "expand",
    "cross_entropy",
    "backward",
    "finite_diff_check",
]

_seq_counter = itertools.count()


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    A C-contiguous float64 input array is adopted without copying; callers
    handing one in must not mutate it afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype == np.float64 \
                and data.flags.c_contiguous:
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._record: OpRecord | None = None

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
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class OpRecord:
    """One recorded operation: output, inputs, and the vjp rule."""

    __slots__ = ("seq", "out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.seq = next(_seq_counter)
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradTape:
    """Ordered log of recorded operations.

    A default tape is always active; scoping a fresh tape (``with GradTape():``)
    bounds the lifetime of the records created inside it, which is what the
    training loop does once per step. Use one tape from one logical thread at
    a time.
    """

    def __init__(self):
        self.ops: list[OpRecord] = []

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self, "GradTape contexts must nest"


_tape_stack: list[GradTape] = [GradTape()]
_grad_enabled: list[bool] = [True]


class no_grad:
    """Context manager that disables operation recording."""

    def __enter__(self):
        _grad_enabled.append(False)
        return self

    def __exit__(self, *exc):
        _grad_enabled.pop()


def _tracing() -> bool:
    return _grad_enabled[-1]


def _emit(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Attach a record to `out` if any input participates in a gradient."""
    if _tracing() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec = OpRecord(out, inputs, backward_fn)
        out._record = rec
        _tape_stack[-1].ops.append(rec)
    return out


# ---------------------------------------------------------------------------
# constructors


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D operands, or stacked operands with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward_fn(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), backward_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + b for x [T, I], w [I, O], b [O]; one tape record."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] \
            or (b is not None and b.shape != (w.shape[1],)):
        bs = None if b is None else b.shape
        raise DimensionError(f"linear: {x.shape} @ {w.shape} + {bs}")
    y = np.matmul(x.data, w.data)
    if b is not None:
        y += b.data
    out = Tensor(y)

    def backward_fn(g):
        gx = np.matmul(g, w.data.T) if x.requires_grad else None
        gw = np.matmul(x.data.T, g) if w.requires_grad else None
        gb = np.sum(g, axis=0) if b is not None and b.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, backward_fn)


def affine_lastaxis(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Fused x * gamma + beta with gamma/beta broadcast over the last axis."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"affine_lastaxis: {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    out = Tensor(x.data * gamma.data + beta.data)
    red = tuple(range(x.ndim - 1))

    def backward_fn(g):
        gx = g * gamma.data if x.requires_grad else None
        gg = np.sum(g * x.data, axis=red) if gamma.requires_grad else None
        gb = np.sum(g, axis=red) if beta.requires_grad else None
        return gx, gg, gb

    return _emit(out, (x, gamma, beta), backward_fn)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Pointwise add/mul of identically shaped tensors (no broadcasting)."""
    if a.shape != b.shape:
        raise DimensionError(f"elementwise {op}: shapes {a.shape} vs {b.shape}")
    if op == "add":
        out = Tensor(a.data + b.data)

        def backward_fn(g):
            return g, g

    elif op == "mul":
        out = Tensor(a.data * b.data)

        def backward_fn(g):
            return (g * b.data if a.requires_grad else None,
                    g * a.data if b.requires_grad else None)

    else:
        raise ContractError(f"elementwise op must be 'add' or 'mul', got {op!r}")
    return _emit(out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    return _emit(out, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _emit(Tensor(-a.data), (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return _emit(Tensor(a.data * c), (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _emit(out, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    out = Tensor(bk.gelu_fwd(a.data))
    return _emit(out, (a,), lambda g: (bk.gelu_bwd(a.data, np.ascontiguousarray(g)),))


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(x: Tensor, tau: float = 1.0) -> Tensor:
    """Temperature softmax along the last axis, stabilized by max subtraction."""
    if not (tau > 0):
        raise ContractError(f"softmax temperature must be positive, got {tau}")
    tau = float(tau)
    y2 = bk.softmax_fwd(_rows(x.data), tau)
    out = Tensor(y2.reshape(x.shape))

    def backward_fn(g):
        gx = bk.softmax_bwd(y2, _rows(g), tau)
        return (gx.reshape(x.shape),)

    return _emit(out, (x,), backward_fn)


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Last-axis standardization to mean 0 / variance 1 (no affine part)."""
    xhat2, rstd = bk.layernorm_fwd(_rows(x.data), float(eps))
    out = Tensor(xhat2.reshape(x.shape))

    def backward_fn(g):
        gx = bk.layernorm_bwd(xhat2, rstd, _rows(g))
        return (gx.reshape(x.shape),)

    return _emit(out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data))
    return _emit(out, (x,), lambda g: (np.full(x.shape, g.reshape(())),))


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = axis % x.ndim
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(out, (x,), backward_fn)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.shape[axis % x.ndim]
    return scale(sum_axis(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape))
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))
    return _emit(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along `axis` with an integer index array (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    out = Tensor(np.take(x.data, idx, axis=axis))

    def backward_fn(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return _emit(out, (x,), backward_fn)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    axis = axis % ts[0].ndim
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(ts))
        )

    return _emit(out, tuple(ts), backward_fn)


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast of `x` to `shape` (the only broadcasting allowed)."""
    shape = tuple(shape)
    try:
        view = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    out = Tensor(view.copy())
    lead = len(shape) - x.ndim
    summed_axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1
    )

    def backward_fn(g):
        gx = np.sum(g, axis=summed_axes, keepdims=False) if summed_axes else g
        return (gx.reshape(x.shape),)

    return _emit(out, (x,), backward_fn)


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy over a [batch, classes] logit matrix."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, classes], got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if y.shape != (b,):
        raise DimensionError(f"cross_entropy: {b} rows but {y.shape} labels")
    if not (0.0 <= smoothing < 1.0):
        raise ContractError(f"label smoothing must be in [0, 1), got {smoothing}")
    z = logits.data
    m = np.max(z, axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - lse
    target = np.full((b, k), smoothing / k)
    target[np.arange(b), y] += 1.0 - smoothing
    out = Tensor(-np.sum(target * logp) / b)
    probs = np.exp(logp)

    def backward_fn(g):
        return ((probs - target) * (g.reshape(()) / b),)

    return _emit(out, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every requires_grad tensor reachable from `loss`.

    Leaf gradients accumulate across calls (clear with ``zero_grad``);
    gradients of recorded intermediates are overwritten.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones(loss.shape)
    if loss._record is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    records: list[OpRecord] = []
    seen: set[int] = set()
    stack = [loss._record]
    while stack:
        rec = stack.pop()
        if id(rec) in seen:
            continue
        seen.add(id(rec))
        records.append(rec)
        for t in rec.inputs:
            if t._record is not None and id(t._record) not in seen:
                stack.append(t._record)
    records.sort(key=lambda r: r.seq, reverse=True)

    flowing: dict[int, np.ndarray] = {id(loss): seed}
    for rec in records:
        g = flowing.pop(id(rec.out), None)
        if g is None:
            continue
        if rec.out.requires_grad:
            rec.out.grad = g
        grads = rec.backward_fn(g)
        for t, gt in zip(rec.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if t._record is None:
                t.grad = gt.copy() if t.grad is None else t.grad + gt
            acc = flowing.get(id(t))
            flowing[id(t)] = gt if acc is None else acc + gt


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    Relative error per coordinate is |analytic - fd| / max(1, |fd|); `f` must
    be a deterministic scalar-valued function that is smooth at `x`.
    """
    if not (step > 0):
        raise ContractError(f"finite_diff_check step must be positive, got {step}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with GradTape():
        out = f(probe)
        if out.size != 1:
            raise ContractError(f"f must be scalar-valued, got shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise ContractError("f(x) is not finite")
        probe.grad = None
        backward(out)
    analytic = np.zeros(x.shape) if probe.grad is None else probe.grad

    worst = 0.0
    flat = x.data.ravel()
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + step
            hi = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] = flat[i] - step
            lo = f(Tensor(bumped.reshape(x.shape))).item()
            fd = (hi - lo) / (2.0 * step)
            err = abs(analytic.ravel()[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst
