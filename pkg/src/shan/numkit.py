"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Every differentiable op takes :class:`Tensor` operands and returns a new
``Tensor``. When a :class:`Tape` is active on the current thread and at least
one operand requires a gradient, the op appends a node (output, inputs,
adjoint rule) to the tape. :func:`backward` replays the tape in reverse.

Arrays follow numpy broadcasting; adjoints are summed back to operand shapes.
"""

from __future__ import annotations

import builtins
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EvaluationError, ParameterError

DTYPES = {"float32": np.float32, "float64": np.float64}

# norms at or below this are treated as zero by cosine()
DEGENERATE_NORM = 1e-30

_local = threading.local()


def resolve_dtype(precision: str | type | np.dtype) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ParameterError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None
    return np.dtype(precision)


class Tensor:
    """Immutable n-d array node. ``requires_grad`` marks differentiable leaves."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; ops executed inside the ``with`` block on the
    same thread are recorded. Tapes nest, the innermost one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], adjoint) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, inputs, adjoint))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def adjoint(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _emit(out, (a, b), adjoint)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))


def softmax(x, axis: int = -1, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """``exp(temperature * x)`` normalised along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) marks valid entries; invalid
    entries get probability exactly zero. Every slice needs one valid entry.
    """
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    z = x.data * temperature
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (temperature * y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), adjoint)


def softmax_rows(m, temperature: float = 1.0) -> Tensor:
    m = as_tensor(m)
    if m.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {m.shape}")
    return softmax(m, axis=-1, temperature=temperature)


def cosine(u, v, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Cosine similarity along ``axis`` with broadcasting.

    Returns ``(value, degenerate)``. Where either operand has zero norm the
    value is 0, the gradient is 0 and ``degenerate`` is True.
    """
    u, v = as_tensor(u), as_tensor(v)
    _check_broadcast("cosine", u, v)
    if u.shape[axis] != v.shape[axis]:
        raise DimensionError(f"cosine: vector lengths differ, shapes {u.shape} and {v.shape}")
    nu = np.sqrt((u.data * u.data).sum(axis=axis, keepdims=True))
    nv = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    dot = (u.data * v.data).sum(axis=axis, keepdims=True)
    bad = (nu <= DEGENERATE_NORM) | (nv <= DEGENERATE_NORM)
    safe_nu = np.where(bad, 1.0, nu)
    safe_nv = np.where(bad, 1.0, nv)
    c = np.where(bad, 0.0, dot / (safe_nu * safe_nv)).astype(dot.dtype)

    def adjoint(g):
        g = np.expand_dims(g, axis)
        live = ~bad
        gu = gv = None
        if u.requires_grad:
            gu = g * live * (v.data / (safe_nu * safe_nv) - c * u.data / (safe_nu * safe_nu))
            gu = _unbroadcast(gu, u.shape)
        if v.requires_grad:
            gv = g * live * (u.data / (safe_nu * safe_nv) - c * v.data / (safe_nv * safe_nv))
            gv = _unbroadcast(gv, v.shape)
        return gu, gv

    out = _emit(np.squeeze(c, axis=axis), (u, v), adjoint)
    return out, np.squeeze(bad, axis=axis)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit norm; zero vectors stay zero."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(n <= DEGENERATE_NORM, 1.0, n)
    y = x.data / safe

    def adjoint(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / safe,)

    return _emit(y.astype(x.dtype), (x,), adjoint)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.asarray(out), (x,), adjoint)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = float(x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    total = sum(x, axis=axis, keepdims=keepdims)
    return _emit(total.data / count, (total,), lambda g: (g / count,))


def masked_mean(x, mask: np.ndarray, axis: int) -> Tensor:
    """Mean over ``axis`` counting only entries where ``mask`` is True."""
    x = as_tensor(x)
    w = np.broadcast_to(mask, x.shape).astype(x.dtype)
    counts = w.sum(axis=axis, keepdims=True)
    return sum(mul(x, w / counts), axis=axis)


def max(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the adjoint goes to the first maximising entry."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(np.broadcast_to(mask, x.shape), x.data, -np.inf)
    idx = np.expand_dims(np.argmax(z, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def adjoint(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit(np.squeeze(out, axis=axis), (x,), adjoint)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _emit(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return _emit(np.expand_dims(x.data, axis), (x,), lambda g: (np.squeeze(g, axis=axis),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, xs, adjoint)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[x.shape for x in xs]}") from None

    def adjoint(g):
        return tuple(np.squeeze(p, axis=axis) for p in np.split(g, len(xs), axis=axis))

    return _emit(out, xs, adjoint)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def adjoint(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _emit(np.array(x.data[index]), (x,), adjoint)


def take_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"take_rows: ids out of range for table with {table.shape[0]} rows")

    def adjoint(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit(table.data[ids], (table,), adjoint)


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "add": add,
    "mul": mul,
    "scale": scale,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "mean_rows": lambda x: mean(x, axis=0),
    "sum_rows": lambda x: sum(x, axis=0),
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch one of the named elementwise/structural ops by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. each tensor in ``wrt``.

    Leaves that the loss does not depend on (or that are frozen) get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.adjoint(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for p in wrt:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.data) if g is None or not p.requires_grad else np.asarray(g, dtype=p.dtype)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    coordinates: int

    def worst(self) -> str:
        return builtins.max(self.per_param, key=self.per_param.get)


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    names: Iterable[str] | None = None,
    oracle_dtype=np.float64,
) -> GradCheckReport:
    """Compare 64-bit tape gradients of ``f`` against central differences.

    ``f`` maps a dict of tensors to a scalar tensor. The error for each
    coordinate is ``|analytic - numeric| / max(1e-8, |numeric|)``.

    ``oracle_dtype`` sets the precision of the perturbed evaluations only.
    Passing ``np.longdouble`` keeps the difference quotient's rounding noise
    (about 1e-16 * |f| / eps in 64-bit) from swamping tiny gradient entries.
    """
    if not eps > 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    names = list(params) if names is None else list(names)

    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=k in names, name=k) for k, v in params.items()}
    with Tape() as tape:
        loss = f(leaves)
    _require_finite(loss)
    analytic = backward(tape, loss, [leaves[k] for k in names])
    analytic = {k: analytic[leaves[k]] for k in names}
    base = {k: np.array(v, dtype=oracle_dtype) for k, v in params.items()}
    step = np.asarray(eps, dtype=oracle_dtype)

    def evaluate(values):
        out = f({k: Tensor(v) for k, v in values.items()})
        _require_finite(out)
        return out.data

    per_param = {}
    coords = 0
    for k in names:
        arr = base[k]
        worst = 0.0
        flat = arr.reshape(-1)
        ga = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate(base)
            flat[i] = orig - step
            fm = evaluate(base)
            flat[i] = orig
            num = float((fp - fm) / (2 * step))
            err = abs(ga[i] - num) / builtins.max(1e-8, abs(num))
            worst = err if err > worst else worst
        coords += flat.size
        per_param[k] = worst
    return GradCheckReport(builtins.max(per_param.values(), default=0.0), per_param, coords)


def _require_finite(t: Tensor) -> None:
    if not np.all(np.isfinite(t.data)):
        raise EvaluationError("function produced a non-finite value")


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Parameters without a gradient are copied."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        updated[name] = (p - step).astype(p.dtype, copy=False)
    return updated, state
