"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Tensors wrap a numpy array and are treated as immutable. Operations executed
while a :class:`Tape` is active (``with Tape() as tape:``) and that touch at
least one tensor with ``requires_grad`` are recorded in execution order;
:func:`backward` walks the records in reverse.

All values are 32-bit floats unless a :func:`precision` context says
otherwise. Gradient oracles run in float64 so that central differences are
not dominated by rounding.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_ids = itertools.count()
_tapes: list["Tape"] = []
_dtype = [np.float32]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def get_dtype():
    return _dtype[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    _dtype.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.pop()


class Tensor:
    """Immutable n-dimensional array that may participate in a tape."""

    __slots__ = ("data", "requires_grad", "id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable
    needs: tuple


class Tape:
    """Ordered record of differentiable operations.

    Only the innermost active tape records. A tape may be replayed by calling
    :func:`backward` any number of times.
    """

    def __init__(self):
        self.records: list[OpRecord] = []
        self.leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        """Register tensors as leaves even if no recorded op consumes them."""
        for t in tensors:
            if t.requires_grad and t.id not in self._produced:
                self.leaves[t.id] = t

    def _record(self, op, inputs, output, vjp) -> None:
        needs = tuple(t.requires_grad for t in inputs)
        for t, n in zip(inputs, needs):
            if n and t.id not in self._produced:
                self.leaves[t.id] = t
        self._produced.add(output.id)
        self.records.append(OpRecord(op, tuple(inputs), output, vjp, needs))

    def gradient(self, root: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``root`` with respect to ``sources`` as arrays."""
        grads = _propagate(self, root)
        return [
            grads[s.id] if s.id in grads else np.zeros(s.shape, dtype=s.data.dtype)
            for s in sources
        ]


def _propagate(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    if root.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.ones(root.shape, dtype=root.data.dtype)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output.id)
        if g is None:
            continue
        if rec.output.id not in tape.leaves:
            del grads[rec.output.id]
        in_grads = rec.vjp(g, rec.needs)
        for t, need, gi in zip(rec.inputs, rec.needs, in_grads):
            if not need or gi is None:
                continue
            prev = grads.get(t.id)
            grads[t.id] = gi if prev is None else prev + gi
    return grads


def backward(tape: Tape, root: Tensor) -> dict[int, Tensor]:
    """Reverse pass over ``tape`` from scalar ``root``.

    Returns:
        Mapping from leaf tensor id to its gradient. Leaves that ``root`` does
        not depend on map to zeros.
    """
    grads = _propagate(tape, root)
    out = {}
    for lid, leaf in tape.leaves.items():
        g = grads.get(lid)
        out[lid] = Tensor._wrap(
            g if g is not None else np.zeros(leaf.shape, dtype=leaf.data.dtype), False
        )
    if root.requires_grad and root.id not in out and not tape.records:
        out[root.id] = Tensor._wrap(np.ones(root.shape, dtype=root.data.dtype), False)
    return out


# ---------------------------------------------------------------------------
# Op construction


def apply_op(name: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap ``out`` as the result of op ``name`` and record it if needed.

    ``vjp(g, needs)`` must return one gradient (or None) per input, where
    ``needs[i]`` tells whether input ``i`` wants a gradient.
    """
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    req = any(t.requires_grad for t in inputs)
    res = Tensor._wrap(out, req)
    if req and _tapes:
        _tapes[-1]._record(name, inputs, res, vjp)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shapes(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from e


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a, b)
    return apply_op(
        "add", (a, b), a.data + b.data,
        lambda g, n: (_unbroadcast(g, a.shape) if n[0] else None,
                      _unbroadcast(g, b.shape) if n[1] else None),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a, b)
    return apply_op(
        "sub", (a, b), a.data - b.data,
        lambda g, n: (_unbroadcast(g, a.shape) if n[0] else None,
                      _unbroadcast(-g, b.shape) if n[1] else None),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a, b)
    return apply_op(
        "mul", (a, b), a.data * b.data,
        lambda g, n: (_unbroadcast(g * b.data, a.shape) if n[0] else None,
                      _unbroadcast(g * a.data, b.shape) if n[1] else None),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a, b)
    out = a.data / b.data
    return apply_op(
        "div", (a, b), out,
        lambda g, n: (_unbroadcast(g / b.data, a.shape) if n[0] else None,
                      _unbroadcast(-g * out / b.data, b.shape) if n[1] else None),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", (a,), -a.data, lambda g, n: (-g,))


def _flush_subnormal(a: np.ndarray) -> np.ndarray:
    """Zero subnormals: they carry no signal and make matmuls crawl."""
    return np.where(np.abs(a) < np.finfo(a.dtype).tiny, np.zeros((), a.dtype), a)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g, n):
        g = _flush_subnormal(g)
        return (g @ b.data.T if n[0] else None, a.data.T @ g if n[1] else None)

    return apply_op("matmul", (a, b), a.data @ b.data, vjp)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for 2-D ``x`` as a single recorded op."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: shapes {x.shape}, {w.shape}, {b.shape}")
    out = x.data @ w.data
    out += b.data

    def vjp(g, n):
        g = _flush_subnormal(g)
        return (g @ w.data.T if n[0] else None, x.data.T @ g if n[1] else None,
                g.sum(axis=0) if n[2] else None)

    return apply_op("linear", (x, w, b), out, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return apply_op("relu", (x,), out, lambda g, n: (g * (out > 0),))


def sin(x) -> Tensor:
    x = as_tensor(x)
    return apply_op("sin", (x,), np.sin(x.data), lambda g, n: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return apply_op("cos", (x,), np.cos(x.data), lambda g, n: (-g * np.sin(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = _flush_subnormal(np.exp(x.data))
    return apply_op("exp", (x,), out, lambda g, n: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return apply_op("log", (x,), np.log(x.data), lambda g, n: (g / x.data,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.data.dtype)
    return apply_op("sigmoid", (x,), out, lambda g, n: (g * out * (1 - out),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = _flush_subnormal(np.logaddexp(0, x.data).astype(x.data.dtype))
    sig = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.data.dtype)
    return apply_op("softplus", (x,), out, lambda g, n: (g * sig,))


def maximum(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` against a constant."""
    x = as_tensor(x)
    out = np.maximum(x.data, np.asarray(floor, dtype=x.data.dtype))
    return apply_op("maximum", (x,), out, lambda g, n: (g * (x.data > floor),))


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.data.dtype)

    def vjp(g, n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("sum", (x,), out, vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), np.asarray(1.0 / count, dtype=x.data.dtype))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from e
    return apply_op("broadcast", (x,), out, lambda g, n: (_unbroadcast(g, x.shape),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from e
    return apply_op("reshape", (x,), out, lambda g, n: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return apply_op("transpose", (x,), np.transpose(x.data, axes),
                    lambda g, n: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in ts]} along axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g, n):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op("concat", ts, out, vjp)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx) -> Tensor:
    """Indexing (slices or integer arrays); the op kind the field calls ``slice``."""
    x = as_tensor(x)
    out = x.data[idx]
    basic = _is_basic_index(idx)
    if basic:
        out = out.copy()

    def vjp(g, n):
        z = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return apply_op("slice", (x,), np.asarray(out), vjp)


def logsumexp(x, axis=-1) -> Tensor:
    """Stable ``log(sum(exp(x)))`` along ``axis`` (softmax normaliser)."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = _flush_subnormal(e / s)
    return apply_op("softmax_logsum", (x,), out,
                    lambda g, n: (np.expand_dims(g, axis) * soft,))


def cumsum(x, axis=-1, exclusive=False) -> Tensor:
    x = as_tensor(x)
    out = np.cumsum(x.data, axis=axis)
    if exclusive:
        out = out - x.data

    def vjp(g, n):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return (rev - g if exclusive else rev,)

    return apply_op("cumsum", (x,), out.astype(x.data.dtype), vjp)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None):
    """One bias-corrected Adam update.

    Args:
        params: name -> Tensor.
        grads: name -> gradient (Tensor or array) for every entry of ``params``.
        state: moments, keyed like ``params``; mutated in place.
        lr: overrides ``state.lr`` for this step (schedules).

    Returns:
        ``(new_params, state)``; tensors are replaced, never mutated.
    """
    lr = state.lr if lr is None else lr
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    new = {}
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError(f"adam_step: state for {name} has shape {m.shape}, param {p.shape}")
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m.astype(p.data.dtype), v.astype(p.data.dtype)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        new[name] = Tensor._wrap((p.data - step).astype(p.data.dtype), p.requires_grad)
    return new, state


# ---------------------------------------------------------------------------
# Gradient checking


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
                     dtype=np.float64) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    with precision(dtype):
        base = np.array(x.data, dtype=dtype)
        grad = np.zeros_like(base)
        flat, gflat = base.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base)).data.sum())
            flat[i] = orig - h
            fm = float(f(Tensor(base)).data.sum())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: Tensor, dtype=np.float64) -> np.ndarray:
    with precision(dtype):
        xt = Tensor(x.data, requires_grad=True)
        with Tape() as tape:
            tape.watch(xt)
            y = f(xt)
        return tape.gradient(y, [xt])[0]


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
                      dtype=np.float64) -> float:
    """Max over components of ``|analytic - numeric| / (|analytic| + 1e-8)``."""
    a = analytic_gradient(f, x, dtype=dtype)
    n = numeric_gradient(f, x, h=h, dtype=dtype)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / (np.abs(a) + 1e-8)))
