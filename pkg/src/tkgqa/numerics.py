"""Dense double-precision tensors with reverse-mode differentiation.

Every learnable piece of the pipeline is written against this module. Each
operation computes its forward value with numpy and records a closure that
maps the output gradient to input gradients. :func:`backward` orders the
recorded operations topologically (a :class:`ComputationTape`) and replays
them in reverse.

Broadcasting is deliberately limited to scalar-with-tensor. Any other shape
mix raises :class:`~tkgqa.errors.DimensionError`, so every backward rule can
be read off its forward rule without unbroadcasting.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread (evaluation, finite differences)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """A dense float64 array plus its differentiation record."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class ComputationTape:
    """Recorded operations feeding one output, in topological order.

    ``ops`` lists every non-leaf tensor after all of its inputs' producers;
    ``leaves`` lists the differentiable inputs that receive gradients.
    """

    def __init__(self, output: Tensor):
        self.output = output
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.ops = [t for t in order if t._backward is not None]
        self.leaves = [t for t in order if t._backward is None and t.requires_grad]

    def __len__(self):
        return len(self.ops)

    def backward(self):
        grads = {id(self.output): np.ones_like(self.output.values)}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            leaf.grad = np.array(g, dtype=np.float64) if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> ComputationTape:
    """Populate ``.grad`` on every differentiable leaf feeding ``loss``."""
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = ComputationTape(loss)
    if loss.requires_grad or loss._backward is not None:
        tape.backward()
    return tape


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _is_scalar(t: Tensor) -> bool:
    return t.values.size == 1 and t.values.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor, name: str):
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(b):
        return a.shape
    if _is_scalar(a):
        return b.shape
    raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")
    out = a.values + b.values

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "sub")
    out = a.values - b.values

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul")
    av, bv = a.values, b.values
    out = av * bv

    def bw(g):
        ga = _reduce_to(g * bv, a) if a.requires_grad else None
        gb = _reduce_to(g * av, b) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _result(a.values * c, (a,), bw, "scale")


def add_bias(x, b) -> Tensor:
    """Add vector ``b`` (length d) to every row of ``x`` (..., d)."""
    x, b = _wrap(x), _wrap(b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    d = b.shape[0]

    def bw(g):
        return g, g.reshape(-1, d).sum(axis=0)

    return _result(x.values + b.values, (x, b), bw, "add_bias")


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.values > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.values, 0.0), (x,), bw, "relu")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    out = _stable_sigmoid(x.values)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), bw, "sigmoid")


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.values)

    def bw(g):
        return (g * out,)

    return _result(out, (x,), bw, "exp")


def log(x) -> Tensor:
    x = _wrap(x)
    v = x.values
    if np.isnan(v).any() or (v <= 0).any():
        raise NumericError("log of a non-positive value")

    def bw(g):
        return (g / v,)

    return _result(np.log(v), (x,), bw, "log")


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    v = x.values
    inside = (v >= lo) & (v <= hi)

    def bw(g):
        return (g * inside,)

    return _result(np.clip(v, lo, hi), (x,), bw, "clamp")


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (e.g. ``-inf``)."""
    x = _wrap(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"masked_fill: mask {mask.shape} vs tensor {x.shape}")
    keep = ~mask

    def bw(g):
        return (g * keep,)

    return _result(np.where(mask, value, x.values), (x,), bw, "masked_fill")


# ---------------------------------------------------------------------------
# shape manipulation

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2 or av.shape[:-2] != bv.shape[:-2] or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(av @ bv, (a, b), bw, "matmul")


def transpose(x, axes=None) -> Tensor:
    """Swap the last two axes, or apply an explicit permutation."""
    x = _wrap(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 axes, got {x.shape}")
        out = np.swapaxes(x.values, -1, -2)

        def bw(g):
            return (np.swapaxes(g, -1, -2),)
    else:
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out = np.transpose(x.values, axes)

        def bw(g):
            return (np.transpose(g, inverse),)

    return _result(out, (x,), bw, "transpose")


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    original = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {original} as {shape}") from exc

    def bw(g):
        return (g.reshape(original),)

    return _result(out, (x,), bw, "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.values for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.moveaxis(g, ax, 0))

    return _result(out, tensors, bw, "stack")


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)


def index(x, key) -> Tensor:
    """``x[key]``; gradients of repeated (fancy) indices accumulate."""
    x = _wrap(x)
    out = x.values[key]
    basic = _is_basic_key(key)
    shape = x.shape

    def bw(g):
        gz = np.zeros(shape)
        if basic:
            gz[key] = g
        else:
            np.add.at(gz, key, g)
        return (gz,)

    return _result(np.array(out, dtype=np.float64), (x,), bw, "index")


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-D table; the backward pass scatter-adds."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D table, got {table.shape}")
    n, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise DimensionError(f"take_rows: ids outside [0, {n})")
    flat = ids.reshape(-1)

    def bw(g):
        gz = np.zeros((n, d))
        np.add.at(gz, flat, g.reshape(-1, d))
        return (gz,)

    return _result(table.values[ids], (table,), bw, "take_rows")


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _wrap(x)
    shape = x.shape
    axes = _axis_tuple(axis, x.ndim)
    out = x.values.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _axis_tuple(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise DimensionError(f"mean over an empty axis of {x.shape}")
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x, axis: int = -1) -> Tensor:
    """Normalized exponentials along ``axis``.

    ``-inf`` entries are mask sentinels and map to exactly 0. A slice made
    only of sentinels maps to all zeros instead of NaN.
    """
    x = _wrap(x)
    v = x.values
    if np.isnan(v).any():
        raise NumericError("softmax input contains NaN")
    if np.isposinf(v).any():
        raise NumericError("softmax input contains +inf")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(v - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    v = x.values
    if not np.isfinite(v).all():
        raise NumericError("log_softmax input must be finite")
    m = np.max(v, axis=axis, keepdims=True)
    shifted = v - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def segment_logsumexp(values, segments, size: int) -> Tensor:
    """Merge entries that share a segment id by log-sum-exp.

    Returns a length-``size`` vector; segments with no entry hold ``-inf``.
    """
    values = _wrap(values)
    seg = np.asarray(segments, dtype=np.int64)
    v = values.values
    if v.ndim != 1 or seg.shape != v.shape:
        raise DimensionError(f"segment_logsumexp: values {v.shape} vs segments {seg.shape}")
    if np.isnan(v).any():
        raise NumericError("segment_logsumexp input contains NaN")
    peak = np.full(size, -np.inf)
    np.maximum.at(peak, seg, v)
    shifted = np.exp(v - peak[seg])
    total = np.bincount(seg, weights=shifted, minlength=size)
    occupied = total > 0
    out = np.full(size, -np.inf)
    out[occupied] = peak[occupied] + np.log(total[occupied])
    share = np.exp(v - out[seg])

    def bw(g):
        return (g[seg] * share,)

    return _result(out, (values,), bw, "segment_logsumexp")


# ---------------------------------------------------------------------------
# gradient utilities

def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` must rebuild its scalar output from the current ``params`` values on
    every call. Error per coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    params = list(params)
    zero_grad(params)
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            for idx in np.ndindex(*p.shape):
                orig = p.values[idx]
                p.values[idx] = orig + step
                up = f().item()
                p.values[idx] = orig - step
                down = f().item()
                p.values[idx] = orig
                numeric = (up - down) / (2.0 * step)
                err = abs(a[idx] - numeric) / max(1e-8, abs(numeric))
                worst = max(worst, err)
    zero_grad(params)
    return worst
