"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one input requires a gradient. Outside a tape everything runs as
plain numpy, which is what sampling and evaluation use.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import weakref

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError",
    "get_default_dtype", "set_default_dtype", "default_dtype", "backward",
    "tensor", "constant", "add", "sub", "mul", "div", "neg", "scale", "square",
    "sqrt", "exp", "log", "tanh", "gelu", "matmul", "transpose", "swapaxes",
    "reshape", "slice_axis", "concat", "stack", "sum", "mean", "softmax",
    "log_softmax", "layer_norm", "mse", "smooth_l1", "embedding",
    "timestep_embedding", "l2norm",
]

_DTYPE = np.float32
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class NonFiniteError(ValueError):
    """Raised when an op receives NaN or Inf input."""


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. f64 for grad checks)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: weakref.ref | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable, op: str):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Outputs refer back to their tape weakly, so keep a name bound to the tape
    (``with Tape() as tape``) until the gradients have been taken.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable, op: str) -> None:
        # weak back-reference: no tape <-> tensor cycle keeping activations alive
        out._tape = weakref.ref(self)
        self.nodes.append(_Node(out, inputs, fn, op))

    def gradient(self, loss: Tensor, wrt):
        """Gradients of scalar ``loss`` w.r.t. ``wrt`` (a Tensor, a sequence, or a name->Tensor map).

        Leaves that ``loss`` does not depend on get zero gradients.
        """
        if loss.data.size != 1 or loss.ndim != 0:
            raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
        if not np.isfinite(loss.data):
            raise NonFiniteError("backward: loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        def pick(t: Tensor) -> np.ndarray:
            g = grads.get(id(t))
            if g is None:
                return np.zeros_like(t.data)
            return np.asarray(g, dtype=t.dtype).reshape(t.shape)

        if isinstance(wrt, Tensor):
            return pick(wrt)
        if isinstance(wrt, dict) or hasattr(wrt, "items"):
            return {k: pick(v) for k, v in wrt.items()}
        return [pick(t) for t in wrt]


def backward(loss: Tensor, wrt):
    """Run the reverse pass on the tape that produced ``loss``."""
    tape = loss._tape() if loss._tape is not None else None
    if tape is None:
        if loss.data.size != 1 or loss.ndim != 0:
            raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
        raise ValueError("backward: loss was not produced on a live tape")
    return tape.gradient(loss, wrt)


# ---------------------------------------------------------------------------
# helpers


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DTYPE), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def _check_finite(op: str, *ts: Tensor) -> None:
    for t in ts:
        # a finite sum implies finite entries; only overflowed sums need the full scan
        if not np.isfinite(t.data.sum()) and not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].record(out, inputs, fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("add", a, b)
    _check_finite("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("sub", a, b)
    _check_finite("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("mul", a, b)
    _check_finite("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("div", a, b)
    _check_finite("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_finite("neg", a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar."""
    a = _as_tensor(a)
    _check_finite("scale", a)
    s = float(s)
    return _result("scale", a.data * a.dtype.type(s), (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_finite("square", a)
    x = a.data
    return _result("square", x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_finite("sqrt", a)
    if (a.data < 0).any():
        raise NonFiniteError("sqrt: negative input")
    out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_finite("exp", a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_finite("log", a)
    if (a.data <= 0).any():
        raise NonFiniteError("log: non-positive input")
    x = a.data
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_finite("tanh", a)
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    _check_finite("gelu", a)
    x = a.data
    x2 = x * x
    th = x2 * 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def fn(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3k x^2)
        d = th * th
        np.subtract(1.0, d, out=d)
        d *= x
        du = x2 * (3 * 0.044715 * _GELU_C)
        du += _GELU_C
        d *= du
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _result("gelu", out, (a,), fn)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("matmul", a, b)
    ad, bd = a.data, b.data
    flat = ad.ndim > 2 and bd.ndim == 2

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if flat:
                # fold batch dims into rows instead of summing per-batch products
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd
    return _result("matmul", out, (a, b), fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}")
    a = _as_tensor(a)
    _check_finite("transpose", a)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    a = _as_tensor(a)
    _check_finite("reshape", a)
    src = a.shape
    return _result("reshape", out, (a,), lambda g: (g.reshape(src),))


def _getitem(a: Tensor, idx) -> Tensor:
    a = _as_tensor(a)
    _check_finite("getitem", a)
    out = a.data[idx]
    src, dt = a.shape, a.dtype

    def fn(g):
        full = np.zeros(src, dtype=dt)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result("getitem", np.array(out), (a,), fn)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError("slice", a.shape, detail=f"[{start}:{stop}] on axis {axis}")
    idx = (slice(None),) * axis + (slice(start, stop),)
    return _getitem(a, idx)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    nd = ts[0].ndim
    axis = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError("concat", ts[0].shape, t.shape, detail=f"axis {axis}")
    _check_finite("concat", *ts)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError("stack", shape, t.shape)
    axis = axis % (len(shape) + 1)
    new = shape[:axis] + (1,) + shape[axis:]
    return concat([reshape(t, new) for t in ts], axis=axis)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, nd):
    if axis is None:
        return tuple(range(nd))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % nd for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    _check_finite("sum", a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _result("sum", np.asarray(out), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / n)


def l2norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as zero."""
    a = _as_tensor(a)
    _check_finite("l2norm", a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))

    def fn(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (gg * np.where(n > 0, x / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _result("l2norm", out, (a,), fn)


# ---------------------------------------------------------------------------
# neural-network ops


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    _check_finite("softmax", a)
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)
    return _result("softmax", p, (a,),
                   lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _check_finite("log_softmax", a)
    x = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return _result("log_softmax", out, (a,),
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gamma.shape, beta.shape)
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    _check_finite("layer_norm", a, gamma, beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def fn(g):
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", xhat * gd + beta.data, (a, gamma, beta), fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("mse", a, b)
    r = a.data - b.data
    n = r.size

    def fn(g):
        ga = (2.0 / n) * g * r
        return ga, -ga

    return _result("mse", np.asarray((r * r).mean()), (a, b), fn)


def smooth_l1(a: Tensor, b: Tensor, beta: float = 1.0) -> Tensor:
    """Mean Huber-style smooth L1 over all elements."""
    if a.shape != b.shape:
        raise ShapeError("smooth_l1", a.shape, b.shape)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("smooth_l1", a, b)
    r = a.data - b.data
    ar = np.abs(r)
    small = ar < beta
    val = np.where(small, 0.5 * r * r / beta, ar - 0.5 * beta)
    n = r.size

    def fn(g):
        d = np.where(small, r / beta, np.sign(r)) * (g / n)
        return d, -d

    return _result("smooth_l1", np.asarray(val.mean()), (a, b), fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding", table.shape, ids.shape, detail="ids must be integers")
    if table.ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
        raise ShapeError("embedding", table.shape, ids.shape, detail="id out of range")
    table = _as_tensor(table)
    _check_finite("embedding", table)
    src = table.shape

    def fn(g):
        full = np.zeros(src, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return _result("embedding", table.data[ids], (table,), fn)


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of integer timesteps, shape ``t.shape + (dim,)``. Not differentiable."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[..., None] * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return Tensor(emb.astype(_DTYPE))


def sum_all(ts: Iterable[Tensor]) -> Tensor:
    out = None
    for t in ts:
        out = t if out is None else add(out, t)
    if out is None:
        raise ValueError("sum_all: empty input")
    return out
