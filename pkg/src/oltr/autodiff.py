"""Small dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays and are never mutated after creation.  Operations
executed while a :class:`Tape` is active (and touching at least one tensor
with ``requires_grad``) are appended to that tape in execution order, which
is automatically a topological order.  :func:`backward` walks the tape in
reverse.

    >>> x = Tensor([1.0, -2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(relu(x))
    >>> backward(tape, loss)[x]
    array([1., 0.])
"""
from __future__ import annotations

import builtins
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    """Raised by the first op whose output contains NaN or inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite output produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
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

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __len__(self):
        return self.shape[0]


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Ordered record of executed ops; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        _tape_stack().append(None)

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor(data, requires_grad=needs and tape is not None, dtype=data.dtype)
    if out.requires_grad:
        tape.nodes.append(_Node(op, out, tuple(inputs), vjp))
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None):
    """Reverse sweep over ``tape``.

    Returns a dict keyed by tensor identity.  When ``params`` is given the
    dict holds exactly those tensors, with zeros for any that ``loss`` does
    not depend on.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a single element, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                keep[key] = t
    if params is None:
        return _GradDict({keep[k]: v for k, v in grads.items()})
    return _GradDict({p: grads.get(id(p), np.zeros_like(p.data)) for p in params})


class _GradDict(dict):
    def __missing__(self, key):
        if isinstance(key, Tensor):
            return np.zeros_like(key.data)
        raise KeyError(key)


# ---------------------------------------------------------------------------
# helpers

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _pair(a, b):
    a = a if isinstance(a, Tensor) else None
    b = b if isinstance(b, Tensor) else None
    return a, b


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    ta, tb = _pair(a, b)
    ref = ta if ta is not None else tb
    a, b = _coerce(a, ref), _coerce(b, ref)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    ta, tb = _pair(a, b)
    ref = ta if ta is not None else tb
    a, b = _coerce(a, ref), _coerce(b, ref)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    ta, tb = _pair(a, b)
    ref = ta if ta is not None else tb
    a, b = _coerce(a, ref), _coerce(b, ref)
    _broadcast_shape("elemwise_mul", a, b)
    return _make("elemwise_mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    ta, tb = _pair(a, b)
    ref = ta if ta is not None else tb
    a, b = _coerce(a, ref), _coerce(b, ref)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = np.asarray(s, dtype=a.dtype)
    return _make("scalar_mul", a.data * s, (a,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    tiny = np.finfo(x.dtype).tiny
    floored = np.maximum(x.data, tiny)
    # inputs below the floor get zero gradient, consistent with the clamp
    live = x.data >= tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(floored)
    return _make("log", out, (x,), lambda g: (np.where(live, g / floored, 0).astype(x.dtype),))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    out = np.where(mask, x.data, np.asarray(lo, dtype=x.dtype))
    return _make("clamp_min", out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and normalizations

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    return _make("sum", np.asarray(out), (x,), lambda g: (_expand(g, x.shape, axes, keepdims).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    scale = np.asarray(1.0 / n, dtype=x.dtype)
    return _make("mean", np.asarray(out), (x,), lambda g: (_expand(g, x.shape, axes, keepdims) * scale,))


def min(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Minimum along one axis; the gradient goes to the first minimizer."""
    axis = axis % x.ndim
    idx = np.argmin(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        return (gx,)

    return _make("min", out, (x,), vjp)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is 0."""
    axis = axis % x.ndim
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.where(n > 0, gk * x.data / safe, 0).astype(x.dtype),)

    return _make("l2_norm", n if keepdims else np.squeeze(n, axis=axis), (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make("log_softmax", out, (x,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# linear algebra and layout

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make("matmul", out, (a, b), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    hw = x.shape[2] * x.shape[3]
    scale = np.asarray(1.0 / hw, dtype=x.dtype)
    out = x.data.mean(axis=(2, 3))
    return _make("global_avg_pool", out, (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy(),))


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded (same size) 3x3 convolution.

    x: N x C x H x W, w: O x C x 3 x 3, b: O.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError("conv2d-3x3", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d-3x3", x.shape, w.shape, b.shape)
    n, c, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # cols: N x C x 3 x 3 x H x W
    cols = np.empty((n, c, 3, 3, h, wd), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + h, kx:kx + wd]
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 2, 3]))  # O x N x H x W
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if b is not None:
        out = out + b.data[None, :, None, None]

    def vjp(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(w.data, g, axes=([0], [1]))  # C x 3 x 3 x N x H x W
            gxp = np.zeros_like(xp)
            for ky in range(3):
                for kx in range(3):
                    gxp[:, :, ky:ky + h, kx:kx + wd] += gcols[:, ky, kx].transpose(1, 0, 2, 3)
            gx = gxp[:, :, 1:-1, 1:-1]
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d-3x3", out, inputs, vjp)


_KINDS = {
    "matmul": matmul,
    "conv2d-3x3": conv2d_3x3,
    "add": add,
    "sub": sub,
    "elemwise_mul": mul,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "sum": sum,
    "mean": mean,
    "l2_norm": l2_norm,
    "scalar_mul": scalar_mul,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "reshape": reshape,
    "global_avg_pool": global_avg_pool,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("softmax", x, axis=0)``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_KINDS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(fn: Callable[..., Tensor], params: Sequence[Tensor], fd_step: float = 1e-5) -> float:
    """Max over all entries of |analytic - central difference| / max(1, |analytic|).

    ``fn`` is called as ``fn(*params)`` and must return a single-element tensor.
    """
    params = [p if p.requires_grad else Tensor(p.data, requires_grad=True) for p in params]
    with Tape() as tape:
        loss = fn(*params)
    if loss.size != 1:
        raise ValueError(f"grad_check: fn must return a scalar, got shape {loss.shape}")
    grads = backward(tape, loss, params)

    worst = 0.0
    for i, p in enumerate(params):
        analytic = grads[p].reshape(-1)
        base = p.data.reshape(-1)
        for j in range(base.size):
            vals = []
            for step in (fd_step, -fd_step):
                shifted = base.copy()
                shifted[j] += step
                args = list(params)
                args[i] = Tensor(shifted.reshape(p.shape), dtype=p.dtype)
                with no_grad():
                    vals.append(float(fn(*args).data.reshape(-1)[0]))
            fd = (vals[0] - vals[1]) / (2 * fd_step)
            err = abs(analytic[j] - fd) / builtins.max(1.0, abs(analytic[j]))
            worst = builtins.max(worst, err)
    return worst
