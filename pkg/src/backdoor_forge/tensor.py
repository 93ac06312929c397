"""Small float64 tensor engine with tape-based reverse-mode differentiation.

Tensors wrap a numpy array.  Operations executed while a :class:`Tape` is
active (``with Tape() as tape:``) are recorded when at least one operand is
tracked, i.e. was passed to :meth:`Tape.watch` or produced by a recorded op.
:func:`backward` replays the tape in reverse and returns a gradient for every
watched leaf.

Convolutions are stride-1 "valid"; use :func:`pad2d` for zero padding.
ReLU's subgradient at 0 is 0.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "ShapeError", "UnknownPrimitiveError", "NonScalarLossError",
    "NonFiniteError", "backward", "apply", "PRIMITIVES", "add", "sub", "mul", "neg",
    "matmul", "conv2d", "conv1d", "max_pool2d", "relu", "sigmoid", "log", "mean",
    "sum_", "reshape", "pad2d", "embedding", "softmax_cross_entropy", "softmax",
    "OptimizerState", "sgd_step", "finite_diff_check",
]


class ShapeError(ValueError):
    pass


class UnknownPrimitiveError(KeyError):
    pass


class NonScalarLossError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Dense float64 array.  ``data`` is always a C-contiguous ndarray."""

    __slots__ = ("data", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data):
        d = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = d if d.flags.c_contiguous else d.copy()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarLossError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self.data!r})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable  # upstream grad -> tuple of grads (None for untracked)


_local = threading.local()


def _active() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records primitive applications on tracked tensors.

    A tape is owned by the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self._tracked: set[int] = set()

    def watch(self, t: Tensor) -> Tensor:
        if not isinstance(t, Tensor):
            raise TypeError("watch() expects a Tensor")
        if id(t) not in self._tracked:
            self._tracked.add(id(t))
            self.leaves.append(t)
        return t

    def is_tracked(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def _record(self, out: Tensor, inputs: tuple, fn: Callable) -> None:
        self._tracked.add(id(out))
        self.nodes.append(_Node(out, inputs, fn))


def _emit(out_data: np.ndarray, inputs: tuple, fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape._record(out, inputs, fn)
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Gradient of scalar ``loss`` for each watched leaf of ``tape``.

    Leaves that do not influence the loss receive zero gradients.
    """
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not tape.is_tracked(t):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        out[leaf] = np.zeros_like(leaf.data) if g is None else np.ascontiguousarray(g)
    return out


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``a`` of shape (..., m, k) times 2-D ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(a.data @ b.data, (a, b), bw)


def _check_conv(x, w, b, nd):
    if x.data.ndim != nd + 2 or w.data.ndim != nd + 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv{nd}d: input {x.shape} and kernel {w.shape} are incompatible")
    if any(xs < ks for xs, ks in zip(x.shape[2:], w.shape[2:])):
        raise ShapeError(f"conv{nd}d: kernel {w.shape} larger than input {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv{nd}d: bias {b.shape} does not match kernel {w.shape}")


def conv2d(x, w, b=None) -> Tensor:
    """Valid stride-1 cross-correlation. x: (N,C,H,W), w: (F,C,kh,kw), b: (F,)."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_conv(x, w, b, 2)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    # (N, Ho, Wo, C, kh, kw) -> rows of patches
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gm.T @ cols).reshape(w.shape)
        gpad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gcols = sliding_window_view(gpad, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
        gcols = gcols.reshape(n * h * wd, f * kh * kw)
        wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        gx = (gcols @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        gb = None if b is None else g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, bw)


def conv1d(x, w, b=None) -> Tensor:
    """Valid stride-1 cross-correlation. x: (N,C,L), w: (F,C,k), b: (F,)."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_conv(x, w, b, 1)
    n, c, length = x.shape
    f, _, k = w.shape
    lo = length - k + 1
    cols = sliding_window_view(x.data, k, axis=2).transpose(0, 2, 1, 3).reshape(n * lo, c * k)
    out = (cols @ w.data.reshape(f, -1).T).reshape(n, lo, f).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]

    def bw(g):
        gm = g.transpose(0, 2, 1).reshape(-1, f)
        gw = (gm.T @ cols).reshape(w.shape)
        gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
        gcols = sliding_window_view(gpad, k, axis=2).transpose(0, 2, 1, 3).reshape(n * length, f * k)
        wflip = w.data[:, :, ::-1].transpose(1, 0, 2).reshape(c, -1)
        gx = (gcols @ wflip.T).reshape(n, length, c).transpose(0, 2, 1)
        gb = None if b is None else g.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, bw)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pool over the last two axes; trailing rows/cols that
    do not fill a window are dropped.  Ties route the gradient to the first max."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: input {x.shape} smaller than window {size}")
    xt = x.data[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size)
    xt = xt.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = xt.argmax(axis=-1)
    out = np.take_along_axis(xt, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = gw.reshape(n, c, ho * size, wo * size)
        return (gx,)

    return _emit(out, (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def _axes(ndim, axis):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(x.data.ndim, axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(x.data.ndim, axis)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit(out, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def pad2d(x, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    x = as_tensor(x)
    if pad < 0:
        raise ValueError("pad must be non-negative")
    width = [(0, 0)] * (x.data.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(x.data, width)

    def bw(g):
        return (g[..., pad:g.shape[-2] - pad, pad:g.shape[-1] - pad],)

    return _emit(out, (x,), bw)


def embedding(ids, table) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array (not differentiable)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit(table.data[ids], (table,), bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-sample cross-entropy.  1-D logits give a scalar, (B,K) logits a (B,) vector."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    single = logits.data.ndim == 1
    z = logits.data[None] if single else logits.data
    lab = labels.reshape(-1)
    if z.ndim != 2 or lab.shape[0] != z.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= z.shape[1]):
        raise ShapeError(f"softmax_cross_entropy: label out of range for {z.shape[1]} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = logsum - shifted[rows, lab]
    p = np.exp(shifted - logsum[:, None])

    def bw(g):
        g = np.asarray(g).reshape(-1, 1)
        d = p.copy()
        d[rows, lab] -= 1.0
        d = d * g
        return (d[0] if single else d,)

    out = loss.reshape(()) if single else loss
    return _emit(out, (logits,), bw)


PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "neg": neg, "matmul": matmul,
    "conv2d": conv2d, "conv1d": conv1d, "max_pool2d": max_pool2d, "relu": relu,
    "sigmoid": sigmoid, "log": log, "sum": sum_, "mean": mean, "reshape": reshape,
    "pad2d": pad2d, "embedding": embedding, "softmax_cross_entropy": softmax_cross_entropy,
}


def apply(name: str, *args, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {name!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(state: OptimizerState, params: dict, grads: dict) -> dict:
    """In-place SGD with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v."""
    if set(params) != set(grads):
        raise KeyError(f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}")
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if state.momentum:
            v = state.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            elif v.shape != p.shape:
                raise ShapeError(f"velocity for {name!r} has shape {v.shape}, parameter {p.shape}")
            v = state.momentum * v + g
            state.velocity[name] = v
            p.data -= state.learning_rate * v
        else:
            p.data -= state.learning_rate * g
    return params


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    x0 = np.array(point, dtype=np.float64)
    with Tape() as tape:
        x = tape.watch(Tensor(x0))
        out = fn(x)
    analytic = backward(tape, out)[x]
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("analytic gradient is not finite")
    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += epsilon
        lo[i] -= epsilon
        fh = fn(Tensor(hi.reshape(x0.shape))).item()
        fl = fn(Tensor(lo.reshape(x0.shape))).item()
        if not (np.isfinite(fh) and np.isfinite(fl)):
            raise NonFiniteError(f"function not finite near coordinate {i}")
        numeric[i] = (fh - fl) / (2 * epsilon)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
