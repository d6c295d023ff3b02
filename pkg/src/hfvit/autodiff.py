"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a C-contiguous numpy array. Operations executed while
a :class:`Tape` is active (``with Tape() as tape:``) append a node holding the
vector-Jacobian product of that operation; :func:`backward` walks the nodes in
reverse to produce gradients.

Only the primitives the HFViT network needs are provided.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()
_default_dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``float32`` or ``float64``)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """Dense row-major array with shape metadata."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or _default_dtype))
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive operations for one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op, inputs, output, vjp) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, vjp))

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record():
    """Suspend recording even if a tape is active."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


class Gradients:
    """Mapping from tensors to their accumulated gradient arrays."""

    def __init__(self):
        self._entries: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _accumulate(self, tensor: Tensor, grad: np.ndarray) -> None:
        key = id(tensor)
        entry = self._entries.get(key)
        if entry is None:
            self._entries[key] = (tensor, np.array(grad, dtype=tensor.dtype, copy=True))
        else:
            entry[1].__iadd__(grad)

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        return self._entries[id(tensor)][1]

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._entries

    def get(self, tensor: Tensor, default=None):
        entry = self._entries.get(id(tensor))
        return default if entry is None else entry[1]

    def __len__(self) -> int:
        return len(self._entries)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode sweep over ``tape`` seeded at the scalar ``loss``.

    Every tensor that received a gradient appears in the returned map; leaf
    parameters get a gradient of their own shape. A tape can be swept once.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("backward already ran on this tape; call tape.reset() first")
    tape.consumed = True

    grads = Gradients()
    grads._accumulate(loss, np.ones(loss.shape, dtype=loss.dtype))
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            grads._accumulate(inp, gi)
    return grads


# ----------------------------------------------------------------------------
# primitive plumbing


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    result = Tensor(out, dtype=out.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(op, inputs, result, vjp)
    return result


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


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _emit("div", (a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (g / (2 * out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", (a,), out, lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", (a,), a.data * pos, lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid exp overflow
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype, copy=False)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1 + erf(x / x.dtype.type(_SQRT2)))
    out = x * cdf

    def vjp(g):
        pdf = x.dtype.type(_INV_SQRT_2PI) * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit("gelu", (a,), out, vjp)


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / g.dtype.type(count), a.shape),)

    return _emit("mean", (a,), np.asarray(out), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                 lambda g: (g.transpose(inverse),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tensors, out, vjp)


def getitem(a: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(a.data[index])

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", (a,), out, vjp)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), out, vjp)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Per-channel k x k cross-correlation, zero padding ``(k - 1) // 2``.

    ``x`` is ``N x H x W x C`` and ``weight`` is ``C x k x k``.
    """
    if x.ndim != 4:
        raise DimensionError(f"depthwise_conv2d expects N x H x W x C, got {x.shape}")
    n, h, w, c = x.shape
    if weight.ndim != 3 or weight.shape[0] != c or weight.shape[1] != weight.shape[2]:
        raise DimensionError(f"kernel {weight.shape} does not match {c} input channels")
    k = weight.shape[1]
    pad = (k - 1) // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    wt = weight.data
    out = np.zeros((n, ho, wo, c), dtype=x.dtype)
    windows = []
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                  slice(j, j + stride * (wo - 1) + 1, stride), slice(None))
            windows.append((i, j, sl))
            out += xp[sl] * wt[:, i, j]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wt)
        for i, j, sl in windows:
            gxp[sl] += g * wt[:, i, j]
            gw[:, i, j] = np.einsum("nhwc,nhwc->c", g, xp[sl])
        return gxp[:, pad:pad + h, pad:pad + w, :], gw

    return _emit("depthwise_conv2d", (x, weight), out, vjp)


# ----------------------------------------------------------------------------
# gradient verification


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    entries_checked: int


@dataclass
class GradCheckReport:
    checks: list[ParamCheck]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    analytic: dict[str, np.ndarray] | None = None,
    floor_ratio: float = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` rebuilds its graph on every call. For each parameter tensor the error
    is ``max|a - n| / max(max|a|, max|n|, floor)`` over the checked entries,
    where ``floor`` is ``floor_ratio`` times the largest analytic gradient
    magnitude across all checked tensors. The floor keeps a gradient that is
    structurally zero (pure round-off on both sides) from reading as a
    100% error; a single-tensor check is purely relative. With
    ``max_entries`` set, that many entries are sampled per tensor. ``analytic``
    overrides the tape gradients (used to test the checker itself).
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    for name, p in named:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 parameters; {name} is {p.dtype}")

    if analytic is None:
        with Tape() as tape:
            loss = f()
        grads = backward(tape, loss)
        analytic = {name: grads.get(p, np.zeros(p.shape)) for name, p in named}

    rng = np.random.default_rng(seed)
    largest = max((float(np.max(np.abs(analytic[name]), initial=0.0)) for name, _ in named), default=0.0)
    floor = floor_ratio * largest
    checks = []
    for name, p in named:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[idx]
        numeric = np.empty(len(idx))
        with no_record():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                up = float(f().data.reshape(-1)[0])
                flat[i] = orig - step
                down = float(f().data.reshape(-1)[0])
                flat[i] = orig
                numeric[k] = (up - down) / (2 * step)
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
        err = float(np.max(np.abs(a - numeric), initial=0.0) / scale) if scale > 0 else 0.0
        checks.append(ParamCheck(name, err, len(idx)))
    return GradCheckReport(checks, tolerance)
