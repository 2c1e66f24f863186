"""Dense tensors with reverse-mode automatic differentiation.

Operations record themselves onto a define-by-run graph as they execute.
``backward`` materializes the recorded operations of the graph below a
scalar loss as a :class:`Tape` (a topologically ordered operation list)
and replays their backward rules in reverse, accumulating gradients into
every leaf tensor created with ``requires_grad=True``.

Precision is a module-wide mode (:func:`set_default_dtype`), not a
per-operation choice: tests run in double precision, training may switch
the whole engine to single precision.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_DEFAULT_DTYPE = np.dtype(np.float64)


class _ThreadState(threading.local):
    # recording is toggled per thread so parallel inference contexts
    # cannot disturb each other
    def __init__(self):
        self.grad_enabled = True


_STATE = _ThreadState()


def set_default_dtype(dtype) -> None:
    """Switch the engine-wide precision (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference fast path)."""
    previous = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


@dataclass
class TapeEntry:
    """One recorded operation: its inputs and the matching backward rule.

    ``backward`` maps the gradient at the operation's output to one
    gradient per input (``None`` for inputs that need no gradient).
    """

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple]


class Tensor:
    """N-dimensional array, optionally participating in gradient recording.

    ``data`` is a contiguous row-major numpy array in the engine dtype.
    ``grad`` is populated on leaves by :func:`backward` and has the same
    shape as ``data``; repeated backward passes accumulate into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_entry")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=_DEFAULT_DTYPE))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._entry: TapeEntry | None = None

    # -- introspection -------------------------------------------------
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
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def is_leaf(self) -> bool:
        return self._entry is None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Tape:
    """Topologically ordered list of the operations below a root tensor.

    Every entry's inputs were produced by earlier entries (or are
    leaves), so replaying the backward rules in reverse order yields the
    same gradients as symbolic differentiation of the composite.
    """

    def __init__(self, ordered: list[Tensor]):
        self.ordered = ordered

    @property
    def entries(self) -> list[TapeEntry]:
        return [t._entry for t in self.ordered if t._entry is not None]

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._entry is not None:
                for parent in node._entry.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    ``loss`` must be a scalar produced by recorded operations.  Calling
    backward again without clearing leaf gradients adds to them.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires gradients")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(Tape.trace(loss).ordered):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        entry = node._entry
        if entry is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        parent_grads = entry.backward(g)
        for parent, pg in zip(entry.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            existing = grads.get(id(parent))
            grads[id(parent)] = pg if existing is None else existing + pg


# ----------------------------------------------------------------------
# op plumbing
# ----------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _STATE.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._entry = TapeEntry(op, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_data(op: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}"
        ) from None


# ----------------------------------------------------------------------
# elementwise family
# ----------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _binary_data("add", a, b, np.add)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _binary_data("sub", a, b, np.subtract)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _binary_data("mul", a, b, np.multiply)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _binary_data("div", a, b, np.divide)

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make("div", out, (a, b), back)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def back(g):
        return (g * s,)

    return _make("scale", x.data * s, (x,), back)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is taken as 0
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _make("relu", np.where(mask, x.data, 0.0), (x,), back)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (x,), back)


def log(x: Tensor) -> Tensor:
    def back(g):
        return (g / x.data,)

    return _make("log", np.log(x.data), (x,), back)


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = np.power(x.data, exponent)

    def back(g):
        if exponent == 0.0:
            return (np.zeros_like(x.data),)
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return _make("power", out, (x,), back)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    mask = x.data > floor

    def back(g):
        return (g * mask,)

    return _make("clamp_min", np.where(mask, x.data, floor), (x,), back)


# ----------------------------------------------------------------------
# reductions and layout
# ----------------------------------------------------------------------

def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape),)

    return _make("sum", out, (x,), back)


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.shape[axis]

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape) / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape) / count,)

    return _make("mean", out, (x,), back)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {list(x.shape)}")

    def back(g):
        return (g.T,)

    return _make("transpose", x.data.T, (x,), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(
            f"cannot reshape {list(x.shape)} to {list(shape)}"
        ) from None

    def back(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat of an empty sequence")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = [list(p.shape) for p in parts]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return _make("concat", out, parts, back)


def narrow(x: Tensor, key) -> Tensor:
    """Basic slicing (ints and slices only) with scatter-style backward."""
    out = x.data[key]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make("narrow", out, (x,), back)


# ----------------------------------------------------------------------
# linear algebra and convolution
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects matrices, got shapes {list(a.shape)} and {list(b.shape)}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner extents differ for shapes {list(a.shape)} and {list(b.shape)}"
        )
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", out, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax along ``axis``, computed with max subtraction.

    Entries equal to ``-inf`` receive exactly zero probability; at least
    one finite entry per row is the caller's responsibility.
    """
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", out, (x,), back)


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    dilation: int = 1,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """1-D cross-correlation of ``x`` (c_in, L) with kernels ``w`` (c_out, c_in, k).

    Symmetric zero padding; output length is
    ``floor((L + 2*padding - dilation*(k-1) - 1) / stride) + 1``.
    Backward is exact for input, kernels, and bias.
    """
    if x.ndim != 2 or w.ndim != 3:
        raise DimensionError(
            f"conv1d expects x (c_in, L) and w (c_out, c_in, k); got {list(x.shape)}, {list(w.shape)}"
        )
    if dilation < 1 or stride < 1 or padding < 0:
        raise ContractError(
            f"conv1d: dilation={dilation}, stride={stride}, padding={padding} out of range"
        )
    c_in, length = x.shape
    c_out, w_cin, k = w.shape
    if w_cin != c_in:
        raise DimensionError(
            f"conv1d: input has {c_in} channels but kernel expects {w_cin}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(
            f"conv1d: bias shape {list(bias.shape)} does not match {c_out} output channels"
        )
    padded_len = length + 2 * padding
    span = dilation * (k - 1) + 1
    if span > padded_len:
        raise DimensionError(
            f"conv1d: kernel span {span} exceeds padded length {padded_len}"
        )
    l_out = (padded_len - span) // stride + 1

    xp = np.zeros((c_in, padded_len), dtype=x.data.dtype)
    xp[:, padding:padding + length] = x.data
    out = np.zeros((c_out, l_out), dtype=x.data.dtype)
    reach = (l_out - 1) * stride + 1
    for t in range(k):
        start = t * dilation
        out += w.data[:, :, t] @ xp[:, start:start + reach:stride]
    if bias is not None:
        out = out + bias.data[:, None]

    inputs = (x, w) if bias is None else (x, w, bias)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for t in range(k):
            start = t * dilation
            seg = xp[:, start:start + reach:stride]
            gw[:, :, t] = g @ seg.T
            gxp[:, start:start + reach:stride] += w.data[:, :, t].T @ g
        gx = gxp[:, padding:padding + length]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=1)

    return _make("conv1d", out, inputs, back)


# ----------------------------------------------------------------------
# verification utility
# ----------------------------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor.  The error per coordinate
    is ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    probe = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad.copy()

    numeric = np.zeros_like(analytic)
    flat = probe.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(probe).item()
            flat[i] = orig - eps
            down = f(probe).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)
