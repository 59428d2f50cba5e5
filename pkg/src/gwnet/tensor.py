"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a :class:`TapeNode` carrying a global
sequence number. ``Tensor.backward`` collects the nodes reachable from the
root and replays them in strictly decreasing sequence order, which is the
reverse of insertion order for the forward pass that built them.

Layout convention for signals is ``[batch, channels, nodes, time]`` so the
time axis is contiguous.
"""

from __future__ import annotations

import contextlib
import enum
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, SequenceTooShortError, ValidationError


class Op(enum.Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    SCALE = "scale"
    SHIFT = "shift"
    BIAS_ADD = "bias_add"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    ABS = "abs"
    SOFTMAX_ROWS = "softmax_rows"
    SUM = "sum"
    RESHAPE = "reshape"
    PERMUTE = "permute"
    SLICE_TIME = "slice_time"
    PAD_TIME = "pad_time"
    NODE_MIX = "node_mix"
    CHANNEL_MIX = "channel_mix"
    CONV_TIME = "conv_time"


@dataclass(eq=False)
class TapeNode:
    seq: int
    op: Op
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


_seq = itertools.count()
_state = threading.local()
_corrupted: set[Op] = set()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def corrupted_backward(op: Op | str, factor: float = 1.5) -> Iterator[None]:
    """Test hook: scale the gradients emitted by ``op``'s backward by ``factor``.

    Used to confirm the gradient-check suite detects a broken backward rule.
    """
    op = Op(op) if isinstance(op, str) else op
    _corrupted.add(op)
    _state.corrupt_factor = factor
    try:
        yield
    finally:
        _corrupted.discard(op)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: TapeNode | None = None

    @classmethod
    def _result(cls, data: np.ndarray, node: TapeNode | None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = node is not None
        out.grad = None
        out.name = None
        out._node = node
        return out

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
    def node(self) -> TapeNode | None:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, None)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        if self._node is None:
            if self.requires_grad:
                _accumulate(self, np.ones_like(self.data))
            return

        reached: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            reached.append(t)
            stack.extend(t._node.inputs)
        reached.sort(key=lambda t: t._node.seq, reverse=True)

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reached:
            g = pending.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            in_grads = node.backward(g)
            if node.op in _corrupted:
                factor = getattr(_state, "corrupt_factor", 1.5)
                in_grads = [None if ig is None else ig * factor for ig in in_grads]
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate(inp, ig)
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + ig
                else:
                    pending[id(inp)] = ig


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64, copy=True).reshape(leaf.shape)
    else:
        leaf.grad = leaf.grad + g.reshape(leaf.shape)


def _record(op: Op, inputs: tuple[Tensor, ...], data: np.ndarray, backward, **saved) -> Tensor:
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        node = TapeNode(next(_seq), op, inputs, backward, saved)
        return Tensor._result(data, node)
    return Tensor._result(data, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(Op.ADD, (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(Op.SUB, (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(Op.MUL, (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _record(Op.SCALE, (x,), x.data * c, lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _record(Op.SHIFT, (x,), x.data + c, lambda g: (g,))


def bias_add(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Add a 1-D bias along ``axis`` (the channel axis for 4-D signals)."""
    if b.ndim != 1 or x.ndim <= axis or x.shape[axis] != b.shape[0]:
        raise DimensionError(
            f"bias_add: bias {b.shape} does not broadcast over axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = b.shape[0]
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _record(Op.BIAS_ADD, (x, b), x.data + b.data.reshape(view),
                   lambda g: (g, g.sum(axis=others)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(Op.RELU, (x,), np.where(pos, x.data, 0.0), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(Op.SIGMOID, (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(Op.TANH, (x,), y, lambda g: (g * (1.0 - y * y),))


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return _record(Op.ABS, (x,), np.abs(x.data), lambda g: (g * sgn,))


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch by name to one of ``add``, ``mul``, ``relu``, ``sigmoid``, ``tanh``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --- reductions and reshaping ---------------------------------------------

def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(Op.SUM, (x,), np.array(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    return scale(sum_(x), 1.0 / x.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record(Op.RESHAPE, (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(Op.PERMUTE, (x,), np.ascontiguousarray(x.data.transpose(axes)),
                   lambda g: (g.transpose(inv),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _record(Op.TRANSPOSE, (x,), np.ascontiguousarray(x.data.T), lambda g: (g.T,))


def slice_time(x: Tensor, start: int, stop: int | None = None) -> Tensor:
    """Select ``x[..., start:stop]`` along the last (time) axis."""
    length = x.shape[-1]
    sl = slice(start, stop)
    lo, hi, _ = sl.indices(length)
    if hi <= lo:
        raise DimensionError(f"slice_time: empty slice [{start}:{stop}] of length {length}")

    def back(g):
        full = np.zeros(x.shape)
        full[..., lo:hi] = g
        return (full,)

    return _record(Op.SLICE_TIME, (x,), x.data[..., lo:hi].copy(), back)


def pad_time(x: Tensor, left: int) -> Tensor:
    """Prepend ``left`` zeros on the time axis."""
    if left < 0:
        raise ContractError("pad_time: negative padding")
    if left == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(left, 0)]
    return _record(Op.PAD_TIME, (x,), np.pad(x.data, widths), lambda g: (g[..., left:],))


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(Op.MATMUL, (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by subtracting each row's max."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ValidationError("softmax_rows: non-finite input")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record(Op.SOFTMAX_ROWS, (x,), y, back)


def node_mix(a: Tensor, x: Tensor) -> Tensor:
    """Apply an N×N matrix over the node axis: ``y[b,c,:,t] = a @ x[b,c,:,t]``."""
    if a.ndim != 2 or x.ndim < 2 or a.shape[1] != x.shape[-2]:
        raise DimensionError(f"node_mix: matrix {a.shape} does not act on node axis of {x.shape}")
    ad, xd = a.data, x.data
    lead = tuple(range(xd.ndim - 2))

    def back(g):
        ga = np.tensordot(g, xd, axes=(lead + (xd.ndim - 1,), lead + (xd.ndim - 1,)))
        return ga, np.matmul(ad.T, g)

    return _record(Op.NODE_MIX, (a, x), np.matmul(ad, xd), back)


def channel_mix(x: Tensor, w: Tensor) -> Tensor:
    """Per-position linear map on the channel axis: ``y[b,o,n,t] = sum_c x[b,c,n,t] w[c,o]``.

    This is a 1×1 convolution with weights laid out as in ``XW``.
    """
    if x.ndim != 4 or w.ndim != 2 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"channel_mix: weights {w.shape} do not match channels of {x.shape}")
    b, c, n, t = x.shape
    o = w.shape[1]
    xr = x.data.reshape(b, c, n * t)
    wd = w.data
    y = np.matmul(wd.T, xr).reshape(b, o, n, t)

    def back(g):
        gr = g.reshape(b, o, n * t)
        gw = np.tensordot(xr, gr, axes=([0, 2], [0, 2]))
        gx = np.matmul(wd, gr).reshape(b, c, n, t)
        return gx, gw

    return _record(Op.CHANNEL_MIX, (x, w), y, back)


def conv_time(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Valid-mode dilated causal convolution along the last axis.

    ``w`` has shape ``[C_out, C_in, K]`` with tap ``s`` reading ``x(t - dilation*s)``.
    Output length is ``L - dilation*(K-1)``.
    """
    if x.ndim != 4 or w.ndim != 3 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv_time: kernel {w.shape} does not match input {x.shape}")
    if dilation < 1:
        raise ContractError("conv_time: dilation must be >= 1")
    b, c, n, length = x.shape
    o, _, k = w.shape
    span = dilation * (k - 1)
    out_len = length - span
    if out_len <= 0:
        raise SequenceTooShortError(
            f"conv_time: length {length} too short for kernel {k} at dilation {dilation}")
    xd = x.data
    # column s holds x(t - dilation*s) for each output position t
    offsets = [span - dilation * s for s in range(k)]
    cols = np.stack([xd[..., off:off + out_len] for off in offsets], axis=2)
    cols = cols.reshape(b, c * k, n * out_len)
    wm = w.data.reshape(o, c * k)
    y = np.matmul(wm, cols).reshape(b, o, n, out_len)

    def back(g):
        gr = g.reshape(b, o, n * out_len)
        gw = np.tensordot(gr, cols, axes=([0, 2], [0, 2])).reshape(o, c, k)
        gcols = np.matmul(wm.T, gr).reshape(b, c, k, n, out_len)
        gx = np.zeros_like(xd)
        for s, off in enumerate(offsets):
            gx[..., off:off + out_len] += gcols[:, :, s]
        return gx, gw

    return _record(Op.CONV_TIME, (x, w), y, back)


# --- gradient checking -----------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Compare backprop against central differences for a scalar function of ``x``.

    Returns the max over entries of ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` may close over other tensors; only ``x`` is perturbed.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    saved_flag = x.requires_grad
    saved_grad = x.grad
    x.requires_grad = True
    x.grad = None
    try:
        f(x).backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        numeric = np.empty_like(x.data)
        num_flat = numeric.reshape(-1)
        flat = x.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                hi, lo = orig + eps, orig - eps
                flat[i] = hi
                up = f(x).item()
                flat[i] = lo
                down = f(x).item()
                flat[i] = orig
                # divide by the step actually taken, not the nominal 2*eps
                num_flat[i] = (up - down) / (hi - lo)
    finally:
        x.requires_grad = saved_flag
        x.grad = saved_grad
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0
