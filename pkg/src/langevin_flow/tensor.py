"""
Dense arrays with a reverse-mode differentiation tape.

Every learned computation in the package is written with the operations in
this module. Each operation evaluates eagerly with numpy and, when gradients
are enabled and one of its inputs requires them, appends a node to the active
``Tape``. ``backward`` walks the tape in reverse creation order (a valid
topological order) and accumulates gradients into the leaves.

Example:
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with recording() as tape:
        loss = (w @ w).sum()
        tape.backward(loss)
    print(w.grad)

Shapes must match exactly for elementwise operations, except that a 0-d
tensor or a python number may be combined with anything. Row biases are
tiled explicitly with ``broadcast_rows``. ``matmul`` additionally accepts a
shared 2-d right operand for a batch of left operands.
"""

import contextlib
import logging
import threading
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigurationError, ContractError, DimensionError, DomainError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float64

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def set_default_dtype(dtype) -> None:
    """Select float64 (verification precision) or float32 (fast path)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigurationError(f"Unsupported tensor dtype '{dtype}'. Use float64 or float32.")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class _Node:
    __slots__ = ('op', 'inputs', 'output', 'backward')

    def __init__(self, op: str, inputs: Tuple['Tensor', ...], output: 'Tensor', backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """
    Ordered record of differentiable operations.

    Nodes are appended as operations execute, so inputs always precede the
    node that consumes them. A tape is single threaded; independent tapes may
    run on different threads.
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> 'Tape':
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.clear()

    def record(self, op: str, inputs: Tuple['Tensor', ...], output: 'Tensor', backward: BackwardFn) -> None:
        output._tape = self
        output._node = len(self.nodes)
        self.nodes.append(_Node(op, inputs, output, backward))

    def clear(self) -> None:
        """Free every node; outputs become detached constants."""
        for node in self.nodes:
            node.output._tape = None
            node.output._node = None
        self.nodes = []

    def backward(self, loss: 'Tensor') -> None:
        """
        Propagate d(loss)/d(leaf) into ``.grad`` of every leaf on this tape.

        Gradients accumulate additively, both across fan-out inside one sweep
        and across repeated sweeps until ``zero_grad``. The tape is freed
        afterwards.

        Raises:
            ContractError: If ``loss`` has more than one element or was not
                produced on this tape
        """
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is None:
            if loss.requires_grad:
                loss._accumulate(np.ones_like(loss.data))
                return
            raise ContractError("backward() called on a tensor that is not on the tape")
        if loss._tape is not self:
            raise ContractError("backward() called on a loss recorded by a different tape")

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[:loss._node + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
                else:
                    inp._accumulate(ig)
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp._tape is not self and inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
        logger.debug(f"Backward sweep over {len(self.nodes)} nodes")
        self.clear()


_state = threading.local()


def _tape_stack() -> List[Tape]:
    stack = getattr(_state, 'tapes', None)
    if stack is None:
        stack = [Tape()]
        _state.tapes = stack
    return stack


def current_tape() -> Tape:
    """The innermost active tape of the calling thread."""
    return _tape_stack()[-1]


def grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def recording(tape: Optional[Tape] = None) -> Iterator[Tape]:
    """Run a forward pass on a fresh tape that is freed on exit."""
    tape = tape if tape is not None else Tape()
    with tape:
        yield tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording anything (evaluation, oracles)."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    Dense n-dimensional array, optionally tracked by the tape.

    Attributes:
        data: The numpy buffer (float64 unless the fast path is selected)
        grad: Gradient buffer, filled by ``backward`` for leaves requiring it
        requires_grad: Whether gradients flow to / through this tensor
        name: Optional label (parameter name)
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None
        self._node: Optional[int] = None

    def __repr__(self) -> str:
        label = f", name='{self.name}'" if self.name else ''
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> Optional[int]:
        """Index of the producing node on the active tape, None for leaves."""
        return self._node

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("Tensor division is only defined for python scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def sum(self, axis=None):
        return reduce('sum', self, axis)

    def mean(self, axis=None):
        return reduce('mean', self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def clip(self, low: float, high: float):
        return clip(self, low, high)


def _make(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad, dtype=data.dtype if data.dtype.kind == 'f' else None)
    if requires_grad:
        current_tape().record(op, inputs, out, backward_fn)
    return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unscalar(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _operands(a, b) -> Tuple[Tensor, Tensor]:
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_elementwise(a, b, 'add')
    return _make('add', a.data + b.data, (a, b),
                 lambda g: (_unscalar(g, a.shape), _unscalar(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_elementwise(a, b, 'sub')
    return _make('sub', a.data - b.data, (a, b),
                 lambda g: (_unscalar(g, a.shape), _unscalar(-g, b.shape)))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float, np.number)):
        return scale(a, b)
    if isinstance(a, (int, float, np.number)):
        return scale(b, a)
    a, b = _operands(a, b)
    _check_elementwise(a, b, 'mul')
    return _make('mul', a.data * b.data, (a, b),
                 lambda g: (_unscalar(g * b.data, a.shape), _unscalar(g * a.data, b.shape)))


def scale(a: Tensor, c: Number) -> Tensor:
    c = float(c)
    return _make('scale', a.data * c, (a,), lambda g: (g * c,))


def negate(a: Tensor) -> Tensor:
    return _make('negate', -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make('exp', out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive input (min {a.data.min():.3g})")
    return _make('log', np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make('tanh', out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make('sigmoid', out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _make('softplus', out, (a,), lambda g: (g * expit(a.data),))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient passes only where the input is inside."""
    inside = (a.data >= low) & (a.data <= high)
    return _make('clip', np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    'add': add,
    'sub': sub,
    'mul': mul,
    'exp': exp,
    'log': log,
    'tanh': tanh,
    'sigmoid': sigmoid,
    'softplus': softplus,
    'negate': negate,
    'scale': scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op not in _ELEMENTWISE:
        raise ConfigurationError(f"Unknown elementwise op '{op}'. Available: {list(_ELEMENTWISE)}")
    return _ELEMENTWISE[op](*args)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` is either a shared 2-d matrix
    or carries exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if shared and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _make('matmul', a.data @ b.data, (a, b), backward_fn)


def broadcast_rows(a: Tensor, leading: Tuple[int, ...]) -> Tensor:
    """Tile ``a`` along new leading axes: shape ``leading + a.shape``."""
    leading = tuple(int(n) for n in leading)
    out = np.broadcast_to(a.data, leading + a.shape).copy()
    n_lead = len(leading)
    return _make('broadcast_rows', out, (a,),
                 lambda g: (g.sum(axis=tuple(range(n_lead))) if n_lead else g,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilised by subtracting the maximum."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make('softmax', out, (a,), backward_fn)


def softmax_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax(a, axis=-1)


def grouped_correlate(z: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """
    Zero-padded per-group cross-correlation on raw arrays.

    Args:
        z: Array of shape (..., groups, length)
        kernels: Array of shape (groups, k) with k odd

    Returns:
        Array with the shape of ``z``
    """
    k = kernels.shape[-1]
    pad = (k - 1) // 2
    widths = [(0, 0)] * (z.ndim - 1) + [(pad, pad)]
    windows = sliding_window_view(np.pad(z, widths), k, axis=-1)
    return np.einsum('...glk,gk->...gl', windows, kernels)


def conv1d_grouped(z: Tensor, kernels: Tensor) -> Tensor:
    """
    Per-group 1-d cross-correlation, stride 1, zero padding (k - 1) / 2.

    Args:
        z: Tensor of shape (..., groups, length)
        kernels: Tensor of shape (groups, k)

    Raises:
        ConfigurationError: If k is even
        DimensionError: If group counts differ or length is zero
    """
    if kernels.ndim != 2:
        raise DimensionError(f"kernels must be (groups, k), got {kernels.shape}")
    groups, k = kernels.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_grouped needs an odd kernel size, got {k}")
    if z.ndim < 2 or z.shape[-2] != groups:
        raise DimensionError(f"input {z.shape} does not carry {groups} groups on axis -2")
    length = z.shape[-1]
    if length < 1:
        raise DimensionError("conv1d_grouped needs a non-empty sequence")
    pad = (k - 1) // 2
    widths = [(0, 0)] * (z.ndim - 1) + [(pad, pad)]
    windows = sliding_window_view(np.pad(z.data, widths), k, axis=-1)
    out = np.einsum('...glk,gk->...gl', windows, kernels.data)

    def backward_fn(g):
        g_kernel = np.einsum('...glk,...gl->gk', windows, g, optimize=True)
        g_padded = np.zeros(z.shape[:-1] + (length + 2 * pad,), dtype=g.dtype)
        for j in range(k):
            g_padded[..., j:j + length] += kernels.data[:, j, None] * g
        return g_padded[..., pad:pad + length], g_kernel

    return _make('conv1d_grouped', out, (z, kernels), backward_fn)


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------

def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def reduce(op: str, a: Tensor, axis=None) -> Tensor:
    """Sum or mean over ``axis`` (int, tuple of ints, or None for all)."""
    if op not in ('sum', 'mean'):
        raise ConfigurationError(f"Unknown reduction '{op}'. Use 'sum' or 'mean'.")
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (_normalize_axis(axis, a.ndim),)
    else:
        axes = tuple(sorted(_normalize_axis(ax, a.ndim) for ax in axis))
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.sum(axis=axes)
    factor = 1.0
    if op == 'mean':
        factor = 1.0 / count
        out = out * factor

    def backward_fn(g):
        g = np.asarray(g) * factor
        for ax in axes:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(op, np.asarray(out), (a,), backward_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if -1 not in shape and int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from e
    return _make('reshape', out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(_normalize_axis(ax, a.ndim) for ax in axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for ndim {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _make('transpose', np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = _normalize_axis(axis, ndim)
    for t in tensors:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make('concat', np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("stack of an empty list")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise DimensionError(f"stack: shapes {[t.shape for t in tensors]} differ")
    axis = _normalize_axis(axis, len(shape) + 1)

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make('stack', np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward_fn)


def getitem(a: Tensor, index) -> Tensor:
    """Differentiable numpy indexing (basic slices and integer arrays)."""
    try:
        out = a.data[index]
    except IndexError as e:
        raise DimensionError(str(e)) from e

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make('getitem', np.array(out, copy=True), (a,), backward_fn)


def slice_(a: Tensor, ranges: Sequence[Tuple[int, int]]) -> Tensor:
    """
    Take ``[start, stop)`` along each leading axis listed in ``ranges``.

    Raises:
        DimensionError: If a range exceeds its axis or is reversed
    """
    if len(ranges) > a.ndim:
        raise DimensionError(f"{len(ranges)} ranges for a tensor of ndim {a.ndim}")
    index = []
    for ax, (start, stop) in enumerate(ranges):
        if not 0 <= start <= stop <= a.shape[ax]:
            raise DimensionError(f"range [{start}, {stop}) out of bounds for axis {ax} of extent {a.shape[ax]}")
        index.append(slice(start, stop))
    return getitem(a, tuple(index))


def backward(loss: Tensor) -> None:
    """Run the reverse sweep for ``loss`` on the tape that recorded it."""
    tape = loss._tape if loss._tape is not None else current_tape()
    tape.backward(loss)
