"""
Dense tensors with tape-based reverse-mode differentiation.

Every backward rule is written with the same tape primitives as the forward
pass, so gradients recorded with ``create_graph=True`` can be differentiated
again (the R1 penalty needs this).
"""

import itertools
import logging
import threading
import weakref
from contextlib import contextmanager, nullcontext
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

_tensor_ids = itertools.count(1)
_local = threading.local()

SQRT_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's shape rule"""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf"""


def _state():
    if not hasattr(_local, 'tapes'):
        _local.tapes = []
        _local.dtype = np.float32
    return _local


def current_dtype():
    return _state().dtype


def current_tape() -> Optional['Tape']:
    tapes = _state().tapes
    return tapes[-1] if tapes else None


@contextmanager
def precision(dtype):
    """Switch the working dtype for tensors created in this thread"""
    state = _state()
    previous = state.dtype
    state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        state.dtype = previous


class Tensor:
    """Row-major float array plus an optional reference into the active tape"""

    __slots__ = ('data', 'id', 'node')

    def __init__(self, data):
        array = np.array(data, dtype=current_dtype())
        if array.ndim == 0:
            array = array.reshape(1)
        if 0 in array.shape:
            raise ShapeError(f"Tensor dimensions must be positive, got {array.shape}")
        self.data = array
        self.id = next(_tensor_ids)
        # (weakref to tape, node index) once recorded
        self.node = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> 'Tensor':
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.id = next(_tensor_ids)
        tensor.node = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.node is not None})"

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

    def sum(self, axis: Optional[int] = None) -> 'Tensor':
        return sum_(self, axis)

    def mean(self, axis: Optional[int] = None) -> 'Tensor':
        return mean(self, axis)


class Node:
    __slots__ = ('kind', 'inputs', 'attrs', 'output')

    def __init__(self, kind: str, inputs: Tuple[Tensor, ...], attrs: Dict, output: Tensor):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.output = output


class Tape:
    """Append-only record of ops; node inputs always point at earlier nodes"""

    def __init__(self):
        self.nodes: List[Node] = []
        self.recording = True
        self._watched: Dict[int, int] = {}
        self._ref = weakref.ref(self)

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        tapes = _state().tapes
        if tapes and tapes[-1] is self:
            tapes.pop()
        elif self in tapes:
            tapes.remove(self)
        return False

    @property
    def active(self) -> bool:
        return current_tape() is self and self.recording

    def watch(self, *tensors: Tensor) -> None:
        """Register tensors as differentiation leaves on this tape"""
        for tensor in tensors:
            if self.index_of(tensor) is not None:
                continue
            self._watched[tensor.id] = len(self.nodes)
            self.nodes.append(Node('leaf', (), {}, tensor))

    def index_of(self, tensor: Tensor) -> Optional[int]:
        node = tensor.node
        if node is not None and node[0]() is self:
            return node[1]
        return self._watched.get(tensor.id)

    @contextmanager
    def paused(self):
        previous = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = previous

    def record(self, kind: str, inputs: Tuple[Tensor, ...], attrs: Dict, output: Tensor) -> None:
        output.node = (self._ref, len(self.nodes))
        self.nodes.append(Node(kind, inputs, attrs, output))

    def backward(self, output: Tensor) -> Dict[int, Tensor]:
        """Reverse sweep from a scalar output; returns tensor id -> gradient"""
        if output.size != 1:
            raise ShapeError(f"backward: output must be a scalar of shape (1,), got {output.shape}")
        start = self.index_of(output)
        if start is None:
            return {}
        grads: Dict[int, Tensor] = {start: Tensor._wrap(np.ones(output.shape, dtype=output.data.dtype))}
        for index in range(start, -1, -1):
            grad = grads.get(index)
            node = self.nodes[index]
            if grad is None or node.kind == 'leaf':
                continue
            input_grads = _VJP[node.kind](node, grad)
            for tensor, tensor_grad in zip(node.inputs, input_grads):
                if tensor_grad is None:
                    continue
                position = self.index_of(tensor)
                if position is None:
                    continue
                if position in grads:
                    grads[position] = add(grads[position], tensor_grad)
                else:
                    grads[position] = tensor_grad
        return {self.nodes[index].output.id: grad for index, grad in grads.items()}

    def gradient(self, output: Tensor, tensors: Sequence[Tensor], create_graph: bool = True) -> List[Tensor]:
        """Gradients of output w.r.t. tensors; detached tensors get zeros"""
        context = nullcontext() if create_graph else self.paused()
        with context:
            grads = self.backward(output)
        result = []
        for tensor in tensors:
            grad = grads.get(tensor.id)
            if grad is None:
                grad = Tensor._wrap(np.zeros(tensor.shape, dtype=current_dtype()))
            result.append(grad)
        return result


def backward(tape: Tape, output: Tensor) -> Dict[int, Tensor]:
    return tape.backward(output)


def constant(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=current_dtype()))


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=current_dtype()))


def _emit(kind: str, inputs: Tuple[Tensor, ...], value: np.ndarray, **attrs) -> Tensor:
    value = np.array(value, dtype=current_dtype())
    if value.ndim == 0:
        value = value.reshape(1)
    if not np.all(np.isfinite(value)):
        shapes = ', '.join(str(t.shape) for t in inputs)
        raise NonFiniteError(f"{kind} produced non-finite values (inputs {shapes})")
    out = Tensor._wrap(value)
    tape = current_tape()
    if tape is not None and tape.recording:
        if any(tape.index_of(t) is not None for t in inputs):
            tape.record(kind, inputs, attrs, out)
    return out


def _binary_operands(kind: str, a, b) -> Tuple[Tensor, Tensor]:
    a = constant(a)
    b = constant(b)
    if a.shape == b.shape:
        return a, b
    try:
        target = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")
    if a.shape != target:
        a = broadcast(a, target)
    if b.shape != target:
        b = broadcast(b, target)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands('add', a, b)
    with np.errstate(all='ignore'):
        return _emit('add', (a, b), a.data + b.data)


def sub(a, b) -> Tensor:
    a, b = _binary_operands('sub', a, b)
    with np.errstate(all='ignore'):
        return _emit('sub', (a, b), a.data - b.data)


def mul(a, b) -> Tensor:
    a, b = _binary_operands('mul', a, b)
    with np.errstate(all='ignore'):
        return _emit('mul', (a, b), a.data * b.data)


def div(a, b) -> Tensor:
    a, b = _binary_operands('div', a, b)
    with np.errstate(all='ignore'):
        return _emit('div', (a, b), a.data / b.data)


def neg(x) -> Tensor:
    x = constant(x)
    return _emit('neg', (x,), -x.data)


def matmul(a, b) -> Tensor:
    a = constant(a)
    b = constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    with np.errstate(all='ignore'):
        return _emit('matmul', (a, b), a.data @ b.data)


def transpose(x) -> Tensor:
    x = constant(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _emit('transpose', (x,), x.data.T)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = constant(x)
    return _emit('leaky_relu', (x,), np.where(x.data > 0, x.data, x.data * slope), slope=slope)


def tanh(x) -> Tensor:
    x = constant(x)
    return _emit('tanh', (x,), np.tanh(x.data))


def exp(x) -> Tensor:
    x = constant(x)
    with np.errstate(all='ignore'):
        return _emit('exp', (x,), np.exp(x.data))


def square(x) -> Tensor:
    x = constant(x)
    with np.errstate(all='ignore'):
        return _emit('square', (x,), x.data * x.data)


def sqrt(x) -> Tensor:
    x = constant(x)
    if np.any(x.data < 0):
        raise NonFiniteError(f"sqrt: negative input (shape {x.shape})")
    return _emit('sqrt', (x,), np.sqrt(x.data))


def clamp_min(x, floor: float) -> Tensor:
    x = constant(x)
    return _emit('clamp_min', (x,), np.maximum(x.data, floor), floor=floor)


def _reduction_axes(source: Tuple[int, ...], target: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        if np.broadcast_shapes(source, target) != tuple(source):
            raise ValueError
    except ValueError:
        raise ShapeError(f"sum: cannot reduce shape {source} to {target}")
    lead = len(source) - len(target)
    axes = list(range(lead))
    for i, size in enumerate(target):
        if size == 1 and source[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes)


def sum_to(x, shape) -> Tensor:
    """Sum over the axes that broadcasting shape -> x.shape would expand"""
    x = constant(x)
    shape = tuple(int(s) for s in shape)
    axes = _reduction_axes(x.shape, shape)
    with np.errstate(all='ignore'):
        value = x.data.sum(axis=axes, keepdims=True).reshape(shape) if axes else x.data.reshape(shape)
    return _emit('sum', (x,), value, shape=shape)


def broadcast(x, shape) -> Tensor:
    x = constant(x)
    shape = tuple(int(s) for s in shape)
    try:
        value = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast shape {x.shape} to {shape}")
    return _emit('broadcast', (x,), value, shape=shape)


def sum_(x, axis: Optional[int] = None) -> Tensor:
    x = constant(x)
    if axis is None:
        return sum_to(x, (1,))
    axis = axis % x.ndim
    shape = tuple(1 if i == axis else s for i, s in enumerate(x.shape))
    return sum_to(x, shape)


def mean(x, axis: Optional[int] = None) -> Tensor:
    x = constant(x)
    count = x.size if axis is None else x.shape[axis % x.ndim]
    return mul(sum_(x, axis), 1.0 / count)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(constant(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: needs at least one input")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = tuple(t.shape[axis] for t in tensors)
    return _emit('concat', tensors, np.concatenate([t.data for t in tensors], axis=axis),
                 axis=axis, sizes=sizes)


def slice_(x, start: int, stop: int, axis: int = -1) -> Tensor:
    x = constant(x)
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of shape {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return _emit('slice', (x,), x.data[tuple(index)], start=start, stop=stop, axis=axis)


def _mask(values: np.ndarray) -> Tensor:
    return Tensor._wrap(np.array(values, dtype=current_dtype()))


def _zeros_along(shape: Tuple[int, ...], axis: int, size: int) -> Tensor:
    shape = list(shape)
    shape[axis] = size
    return zeros(tuple(shape))


def _vjp_slice(node: Node, g: Tensor):
    x = node.inputs[0]
    axis, start, stop = node.attrs['axis'], node.attrs['start'], node.attrs['stop']
    parts = []
    if start > 0:
        parts.append(_zeros_along(g.shape, axis, start))
    parts.append(g)
    if stop < x.shape[axis]:
        parts.append(_zeros_along(g.shape, axis, x.shape[axis] - stop))
    return (concat(parts, axis) if len(parts) > 1 else g,)


def _vjp_concat(node: Node, g: Tensor):
    axis = node.attrs['axis']
    grads = []
    offset = 0
    for size in node.attrs['sizes']:
        grads.append(slice_(g, offset, offset + size, axis))
        offset += size
    return tuple(grads)


_VJP: Dict[str, Callable[[Node, Tensor], Tuple[Optional[Tensor], ...]]] = {
    'add': lambda n, g: (g, g),
    'sub': lambda n, g: (g, neg(g)),
    'mul': lambda n, g: (mul(g, n.inputs[1]), mul(g, n.inputs[0])),
    'div': lambda n, g: (div(g, n.inputs[1]),
                         neg(div(mul(g, n.inputs[0]), square(n.inputs[1])))),
    'neg': lambda n, g: (neg(g),),
    'matmul': lambda n, g: (matmul(g, transpose(n.inputs[1])), matmul(transpose(n.inputs[0]), g)),
    'transpose': lambda n, g: (transpose(g),),
    'leaky_relu': lambda n, g: (mul(g, _mask(np.where(n.inputs[0].data > 0, 1.0, n.attrs['slope']))),),
    'tanh': lambda n, g: (mul(g, sub(1.0, square(n.output))),),
    'exp': lambda n, g: (mul(g, n.output),),
    'square': lambda n, g: (mul(mul(g, n.inputs[0]), 2.0),),
    'sqrt': lambda n, g: (div(mul(g, 0.5), clamp_min(n.output, SQRT_FLOOR)),),
    'clamp_min': lambda n, g: (mul(g, _mask(n.inputs[0].data > n.attrs['floor'])),),
    'sum': lambda n, g: (broadcast(g, n.inputs[0].shape),),
    'broadcast': lambda n, g: (sum_to(g, n.inputs[0].shape),),
    'concat': _vjp_concat,
    'slice': _vjp_slice,
}

_FORWARD: Dict[str, Callable[..., Tensor]] = {
    'add': add,
    'sub': sub,
    'mul': mul,
    'div': div,
    'neg': neg,
    'matmul': matmul,
    'transpose': transpose,
    'leaky_relu': leaky_relu,
    'tanh': tanh,
    'exp': exp,
    'square': square,
    'sqrt': sqrt,
    'clamp_min': clamp_min,
    'sum': sum_,
    'mean': mean,
    'broadcast': broadcast,
    'concat': lambda *tensors, axis=-1: concat(tensors, axis),
    'slice': slice_,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. forward_op('leaky_relu', x, slope=0.2)"""
    op = _FORWARD.get(kind)
    if op is None:
        raise ValueError(f"Unknown op kind: {kind}")
    return op(*inputs, **attrs)


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-3) -> float:
    """Worst relative gap between tape gradients and central differences.

    Runs in double precision; parameters captured by ``f`` are promoted.
    """
    with precision(np.float64):
        x = Tensor(point.data)
        with Tape() as tape:
            tape.watch(x)
            out = f(x)
            (analytic,) = tape.gradient(out, [x], create_graph=False)
        analytic = analytic.data.reshape(-1)

        base = x.data.reshape(-1)
        numeric = np.zeros_like(base)
        for i in range(base.size):
            plus = base.copy()
            minus = base.copy()
            plus[i] += step
            minus[i] -= step
            upper = f(Tensor(plus.reshape(x.shape))).item()
            lower = f(Tensor(minus.reshape(x.shape))).item()
            numeric[i] = (upper - lower) / (2 * step)

    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denominator))
