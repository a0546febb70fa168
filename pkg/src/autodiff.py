"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Operations on Tensors that require gradients are recorded on a
ComputationTape; ComputationTape.backward replays the record in reverse
and accumulates gradients into every variable. A tape belongs to one
forward/backward pass; tensors without a tape evaluate forward only.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .config import debug_enabled
from .errors import ShapeError

_DEBUG = debug_enabled()


class Tensor:
    """Array value with an optional gradient slot and owning tape."""

    __slots__ = ('value', 'grad', 'tape', 'requires_grad', 'name')

    def __init__(self, value, tape: Optional['ComputationTape'] = None,
                 requires_grad: bool = False, name: str = ''):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def __repr__(self) -> str:
        flag = ', requires_grad' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class TapeEntry:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputationTape:
    """Ordered record of primitive operations and their backward rules."""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def variable(self, value, name: str = '') -> Tensor:
        """Leaf tensor whose gradient is collected by backward()."""
        return Tensor(value, self, requires_grad=True, name=name)

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], backward) -> None:
        self.entries.append(TapeEntry(output, inputs, backward))

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(tensor) into every recorded tensor's grad."""
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is not self:
            raise ValueError("root tensor was not recorded on this tape")
        root._accumulate(np.ones_like(root.value))
        # entries are appended in evaluation order, so reversed order is topological
        for entry in reversed(self.entries):
            if entry.output.grad is None:
                continue
            grads = entry.backward(entry.output.grad)
            for tensor, grad in zip(entry.inputs, grads):
                if grad is not None and tensor.requires_grad:
                    tensor._accumulate(grad)

    def __len__(self) -> int:
        return len(self.entries)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _common_tape(tensors: Sequence[Tensor]) -> Optional[ComputationTape]:
    tape = None
    for tensor in tensors:
        if tensor.requires_grad and tensor.tape is not None:
            if tape is not None and tensor.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = tensor.tape
    return tape


def _result(value: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite values in forward pass (shape {np.shape(value)})")
    tape = _common_tape(inputs)
    out = Tensor(value, tape, requires_grad=tape is not None)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('add', a, b)
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('sub', a, b)
    return _result(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('mul', a, b)
    return _result(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.value, b.value), (a, b), backward)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _result(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}") from None
    return _result(value, (x,), lambda g: (g.reshape(x.shape),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.value)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.value)
    return _result(y, (x,), lambda g: (g / (2.0 * y),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def sum_(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.sum(x.value, axis=axis), (x,), backward)


def mean(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).copy(),)

    return _result(np.mean(x.value, axis=axis), (x,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along an axis (default: the feature axis)."""
    tensors = tuple(as_tensor(t) for t in tensors)
    first = tensors[0]
    ax = axis % first.ndim
    for other in tensors[1:]:
        same_rank = other.ndim == first.ndim
        if not same_rank or any(i != ax and p != q for i, (p, q) in enumerate(zip(first.shape, other.shape))):
            raise ShapeError(f"concat: incompatible shapes {first.shape} and {other.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.value for t in tensors], axis=ax), tensors,
                   lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mixed shapes {sorted(shapes)}")
    value = np.stack([t.value for t in tensors], axis=axis)
    ax = axis % value.ndim
    return _result(value, tensors,
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def slice_(x, index) -> Tensor:
    """Basic indexing; the gradient scatters back into a zero array."""
    x = as_tensor(x)

    def backward(g):
        grad = np.zeros(x.shape)
        if _is_basic_index(index):
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _result(x.value[index], (x,), backward)


@dataclass
class GradCheckReport:
    """Central-difference comparison of tape gradients, per parameter."""
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-6
    checked_entries: int = 0

    @property
    def max_relative_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def gradients(closure: Callable[[Dict[str, Tensor]], Tensor],
              params: Dict[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
    """Evaluate a scalar closure on a fresh tape; return (value, gradients)."""
    tape = ComputationTape()
    variables = {name: tape.variable(value, name) for name, value in params.items()}
    loss = closure(variables)
    tape.backward(loss)
    grads = {name: (v.grad if v.grad is not None else np.zeros_like(v.value))
             for name, v in variables.items()}
    return loss.item(), grads


def grad_check(closure: Callable[[Dict[str, Tensor]], Tensor],
               params: Dict[str, np.ndarray],
               step: float = 1e-5,
               tolerance: float = 1e-6,
               max_entries: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """
    Compare tape gradients against central finite differences.

    The relative error of a parameter is ||analytic - numeric|| divided by
    max(||analytic||, ||numeric||), over the checked entries.

    Args:
        closure: Maps a dict of named tensors to a scalar tensor
        params: Named parameter arrays (not modified)
        step: Finite-difference step
        tolerance: Pass threshold for the report
        max_entries: Check at most this many entries per parameter, picked
            deterministically from seed (default: all)
        seed: Seed for entry selection

    Returns:
        GradCheckReport with the per-parameter relative errors
    """
    _, analytic = gradients(closure, params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    def evaluate(name: str, perturbed: np.ndarray) -> float:
        constants = {k: Tensor(perturbed if k == name else v) for k, v in params.items()}
        return closure(constants).item()

    for name, value in params.items():
        flat_count = value.size
        if max_entries is not None and flat_count > max_entries:
            entries = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
        else:
            entries = np.arange(flat_count)

        numeric = np.empty(entries.size)
        for j, flat_index in enumerate(entries):
            index = np.unravel_index(flat_index, value.shape)
            plus = value.copy()
            plus[index] += step
            minus = value.copy()
            minus[index] -= step
            numeric[j] = (evaluate(name, plus) - evaluate(name, minus)) / (2.0 * step)

        exact = analytic[name].reshape(-1)[entries]
        scale = max(np.linalg.norm(exact), np.linalg.norm(numeric))
        report.errors[name] = 0.0 if scale == 0 else float(np.linalg.norm(exact - numeric) / scale)
        report.checked_entries += int(entries.size)

    return report
