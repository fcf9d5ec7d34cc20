from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import float64_requested
from core.errors import ShapeMismatchError

_DEFAULT_DTYPE = np.float64 if float64_requested() else np.float32
_GRAD_ENABLED = True

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported tensor dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switches the dtype new tensors and parameters are created with."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad() -> Iterator[None]:
    """Forward passes inside this block record no autodiff graph."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense array with reverse-mode gradient support.

    `data` is a numpy array in the default dtype; `grad` is filled by `backward()` on any
    tensor created with `requires_grad=True` or derived from one.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = (), _op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data).astype(_DEFAULT_DTYPE, copy=False)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op

    # ------------------ BASICS ------------------

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    @staticmethod
    def make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable[[np.ndarray], None], op: str) -> "Tensor":
        """Creates an op result, recording the graph only when a parent needs gradients."""
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = np.asarray(data)
        out.grad = None
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        out._op = op
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = unbroadcast(grad, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagates gradients to every tensor in this result's history."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatchError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
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
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------ ARITHMETIC ------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, self.dtype)

        def backward(g):
            self._accumulate(g)
            other._accumulate(g)
        return Tensor.make(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor.make(-self.data, (self,), lambda g: self._accumulate(-g), "neg")

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, self.dtype)

        def backward(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)
        return Tensor.make(self.data * other.data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, self.dtype)

        def backward(g):
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / (other.data ** 2))
        return Tensor.make(self.data / other.data, (self, other), backward, "div")

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other, self.dtype) / self

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other, self.dtype)
        if self.shape[-1] != other.shape[-2 if other.ndim > 1 else 0]:
            raise ShapeMismatchError(f"matmul inner dimensions differ: {self.shape} @ {other.shape}")
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeMismatchError(f"matmul needs operands of rank >= 2, got {self.shape} @ {other.shape}")

        def backward(g):
            self._accumulate(g @ np.swapaxes(other.data, -1, -2))
            other._accumulate(np.swapaxes(self.data, -1, -2) @ g)
        return Tensor.make(self.data @ other.data, (self, other), backward, "matmul")

    def __getitem__(self, index) -> "Tensor":
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            self._accumulate(full)
        return Tensor.make(self.data[index], (self,), backward, "slice")

    # ------------------ SHAPE ------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor.make(self.data.reshape(shape), (self,), lambda g: self._accumulate(g.reshape(original)), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        return Tensor.make(self.data.transpose(axes), (self,), lambda g: self._accumulate(g.transpose(inverse)), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # ------------------ REDUCTIONS ------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape))
        return Tensor.make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))


def as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or _DEFAULT_DTYPE))


class Param:
    """A trainable tensor plus its Adam moment buffers."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True)
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.shape})"
