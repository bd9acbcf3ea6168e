"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation builds a node holding its parents and a closure
that maps the output gradient to one gradient per parent. ``backward`` walks the
recorded graph once in reverse topological order.
"""
import contextlib
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from exceptions import GradientError, ShapeError

_GRAD_ENABLED = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (memory builds, evaluation, finite differences)."""
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
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense float64 array that can take part in gradient computation.

    Leaves created by the user (parameters, inputs under test) receive ``grad``
    after ``backward``; a leaf whose gradient is still populated refuses a second
    backward until it is reset.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward_fn: Optional[BackwardFn] = None
        self._op = ''

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence['Tensor'], backward_fn: BackwardFn,
                op: str) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        out._op = op
        return out

    # -- views ------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name='{self.name}'" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- backward ---------------------------------------------------------

    def _topological_order(self):
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """
        Populate ``grad`` on every leaf reachable from this scalar.

        Raises:
            GradientError: non-scalar output, graph not recorded, or a leaf whose
                gradient from an earlier backward was never reset
        """
        if self.data.size != 1:
            raise GradientError(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("backward called on a value that does not require grad")

        order = self._topological_order()
        for node in order:
            if not node._parents and node.grad is not None:
                label = node.name or repr(node)
                raise GradientError(
                    f"Gradient of {label} already populated; reset gradients before another backward"
                )

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> 'Tensor':
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return unbroadcast(g, a_shape), unbroadcast(g, b_shape)

        return Tensor._result(self.data + other.data, (self, other), backward, 'add')

    __radd__ = __add__

    def __neg__(self) -> 'Tensor':
        return Tensor._result(-self.data, (self,), lambda g: (-g,), 'neg')

    def __sub__(self, other) -> 'Tensor':
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> 'Tensor':
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> 'Tensor':
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)

        return Tensor._result(a * b, (self, other), backward, 'mul')

    __rmul__ = __mul__

    def __truediv__(self, other) -> 'Tensor':
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._result(a / b, (self, other), backward, 'div')

    def __matmul__(self, other) -> 'Tensor':
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b, -1, -2))
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
            return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

        return Tensor._result(np.matmul(a, b), (self, other), backward, 'matmul')

    # -- reductions and structure ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)),
                              (self,), backward, 'sum')

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._result(self.data.reshape(shape), (self,),
                              lambda g: (g.reshape(original),), 'reshape')

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result(self.data.transpose(axes), (self,),
                              lambda g: (g.transpose(inverse),), 'transpose')

    def __getitem__(self, index) -> 'Tensor':
        if isinstance(index, Tensor):
            raise TypeError("index with integer arrays, not tensors")
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=np.float64)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(np.array(self.data[index]), (self,), backward, 'getitem')


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)
