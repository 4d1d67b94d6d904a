"""
Dense tensor with reverse-mode automatic differentiation.

A Tensor wraps a contiguous numpy buffer (float32 or float64). Every
differentiable operation is a Function subclass; applying it records the
parents and whatever the backward pass needs on the output tensor. The
recorded nodes form a Graph whose order is the execution order, and
backward() walks that order in reverse exactly once per node.
"""
import itertools
import logging
import threading
from contextlib import contextmanager
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import DimensionError, GradientStateError

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEFAULT_DTYPE = np.dtype(np.float32)

# Creation order doubles as execution order for recorded nodes.
_sequence = itertools.count()
_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Run operations without recording a graph (per thread)"""
    previous = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


def as_dtype(dtype) -> np.dtype:
    resolved = np.dtype(dtype)
    if resolved not in FLOAT_DTYPES:
        raise TypeError(f"unsupported dtype {resolved}; expected float32 or float64")
    return resolved


class Tensor:
    """n-dimensional float array with an optional gradient buffer"""

    def __init__(self, data, requires_grad: bool = False, dtype=None, _ctx: "Function" = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            array = np.asarray(data, dtype=as_dtype(dtype))
        else:
            array = np.asarray(data)
            if array.dtype not in FLOAT_DTYPES:
                array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx
        self._seq = next(_sequence)
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, accumulate: bool = False):
        backward(self, accumulate=accumulate)

    # operator sugar; the real work lives in ops
    def __add__(self, other):
        from src.tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from src.tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from src.tensor import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from src.tensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from src.tensor import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; divide by a python scalar")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from src.tensor import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from src.tensor import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from src.tensor import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from src.tensor import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from src.tensor import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from src.tensor import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from src.tensor import ops
        return ops.permute(self, axes)


class Function:
    """
    One differentiable operation.

    Subclasses implement forward() on raw arrays and backward() returning
    one gradient (or None) per parent.
    """

    def __init__(self, *parents: Tensor):
        self.parents: Tuple[Tensor, ...] = parents
        self.saved: tuple = ()

    def save(self, *values):
        self.saved = values

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        for item in inputs:
            if not isinstance(item, Tensor):
                raise TypeError(f"{cls.__name__} expects Tensor inputs, got {type(item).__name__}")
        ctx = cls(*inputs)
        out = ctx.forward(*[t.data for t in inputs], **kwargs)
        requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
        if not requires_grad:
            ctx = None
        return Tensor(out, requires_grad=requires_grad, _ctx=ctx)


class Graph:
    """Recorded operations reachable from a root, in execution order"""

    def __init__(self, root: Tensor):
        seen: Dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            if node._ctx is not None:
                stack.extend(node._ctx.parents)
        self.root = root
        self.nodes: List[Tensor] = sorted(seen.values(), key=lambda t: t._seq)

    def __len__(self):
        return len(self.nodes)

    @property
    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n._ctx is None and n.requires_grad]


def backward(loss: Tensor, accumulate: bool = False) -> Graph:
    """
    Populate .grad on every leaf that requires it.

    Leaves that already hold a gradient make this raise unless
    accumulate=True, in which case the new gradient is added.
    """
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._ctx is None:
        raise GradientStateError("loss is detached: no recorded graph leads to it")
    if loss._consumed:
        raise GradientStateError("backward() already ran on this loss; rebuild the graph")

    graph = Graph(loss)
    leaves = graph.leaves
    if not accumulate:
        stale = [leaf for leaf in leaves if leaf.grad is not None]
        if stale:
            raise GradientStateError(
                f"{len(stale)} leaf gradients already populated; "
                "call zero_grad() first or pass accumulate=True"
            )

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if node._ctx is None:
            if not node.requires_grad:
                continue
            if grad is None:
                grad = np.zeros_like(node.data)
            if accumulate and node.grad is not None:
                node.grad = node.grad + grad
            else:
                node.grad = np.array(grad, copy=True)
            continue
        if grad is None:
            continue
        parent_grads = node._ctx.backward(grad)
        for parent, parent_grad in zip(node._ctx.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise DimensionError(
                    f"{type(node._ctx).__name__} produced grad {parent_grad.shape} "
                    f"for input {parent.shape}"
                )
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad

    loss._consumed = True
    return graph


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
