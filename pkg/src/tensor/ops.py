"""
Differentiable operations used by the segmentation model.

Broadcasting is limited to the two cases the model needs: a scalar, or
one operand whose shape is a suffix of the other (leading batch axes /
trailing bias vectors). Anything else raises DimensionError.
"""
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import DimensionError
from src.tensor.autograd import Function, Tensor

Scalar = Union[int, float]

GELU_C = math.sqrt(2.0 / math.pi)


def _check_broadcast(a: Tuple[int, ...], b: Tuple[int, ...], op: str):
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} only broadcast over leading axes")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead else grad


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- elementwise

class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, "add")
        self.save(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.saved
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, "mul")
        self.save(a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Scale(Function):
    def forward(self, x, factor: float):
        self.save(factor)
        return x * x.dtype.type(factor)

    def backward(self, grad):
        (factor,) = self.saved
        return (grad * grad.dtype.type(factor),)


class Shift(Function):
    def forward(self, x, offset: float):
        return x + x.dtype.type(offset)

    def backward(self, grad):
        return (grad,)


class Exp(Function):
    def forward(self, x):
        out = np.exp(x)
        self.save(out)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad * out,)


class Gelu(Function):
    """tanh approximation"""

    def forward(self, x):
        c = x.dtype.type(GELU_C)
        inner = c * (x + x.dtype.type(0.044715) * x ** 3)
        t = np.tanh(inner)
        self.save(x, t)
        return x.dtype.type(0.5) * x * (1 + t)

    def backward(self, grad):
        x, t = self.saved
        c = x.dtype.type(GELU_C)
        d_inner = c * (1 + x.dtype.type(3 * 0.044715) * x ** 2)
        local = x.dtype.type(0.5) * (1 + t) + x.dtype.type(0.5) * x * (1 - t ** 2) * d_inner
        return (grad * local,)


# ---------------------------------------------------------------- linear algebra

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.dtype != b.dtype:
            raise TypeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
        if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
            raise DimensionError(f"matmul batch extents disagree: {a.shape} @ {b.shape}")
        self.save(a, b)
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved
        da = np.matmul(grad, np.swapaxes(b, -1, -2))
        db = np.matmul(np.swapaxes(a, -1, -2), grad)
        if b.ndim == 2 and db.ndim > 2:
            db = db.reshape(-1, *b.shape).sum(axis=0)
        return da, db


# ---------------------------------------------------------------- reductions

class Sum(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.save(x.shape, axis, keepdims)
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        shape, axis, keepdims = self.saved
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = sorted(a % len(shape) for a in axes)
            for a in axes:
                grad = np.expand_dims(grad, a)
        return (np.ascontiguousarray(np.broadcast_to(grad, shape)),)


class Softmax(Function):
    def forward(self, x, axis: int = -1):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
        self.save(out, axis)
        return out

    def backward(self, grad):
        out, axis = self.saved
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    """log-softmax, optionally clamped below at `floor` (zero gradient there)"""

    def forward(self, x, axis: int = -1, floor: Optional[float] = None):
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        prob = np.exp(out)
        mask = None
        if floor is not None:
            mask = out >= floor
            out = np.where(mask, out, x.dtype.type(floor))
        self.save(prob, axis, mask)
        return out

    def backward(self, grad):
        prob, axis, mask = self.saved
        if mask is not None:
            grad = grad * mask
        return (grad - prob * grad.sum(axis=axis, keepdims=True),)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps: float = 1e-6):
        if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
            raise DimensionError(
                f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last axis of {x.shape}"
            )
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = centered * inv
        self.save(xhat, inv, gain)
        return xhat * gain + bias

    def backward(self, grad):
        xhat, inv, gain = self.saved
        n = xhat.shape[-1]
        lead = tuple(range(grad.ndim - 1))
        dgain = (grad * xhat).sum(axis=lead)
        dbias = grad.sum(axis=lead)
        dxhat = grad * gain
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias


# ---------------------------------------------------------------- structure

class Reshape(Function):
    def forward(self, x, shape):
        self.save(x.shape)
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc

    def backward(self, grad):
        (shape,) = self.saved
        return (grad.reshape(shape),)


class Permute(Function):
    def forward(self, x, axes):
        self.save(axes)
        return np.ascontiguousarray(np.transpose(x, axes))

    def backward(self, grad):
        (axes,) = self.saved
        return (np.ascontiguousarray(np.transpose(grad, np.argsort(axes))),)


class GetItem(Function):
    """basic slicing only (ints, slices, Ellipsis)"""

    def forward(self, x, index):
        parts = index if isinstance(index, tuple) else (index,)
        for part in parts:
            if not (isinstance(part, (int, slice, np.integer)) or part is Ellipsis):
                raise TypeError(f"getitem supports basic slicing only, got {type(part).__name__}")
        self.save(x.shape, x.dtype, index)
        return np.array(x[index], copy=True)

    def backward(self, grad):
        shape, dtype, index = self.saved
        out = np.zeros(shape, dtype=dtype)
        out[index] = grad
        return (out,)


class Concat(Function):
    def forward(self, *parts, axis: int = 0):
        ref = parts[0]
        ax = _axis(axis, ref.ndim)
        for p in parts[1:]:
            if p.ndim != ref.ndim or p.shape[:ax] + p.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
                raise DimensionError(
                    f"concat along axis {axis}: extents disagree, {ref.shape} vs {p.shape}"
                )
        self.save(ax, [p.shape[ax] for p in parts])
        return np.concatenate(parts, axis=ax)

    def backward(self, grad):
        ax, sizes = self.saved
        cuts = np.cumsum(sizes)[:-1]
        return [np.ascontiguousarray(g) for g in np.split(grad, cuts, axis=ax)]


class ExpandBatch(Function):
    def forward(self, x, n: int):
        return np.ascontiguousarray(np.broadcast_to(x, (n,) + x.shape))

    def backward(self, grad):
        return (grad.sum(axis=0),)


class AvgPool2d(Function):
    """non-overlapping k x k mean over the last two axes"""

    def forward(self, x, k: int):
        h, w = x.shape[-2:]
        if h % k or w % k:
            raise DimensionError(f"avg_pool2d: extents {h}x{w} not divisible by {k}")
        self.save(k)
        lead = x.shape[:-2]
        blocks = x.reshape(lead + (h // k, k, w // k, k))
        return blocks.mean(axis=(-3, -1))

    def backward(self, grad):
        (k,) = self.saved
        spread = np.repeat(np.repeat(grad, k, axis=-2), k, axis=-1)
        return (spread * grad.dtype.type(1.0 / (k * k)),)


class UpsampleNearest(Function):
    def forward(self, x, factor: int):
        self.save(factor)
        return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)

    def backward(self, grad):
        (f,) = self.saved
        h, w = grad.shape[-2:]
        lead = grad.shape[:-2]
        return (grad.reshape(lead + (h // f, f, w // f, f)).sum(axis=(-3, -1)),)


# ---------------------------------------------------------------- public helpers

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return Add.apply(a, b)
    return Shift.apply(a, offset=float(b))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return Add.apply(a, Neg.apply(b))
    return Shift.apply(a, offset=-float(b))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return Mul.apply(a, b)
    return Scale.apply(a, factor=float(b))


def neg(x: Tensor) -> Tensor:
    return Neg.apply(x)


def scale(x: Tensor, factor: Scalar) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = MatMul.apply(x, weight)
    return out if bias is None else Add.apply(out, bias)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return Scale.apply(Sum.apply(x, axis=axis, keepdims=keepdims), factor=1.0 / max(count, 1))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _axis(axis, x.ndim)
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1, floor: Optional[float] = None) -> Tensor:
    _axis(axis, x.ndim)
    return LogSoftmax.apply(x, axis=axis, floor=floor)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Permute.apply(x, axes=tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    return GetItem.apply(x, index=index)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    return Concat.apply(*parts, axis=axis)


def split(x: Tensor, axis: int, sizes: Sequence[int]) -> List[Tensor]:
    ax = _axis(axis, x.ndim)
    if int(np.sum(sizes)) != x.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to extent {x.shape[ax]} of axis {axis}")
    out, start = [], 0
    for size in sizes:
        index = (slice(None),) * ax + (slice(start, start + size),)
        out.append(GetItem.apply(x, index=index))
        start += size
    return out


def expand_batch(x: Tensor, n: int) -> Tensor:
    return ExpandBatch.apply(x, n=int(n))


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    return AvgPool2d.apply(x, k=int(k))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    return UpsampleNearest.apply(x, factor=int(factor))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False)
