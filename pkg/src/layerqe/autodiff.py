"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every operation in this module records the
parents it was computed from and a closure mapping the upstream gradient onto
gradients for those parents; :func:`backward` walks that graph once, in reverse
topological order, and accumulates into the ``grad`` of every leaf that requires
one.

Broadcasting is narrow: elementwise operations accept identical
shapes, a 0-d scalar tensor on either side, or (for :func:`add`) a bias row whose
shape equals the trailing dimension. Anything else raises :class:`ShapeError`.

Storage defaults to 32-bit floats; :func:`precision` switches to 64-bit for
gradient checking.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from layerqe.errors import ShapeError

_logger = logging.getLogger(__name__)

_DEFAULT_DTYPE: ContextVar[np.dtype] = ContextVar("layerqe_default_dtype", default=np.dtype(np.float32))
_GRAD_ENABLED: ContextVar[bool] = ContextVar("layerqe_grad_enabled", default=True)

GELU_COEFF = 0.044715
SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE.get()


@contextmanager
def precision(dtype: Union[str, type, np.dtype]) -> Iterator[np.dtype]:
    """Temporarily change the storage dtype used for new tensors.

    >>> with precision("float64"):
    ...     Tensor([1.0]).dtype
    dtype('float64')
    """
    resolved = np.dtype(dtype)
    if resolved.kind != "f":
        raise ValueError(f"precision must be a floating dtype, got {resolved}")
    token = _DEFAULT_DTYPE.set(resolved)
    try:
        yield resolved
    finally:
        _DEFAULT_DTYPE.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording a graph (inference)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """A dense array that participates in reverse-mode differentiation.

    Parameters
    ----------
    data : array-like
        Values. Floating numpy arrays keep their dtype; anything else is converted
        to the current default dtype (see :func:`precision`).
    requires_grad : bool, default False
        Leaf tensors with ``requires_grad`` receive accumulated gradients in ``grad``.
    dtype : numpy dtype or None
        Force a storage dtype.
    name : str or None
        Optional label, used in error messages and checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        dtype: Optional[Union[str, np.dtype]] = None,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data: np.ndarray = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        tracked = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

    # -- properties -----------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label}, "
            f"requires_grad={self.requires_grad})"
        )

    # -- operators ------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: float) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise ShapeError("only division by a Python scalar is supported")
        return divide(self, float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: object) -> "Tensor":
        return take(self, index)


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap ``value`` as a constant tensor, matching ``like``'s dtype when given."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum(), dtype=grad.dtype)
    if len(shape) == 1:
        return grad.reshape(-1, shape[0]).sum(axis=0)
    raise ShapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")


def _check_elementwise(a: Tensor, b: Tensor, op: str, *, allow_bias: bool) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if allow_bias and b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        return
    if allow_bias and a.ndim == 1 and b.ndim >= 1 and b.shape[-1:] == a.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise ----------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise sum; also scalar + tensor and tensor + bias row."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_elementwise(a, b, "add", allow_bias=True)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), _backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_elementwise(a, b, "sub", allow_bias=True)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), _backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product of equal shapes, or a 0-d scalar tensor times a tensor."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_elementwise(a, b, "mul", allow_bias=False)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), _backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar."""
    factor = float(factor)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * factor,)

    return Tensor._result(x.data * np.asarray(factor, dtype=x.dtype), (x,), _backward, "scale")


def divide(x: Tensor, divisor: float) -> Tensor:
    """Divide by a Python scalar (true division, not multiplication by the reciprocal)."""
    divisor = float(divisor)
    if divisor == 0.0:
        raise ZeroDivisionError("division of a tensor by zero")

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g / divisor,)

    return Tensor._result(x.data / np.asarray(divisor, dtype=x.dtype), (x,), _backward, "divide")


def silu(x: Tensor) -> Tensor:
    sig = expit(x.data)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return Tensor._result(x.data * sig, (x,), _backward, "silu")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    inner = SQRT_2_OVER_PI * (x.data + GELU_COEFF * x.data**3)
    t = np.tanh(inner)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return Tensor._result(0.5 * x.data * (1.0 + t), (x,), _backward, "gelu")


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {"silu": silu, "gelu": gelu}


# -- reductions -------------------------------------------------------------------


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._result(np.asarray(x.data.sum(axis=axis), dtype=x.dtype), (x,), _backward, "sum")


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(sum(x), 1.0 / x.size)


# -- shape manipulation -------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from exc

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return Tensor._result(out, (x,), _backward, "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; with no ``axes`` the last two axes are swapped."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dims, got shape {x.shape}")
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return Tensor._result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), _backward, "transpose")


def take(x: Tensor, index: object) -> Tensor:
    """Basic or integer-array indexing (``x[index]``)."""
    out = np.array(x.data[index], dtype=x.dtype)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor._result(out, (x,), _backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: np.ndarray) -> List[np.ndarray]:
        return list(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(tensors), _backward, "concat")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` ([V, d]) for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range for table of shape {table.shape}")

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._result(table.data[ids], (table,), _backward, "embedding")


def select_positions(x: Tensor, positions: np.ndarray) -> Tensor:
    """Pick one sequence position per row: ``x`` [B, T, d], ``positions`` [B] -> [B, d]."""
    positions = np.asarray(positions, dtype=np.int64)
    if x.ndim != 3 or positions.shape != (x.shape[0],):
        raise ShapeError(f"select_positions: expected [B, T, d] and [B], got {x.shape} and {positions.shape}")
    if positions.size and (positions.min() < 0 or positions.max() >= x.shape[1]):
        raise ShapeError(f"select_positions: position out of range for sequence length {x.shape[1]}")
    rows = np.arange(x.shape[0])

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        gx = np.zeros_like(x.data)
        gx[rows, positions] = g
        return (gx,)

    return Tensor._result(x.data[rows, positions].copy(), (x,), _backward, "select_positions")


# -- linear algebra -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is either a shared ``[k, n]`` matrix or a
    ``[..., k, n]`` batch with the same leading dimensions as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), _backward, "matmul")


# -- normalisation and probabilities ----------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis`` with max-subtraction.

    ``mask`` (broadcastable boolean, True = keep) removes entries; masked
    outputs are exactly zero.
    """
    if x.size == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax of an empty tensor (shape {x.shape})")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y.astype(x.dtype, copy=False), (x,), _backward, "softmax")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalisation over the last axis, scaled by ``weight``."""
    if weight.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: weight shape {weight.shape} does not match input shape {x.shape}")
    rms = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data / rms

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        gw = (g * normed).reshape(-1, x.shape[-1]).sum(axis=0)
        gn = g * weight.data
        gx = (gn - normed * (gn * normed).mean(axis=-1, keepdims=True)) / rms
        return gx, gw

    return Tensor._result(normed * weight.data, (x, weight), _backward, "rms_norm")


def mse_loss(pred: Tensor, target: ArrayLike) -> Tensor:
    """Mean squared error ``(1/n) * sum((pred - target)**2)``."""
    target = as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction shape {pred.shape} differs from target shape {target.shape}")
    if pred.size == 0:
        raise ShapeError("mse_loss needs at least one element")
    n = pred.size
    diff = pred.data - target.data.astype(pred.dtype, copy=False)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        gp = g * (2.0 / n) * diff
        return gp, -gp

    loss = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    return Tensor._result(loss, (pred, target), _backward, "mse")


# -- graph traversal ------------------------------------------------------------------


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = {id(root)}
    stack: List[Tuple[Tensor, Iterator[Tensor]]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for parent in parents:
            if parent.requires_grad and id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into every leaf that requires a gradient.

    Each node is visited once; a node feeding several consumers receives the sum
    of their contributions. Calling this twice without :func:`zero_grads`
    accumulates both passes into the leaves.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


# -- gradient checking -----------------------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numerical_gradient(
    loss_fn: Callable[[], Tensor], tensor: Tensor, index: Tuple[int, ...], eps: float = 1e-5
) -> float:
    """Central finite difference of ``loss_fn()`` w.r.t. one entry of ``tensor``."""
    original = tensor.data[index].copy()
    try:
        tensor.data[index] = original + eps
        plus = loss_fn().item()
        tensor.data[index] = original - eps
        minus = loss_fn().item()
    finally:
        tensor.data[index] = original
    return (plus - minus) / (2.0 * eps)


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    *,
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare analytic and finite-difference gradients; return the worst relative error.

    ``loss_fn`` must rebuild the graph on every call. With ``max_entries`` only a
    seeded random subset of each parameter's entries is checked.
    """
    zero_grads(params)
    backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for param, grad in zip(params, analytic):
        flat = np.arange(param.size)
        if max_entries is not None and param.size > max_entries:
            flat = rng.choice(param.size, size=max_entries, replace=False)
        for pos in flat:
            index = np.unravel_index(int(pos), param.shape)
            numeric = numerical_gradient(loss_fn, param, index, eps)
            err = relative_error(float(grad[index]), numeric)
            if err > worst:
                worst = err
                _logger.debug(
                    "grad check %s%s: analytic=%g numeric=%g", param.name or "param", index, grad[index], numeric
                )
    return worst
