"""Dense tensors with reverse-mode automatic differentiation.

Every primitive computes its value with numpy and records a backward rule that
maps the output gradient to one gradient per operand. :func:`backward` walks
the graph in reverse topological order and accumulates into ``.grad`` of the
leaves that require gradients.

Broadcasting is deliberately narrow: operands must have equal shapes, one of
them must be a scalar, or one shape must be a trailing suffix of the other
(a leading batch).
"""

import logging
import struct
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .errors import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]
ArrayLike = Any


class Tensor:
    """An n-dimensional value with an optional gradient and graph link."""

    __slots__ = ("_backward", "_parents", "data", "grad", "op", "requires_grad")
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Any = None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self.op = ""

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'!r})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A trainable leaf with a model-unique identifier and an lr group."""

    __slots__ = ("group", "name")

    def __init__(self, data: ArrayLike, group: str, name: str = "", dtype: Any = None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.group = group
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group!r})"


class Module:
    """Container that discovers Parameters and sub-Modules among its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, list | tuple):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def as_tensor(value: ArrayLike, like: Tensor | None = None) -> Tensor:
    """Wrap a constant, matching the dtype of ``like`` when given."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype if like is not None else None)


def _lift(a: ArrayLike, b: ArrayLike) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    tb = as_tensor(b)
    return as_tensor(a, like=tb), tb


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, rule: Backward) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _is_scalar_shape(shape: tuple[int, ...]) -> bool:
    return shape in ((), (1,))


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    if a == b or _is_scalar_shape(a) or _is_scalar_shape(b):
        return
    for small, big in ((a, b), (b, a)):
        if len(small) < len(big) and big[len(big) - len(small) :] == small:
            return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if _is_scalar_shape(shape):
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)
    return grad.sum(axis=tuple(range(grad.ndim - len(shape))))


# -- elementwise arithmetic -------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _lift(a, b)
    _check_broadcast(ta.shape, tb.shape, "add")
    return _result(
        ta.data + tb.data,
        (ta, tb),
        "add",
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _lift(a, b)
    _check_broadcast(ta.shape, tb.shape, "sub")
    return _result(
        ta.data - tb.data,
        (ta, tb),
        "sub",
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _lift(a, b)
    _check_broadcast(ta.shape, tb.shape, "mul")
    return _result(
        ta.data * tb.data,
        (ta, tb),
        "mul",
        lambda g: (
            _unbroadcast(g * tb.data, ta.shape),
            _unbroadcast(g * ta.data, tb.shape),
        ),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _lift(a, b)
    _check_broadcast(ta.shape, tb.shape, "div")
    return _result(
        ta.data / tb.data,
        (ta, tb),
        "div",
        lambda g: (
            _unbroadcast(g / tb.data, ta.shape),
            _unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape),
        ),
    )


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), "neg", lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    value = np.exp(x.data)
    return _result(value, (x,), "exp", lambda g: (g * value,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def tensor_abs(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), "abs", lambda g: (g * np.sign(x.data),))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    ta, tb = _lift(a, b)
    _check_broadcast(ta.shape, tb.shape, "maximum")
    pick_a = ta.data >= tb.data
    return _result(
        np.maximum(ta.data, tb.data),
        (ta, tb),
        "maximum",
        lambda g: (
            _unbroadcast(g * pick_a, ta.shape),
            _unbroadcast(g * ~pick_a, tb.shape),
        ),
    )


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    ta, tb = _lift(a, b)
    _check_broadcast(ta.shape, tb.shape, "minimum")
    pick_a = ta.data <= tb.data
    return _result(
        np.minimum(ta.data, tb.data),
        (ta, tb),
        "minimum",
        lambda g: (
            _unbroadcast(g * pick_a, ta.shape),
            _unbroadcast(g * ~pick_a, tb.shape),
        ),
    )


def clip(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)
    return _result(np.clip(x.data, low, high), (x,), "clip", lambda g: (g * inside,))


# -- activations --------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    return _result(np.maximum(x.data, 0), (x,), "relu", lambda g: (g * (x.data > 0),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
    return _result(
        (x.data * cdf).astype(x.dtype),
        (x,),
        "gelu",
        lambda g: (g * (cdf + x.data * pdf),),
    )


def sigmoid(x: Tensor) -> Tensor:
    value = expit(x.data)
    return _result(value, (x,), "sigmoid", lambda g: (g * value * (1 - value),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    value = shifted / shifted.sum(axis=axis, keepdims=True)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (value * (g - (g * value).sum(axis=axis, keepdims=True)),)

    return _result(value, (x,), "softmax", rule)


def layernorm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis`` (no affine)."""
    n = x.shape[axis]
    if n == 0:
        raise ShapeError(f"layernorm over empty axis {axis} of shape {x.shape}")
    centered = x.data - x.data.mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=axis, keepdims=True) + eps)
    xhat = centered * inv

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        sum_g = g.sum(axis=axis, keepdims=True)
        sum_gx = (g * xhat).sum(axis=axis, keepdims=True)
        return ((inv / n) * (n * g - sum_g - xhat * sum_gx),)

    return _result(xhat, (x,), "layernorm", rule)


# -- shape manipulation -------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        value = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from e
    return _result(value, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes) or tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        value,
        tuple(tensors),
        "concat",
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def getitem(x: Tensor, index: Any) -> Tensor:
    """Basic or advanced indexing (a slice in the primitive list)."""

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), "slice", rule)


def embedding_lookup(table: Tensor, indices: ArrayLike) -> Tensor:
    """Gather rows of ``table``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), "embedding_lookup", rule)


def _expand_reduced(
    g: np.ndarray, shape: tuple[int, ...], axis: int | tuple[int, ...] | None, keepdims: bool
) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape)


def tensor_sum(
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    value = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)
    return _result(
        value,
        (x,),
        "sum",
        lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),),
    )


def mean(
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    value = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)
    count = x.data.size // max(1, value.size)
    return _result(
        value,
        (x,),
        "mean",
        lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,),
    )


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial voxel of a (B, C, D, H, W) map ``factor`` times per axis."""
    if x.ndim != 5:
        raise ShapeError(f"upsample_nearest expects rank 5, got {x.shape}")
    value = x.data
    for axis in (2, 3, 4):
        value = np.repeat(value, factor, axis=axis)
    b, c, d, h, w = x.shape

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        blocks = g.reshape(b, c, d, factor, h, factor, w, factor)
        return (blocks.sum(axis=(3, 5, 7)),)

    return _result(value, (x,), "upsample_nearest", rule)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ in {a.shape} and {b.shape}")

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), "matmul", rule)


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    method: str = "direct",
) -> Tensor:
    """3D cross-correlation of (B, Ci, D, H, W) with (Co, Ci, kd, kh, kw).

    ``method="direct"`` accumulates one kernel tap at a time; ``"im2col"``
    contracts a sliding-window view in a single einsum. Both share the same
    backward rule and agree within float rounding.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects rank-5 input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input channels {x.shape} do not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3d: bias {bias.shape} does not match weight {weight.shape}")
    s, p = stride, padding
    kernel = weight.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    out_dims = tuple((n + 2 * p - k) // s + 1 for n, k in zip(x.shape[2:], kernel, strict=True))
    if min(out_dims) <= 0:
        raise ShapeError(f"conv3d: kernel {kernel} larger than padded input {xp.shape}")

    def window(tap: tuple[int, int, int]) -> tuple[slice, ...]:
        return (slice(None), slice(None)) + tuple(
            slice(t, t + s * (n - 1) + 1, s) for t, n in zip(tap, out_dims, strict=True)
        )

    taps = list(np.ndindex(*kernel))
    if method == "direct":
        out = np.zeros((x.shape[0], weight.shape[0], *out_dims), dtype=x.dtype)
        for tap in taps:
            out += np.einsum(
                "bcdhw,oc->bodhw", xp[window(tap)], weight.data[(slice(None), slice(None), *tap)],
                optimize=True,
            )
    elif method == "im2col":
        cols = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
        out = np.einsum("bcdhwxyz,ocxyz->bodhw", cols, weight.data, optimize=True)
    else:
        raise ValueError(f"unknown conv3d method {method!r}")
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]

    def rule(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for tap in taps:
            idx = window(tap)
            w_tap = (slice(None), slice(None), *tap)
            gw[w_tap] = np.einsum("bodhw,bcdhw->oc", g, xp[idx], optimize=True)
            gxp[idx] += np.einsum("bodhw,oc->bcdhw", g, weight.data[w_tap], optimize=True)
        gx = gxp[:, :, p : p + x.shape[2], p : p + x.shape[3], p : p + x.shape[4]]
        grads: list[np.ndarray | None] = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out.astype(x.dtype, copy=False), parents, "conv3d", rule)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V over the last two axes, batched over the rest."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: incompatible Q {q.shape}, K {k.shape}, V {v.shape}")
    if k.shape[-2] == 0:
        raise ShapeError("attention over an empty key sequence")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
    weights /= weights.sum(axis=-1, keepdims=True)

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gv = np.swapaxes(weights, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = weights * (gp - (gp * weights).sum(axis=-1, keepdims=True))
        gq = (gs @ k.data) * scale
        gk = (np.swapaxes(gs, -1, -2) @ q.data) * scale
        return gq, gk, gv

    return _result((weights @ v.data).astype(q.dtype, copy=False), (q, k, v), "attention", rule)


# -- reverse pass -------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend((parent, False) for parent in node._parents if id(parent) not in visited)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Raises:
        ShapeError: ``loss`` is not a scalar
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g), strict=True):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# -- gradient checking --------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""

    max_error: float
    worst_input: int
    worst_index: tuple[int, ...]
    checked: int
    skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
    tolerance: float = 1e-4,
    kink_guard: float | None = None,
    exclude: Sequence[np.ndarray | None] | None = None,
) -> GradCheckReport:
    """Compare backward() against central differences on 64-bit inputs.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Coordinates whose input magnitude is at most ``kink_guard`` and those
    flagged in ``exclude`` are skipped.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True, dtype=np.float64) for x in arrays]
    backward(f(*leaves))
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    def evaluate(which: int, index: tuple[int, ...], delta: float) -> float:
        shifted = [x.copy() for x in arrays]
        shifted[which][index] += delta
        return f(*(Tensor(x, dtype=np.float64) for x in shifted)).item()

    worst = (0.0, -1, ())
    checked = skipped = 0
    for which, x in enumerate(arrays):
        mask = exclude[which] if exclude is not None else None
        for index in np.ndindex(*x.shape):
            if (kink_guard is not None and abs(x[index]) <= kink_guard) or (
                mask is not None and mask[index]
            ):
                skipped += 1
                continue
            numeric = (evaluate(which, index, eps) - evaluate(which, index, -eps)) / (2 * eps)
            a = float(analytic[which][index])
            error = abs(a - numeric) / max(1.0, abs(a))
            checked += 1
            if error > worst[0]:
                worst = (error, which, index)
    logger.debug("grad_check: max error %.3e over %d coordinates", worst[0], checked)
    return GradCheckReport(worst[0], worst[1], worst[2], checked, skipped, tolerance)


# -- parameter store ----------------------------------------------------------

STORE_MAGIC = b"NRTR"
STORE_VERSION = 1
DIGEST_SIZE = 32
_HEADER = struct.Struct("<4sB32sI")


def write_parameter_store(
    path: Path, arrays: dict[str, np.ndarray], digest: bytes = bytes(DIGEST_SIZE)
) -> int:
    """Write (identifier, shape, float32 LE values) records; returns bytes written."""
    if len(digest) != DIGEST_SIZE:
        raise ValueError(f"digest must be {DIGEST_SIZE} bytes")
    chunks = [_HEADER.pack(STORE_MAGIC, STORE_VERSION, digest, len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        values = np.ascontiguousarray(array, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{values.ndim}I", values.ndim, *values.shape))
        chunks.append(values.tobytes())
    payload = b"".join(chunks)
    Path(path).write_bytes(payload)
    return len(payload)


def read_parameter_store(path: Path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Read a parameter store; returns (config digest, name -> float32 array).

    Raises:
        CheckpointError: Bad magic, unknown version or truncated content
    """
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read parameter store {path}: {e}") from e
    try:
        magic, version, digest, count = _HEADER.unpack_from(payload, 0)
        if magic != STORE_MAGIC:
            raise CheckpointError(f"{path} is not a parameter store")
        if version != STORE_VERSION:
            raise CheckpointError(f"{path} has unsupported version {version}")
        offset = _HEADER.size
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            try:
                name = payload[offset : offset + name_len].decode("utf-8")
            except UnicodeDecodeError as e:
                raise CheckpointError(f"{path} has a corrupt record name at byte {offset}") from e
            offset += name_len
            (ndim,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if offset + size > len(payload):
                raise CheckpointError(f"{path} is truncated in record {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=offset).reshape(shape).astype(np.float32)
            offset += size
    except struct.error as e:
        raise CheckpointError(f"{path} is truncated: {e}") from e
    return digest, arrays
