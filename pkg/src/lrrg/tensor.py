"""Dense numpy tensors with define-by-run reverse-mode differentiation.

Every op in this module takes :class:`Tensor` arguments, computes its value
eagerly with numpy and, when any input requires a gradient, records a node
holding its parents and a closure mapping the output gradient to input
gradients. :func:`backward` topologically orders the recorded nodes reachable
from a scalar loss and replays them in reverse.

Layout conventions: image features are ``(N, C, H, W)``; sequences are
``(N, L, C)``.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "backward", "no_grad", "precision",
    "get_default_dtype", "set_default_dtype", "set_strict",
    "add", "sub", "mul", "neg", "scale", "masked_fill", "matmul", "linear",
    "conv2d", "conv1x1", "relu", "tanh", "sigmoid", "exp", "log", "softmax",
    "log_softmax", "instance_norm", "layer_norm", "sum", "mean",
    "global_avg_pool", "channel_mean", "concat", "reshape", "transpose",
    "broadcast_to", "cast", "take", "finite_difference_check", "save_raw", "load_raw",
]


class ShapeError(ValueError):
    """Operands of an op have non-conforming shapes."""


class NonFiniteError(FloatingPointError):
    """An op received NaN/inf input while strict mode is on."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.strict = False
        self.dtype = np.dtype(np.float32)


_state = _State()


def get_default_dtype() -> np.dtype:
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state.dtype = dtype


def set_strict(flag: bool) -> None:
    """Reject NaN/inf op inputs with :class:`NonFiniteError`."""
    _state.strict = bool(flag)


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default dtype (``"f32"`` or ``"f64"``)."""
    prev = _state.dtype
    set_default_dtype({"f32": np.float32, "f64": np.float64}[name])
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _state.dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: tuple[tuple[Tensor, ...], Callable] | None = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


# ---------------------------------------------------------------------------
# recording machinery
# ---------------------------------------------------------------------------

def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state.dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op: str, tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    if _state.strict:
        _check_finite(op, parents)
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        out._ctx = (parents, grad_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx[0]:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Calling this twice on the same graph adds the gradients twice.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parents, fn = node._ctx
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# element-wise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Element-wise (Hadamard) product with numpy broadcasting."""
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    f = a.data.dtype.type(factor)
    return _record("scale", a.data * f, (a,), lambda g: (g * f,))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value``; those entries get zero gradient."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(a.shape, mask.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: incompatible shapes {a.shape} and {mask.shape}") from None
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _record("masked_fill", out, (a,),
                   lambda g: (_unbroadcast(np.where(mask, 0, g), a.shape),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record("relu", np.maximum(a.data, 0), (a,), lambda g: (g * pos,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-sided form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("log_softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", y, (a,), grad_fn)


def _check_axis(op: str, a: Tensor, axis: int) -> None:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {a.shape}")


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product following numpy ``@`` broadcasting (rank >= 2)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-position map over the last axis: ``x @ weight.T + bias``.

    ``weight`` is ``(out, in)``. On a ``(N, L, C)`` layout this is exactly a
    1x1 convolution over the channel axis.
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd.T).reshape(*lead, wd.shape[0])
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} and weight shape {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("linear", out, parents, grad_fn)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution on ``(N, C, H, W)`` with ``weight`` of shape ``(out, in)``."""
    if x.ndim != 4 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1x1: incompatible shapes {x.shape} and {weight.shape}")
    xd, wd = x.data, weight.data
    n, c, h, w = xd.shape
    x3 = xd.reshape(n, c, h * w)
    out = (wd @ x3).reshape(n, wd.shape[0], h, w)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"conv1x1: bias shape {bias.shape} and weight shape {weight.shape}")
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)

    def grad_fn(g):
        g3 = g.reshape(n, -1, h * w)
        gx = (wd.T @ g3).reshape(xd.shape) if x.requires_grad else None
        gw = (g3 @ x3.transpose(0, 2, 1)).sum(axis=0) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return _record("conv1x1", out, parents, grad_fn)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``(N, C, H, W)`` with ``(O, C, k, k)`` kernels, zero padding."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, k, k) rows
    cols = np.ascontiguousarray(win[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} and weight shape {weight.shape}")
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)
    out = np.ascontiguousarray(out)
    xshape, pshape = x.shape, xp.shape

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + xshape[2], padding:padding + xshape[3]] if padding else gxp
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record("conv2d", out, parents, grad_fn)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def _normalize(op: str, a: Tensor, axes: tuple[int, ...], eps: float) -> Tensor:
    x = a.data
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(a.dtype)

    def grad_fn(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _record(op, xhat, (a,), grad_fn)


def instance_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
                  eps: float = 1e-5) -> Tensor:
    """Normalise each (instance, channel) over spatial positions, then optional affine."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: expected (N, C, H, W), got {x.shape}")
    y = _normalize("instance_norm", x, (2, 3), eps)
    if weight is not None:
        y = mul(y, reshape(weight, (1, -1, 1, 1)))
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1, 1)))
    return y


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    y = _normalize("layer_norm", x, (x.ndim - 1,), eps)
    if weight is not None:
        y = mul(y, weight)
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / count)


def global_avg_pool(x: Tensor) -> Tensor:
    """``(N, C, H, W) -> (N, C)``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (N, C, H, W), got {x.shape}")
    return mean(x, (2, 3))


def channel_mean(x: Tensor) -> Tensor:
    """``(N, C, H, W) -> (N, 1, H, W)``."""
    if x.ndim != 4:
        raise ShapeError(f"channel_mean: expected (N, C, H, W), got {x.shape}")
    return mean(x, 1, keepdims=True)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)) or len(axes) != a.ndim:
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def cast(a: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the source precision."""
    dtype = np.dtype(dtype)
    src = a.dtype
    return _record("cast", a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    return _record("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, src),))


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]):
        raise IndexError(f"take: index out of range for axis {ax} of shape {a.shape}")
    src = a.shape

    def grad_fn(g):
        out = np.zeros(src, dtype=g.dtype)
        flat_g = g.reshape(src[:ax] + (idx.size,) + src[ax + 1:])
        np.add.at(np.moveaxis(out, ax, 0), idx.reshape(-1), np.moveaxis(flat_g, ax, 0))
        return (out,)

    return _record("take", np.take(a.data, idx, axis=ax), (a,), grad_fn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |central|)``.

    ``f`` is a zero-argument closure that reads ``x`` (so parameters can be
    checked as well as inputs). ``x`` is perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    first, second = f(), f()
    if not np.array_equal(first.data, second.data):
        raise RuntimeError("finite_difference_check: f is not deterministic")
    was = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    backward(f())
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad
    x.requires_grad = was
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data.sum())
            flat[i] = orig - step
            lo = float(f().data.sum())
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * step)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# raw tensor files
# ---------------------------------------------------------------------------

_MAGIC = b"DDTR"
_RAW_VERSION = 1
_WIDTH_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_raw(path, array) -> None:
    """Write ``magic | version u16 | rank u16 | width u16 | extents u64[rank] | payload``.

    All integers are little-endian; ``width`` is the float width in bytes
    (4 or 8) and the payload is row-major little-endian floats.
    """
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    width = arr.dtype.itemsize
    header = _MAGIC + struct.pack("<HHH", _RAW_VERSION, arr.ndim, width)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=_WIDTH_CODES[width]).tobytes())


def load_raw(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a raw tensor file")
    version, rank, width = struct.unpack_from("<HHH", blob, 4)
    if version != _RAW_VERSION:
        raise ValueError(f"{path}: unsupported raw tensor version {version}")
    if width not in _WIDTH_CODES:
        raise ValueError(f"{path}: unsupported float width {width}")
    shape = struct.unpack_from(f"<{rank}Q", blob, 10)
    offset = 10 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(blob, dtype=_WIDTH_CODES[width], count=count, offset=offset)
    if offset + count * width != len(blob):
        raise ValueError(f"{path}: payload size does not match extents")
    return data.reshape(shape).astype(_WIDTH_CODES[width].newbyteorder("="))
