"""Dense NCHW tensors with reverse-mode differentiation.

Every value is a 4-D array ``(n, c, h, w)``. Operations record their inputs
and a closure that maps the output gradient to input gradients; calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order.

The default dtype is float32. Tensors built from float64 arrays stay float64,
which is what the finite-difference tests rely on.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs",
    "square",
    "sigmoid",
    "silu",
    "relu",
    "conv2d",
    "reflect_pad",
    "reshape",
    "global_avg_pool",
    "global_max_pool",
    "channel_stats",
    "channel_sum",
    "channel_mean",
    "channel_max",
    "max_pool2",
    "bilinear_upsample2",
    "concat_channels",
    "interp_matrix",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A 4-D array that remembers how it was computed.

    Attributes
    ----------
    data : np.ndarray
        Contiguous ``(n, c, h, w)`` array.
    requires_grad : bool
        Whether gradients flow to (or through) this tensor.
    grad : np.ndarray or None
        Populated by :meth:`backward` for every reachable tensor that
        requires a gradient.
    op : str
        Tag of the primitive that produced the value (``"leaf"`` for inputs).
    parents : tuple of Tensor
        Inputs of that primitive.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: BackwardFn | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (n, c, h, w); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all dimensions must be >= 1; got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r}{flag})"

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

    def __abs__(self):
        return abs(self)

    def sum(self) -> "Tensor":
        return _reduce(self, (0, 1, 2, 3), mean=False)

    def mean(self) -> "Tensor":
        return _reduce(self, (0, 1, 2, 3), mean=True)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x`` as a constant tensor; Python scalars become ``(1, 1, 1, 1)``."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    return Tensor(arr)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=fn)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # scalars adopt the tensor operand's dtype so float64 graphs stay float64
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype)
    return as_tensor(a), as_tensor(b)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Gradients are recomputed from scratch on each call; they do not
    accumulate across calls.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node._backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, "mul", (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "div", (a, b), fn)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, "neg", (x,), lambda g: (-g,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the builtin on purpose
    sign = np.sign(x.data)
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, "square", (x,), lambda g: (2 * g * x.data,))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1 / (1 + z), z / (1 + z)).astype(v.dtype, copy=False)
    # saturated values are pulled back inside the open interval (0, 1)
    info = np.finfo(v.dtype)
    return np.clip(out, info.smallest_subnormal, 1 - info.epsneg)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def fn(g):
        return (g * (s + x.data * s * (1 - s)),)

    return _make(x.data * s, "silu", (x,), fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


# -- reductions ---------------------------------------------------------------


def _reduce(x: Tensor, axes: tuple[int, ...], mean: bool) -> Tensor:
    out = x.data.sum(axis=axes, keepdims=True)
    count = int(np.prod([x.shape[a] for a in axes]))
    if mean:
        out = out / x.dtype.type(count)
    if axes == (0, 1, 2, 3):
        out = out.reshape(1, 1, 1, 1)

    def fn(g):
        scale = g / x.dtype.type(count) if mean else g
        return (np.broadcast_to(scale, x.shape).copy(),)

    return _make(out, "mean" if mean else "sum", (x,), fn)


def _max_along(x: Tensor, flat: np.ndarray, axis: int, out_shape, op: str, expand) -> Tensor:
    # argmax returns the first maximum in scan order, which fixes tie routing
    idx = np.argmax(flat, axis=axis)
    out = np.take_along_axis(flat, np.expand_dims(idx, axis), axis=axis).reshape(out_shape)

    def fn(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, np.expand_dims(idx, axis), g.reshape(np.expand_dims(idx, axis).shape), axis=axis)
        return (expand(gf),)

    return _make(out, op, (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, ``(n, c, h, w) -> (n, c, 1, 1)``."""
    return _reduce(x, (2, 3), mean=True)


def global_max_pool(x: Tensor) -> Tensor:
    """Spatial max, ``(n, c, h, w) -> (n, c, 1, 1)``."""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    return _max_along(x, flat, 2, (n, c, 1, 1), "global_max_pool", lambda gf: gf.reshape(n, c, h, w))


def channel_sum(x: Tensor) -> Tensor:
    return _reduce(x, (1,), mean=False)


def channel_mean(x: Tensor) -> Tensor:
    return _reduce(x, (1,), mean=True)


def channel_max(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return _max_along(x, x.data, 1, (n, 1, h, w), "channel_max", lambda gf: gf)


def channel_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-pixel mean and max over channels, each ``(n, 1, h, w)``."""
    return channel_mean(x), channel_max(x)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial size, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)

    def expand(gf):
        return gf.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    return _max_along(x, win, 4, (n, c, h2, w2), "max_pool2", expand)


# -- structural ----------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, int, int, int]) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b``'s channels after ``a``'s."""
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    return _make(
        np.concatenate([a.data, b.data], axis=1), "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:])
    )


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def reflect_pad(x: Tensor, pad: int) -> Tensor:
    """Mirror-pad the spatial dims by ``pad`` without repeating the edge pixel."""
    if pad == 0:
        return x
    _, _, h, w = x.shape
    rows, cols = _reflect_index(h, pad), _reflect_index(w, pad)
    out = x.data[:, :, rows][:, :, :, cols]

    def fn(g):
        gr = np.zeros(g.shape[:2] + (h, g.shape[3]), dtype=g.dtype)
        for i, r in enumerate(rows):
            gr[:, :, r] += g[:, :, i]
        gx = np.zeros(g.shape[:2] + (h, w), dtype=g.dtype)
        for j, col in enumerate(cols):
            gx[:, :, :, col] += gr[:, :, :, j]
        return (gx,)

    return _make(out, "reflect_pad", (x,), fn)


def interp_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """Bilinear resampling weights, shape ``(n_out, n_in)``.

    Half-pixel (align-corners false) convention: output sample ``i`` reads
    source position ``(i + 0.5) * n_in / n_out - 0.5`` clamped to the image.
    """
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, h_out: int, w_out: int) -> Tensor:
    _, _, h, w = x.shape
    mh = interp_matrix(h, h_out, x.dtype)
    mw = interp_matrix(w, w_out, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return _make(out, "resize", (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


def bilinear_upsample2(x: Tensor) -> Tensor:
    """Double the spatial resolution with bilinear interpolation."""
    _, _, h, w = x.shape
    return resize_bilinear(x, 2 * h, 2 * w)


# -- convolution ---------------------------------------------------------------


def _correlate(x: np.ndarray, w: np.ndarray, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlate ``x`` with ``w``; also returns the ``(n, c*kh*kw, ho*wo)`` columns."""
    n, c, _, _ = x.shape
    o, _, kh, kw = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    if kh == 1 and kw == 1:
        cols = x.reshape(n, c, ho * wo)
    else:
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(n, o, ho, wo), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Stride-1 2-D cross-correlation with zero padding.

    ``weight`` is ``(out_c, in_c, kh, kw)`` with odd kernel sides; ``bias`` is
    ``(1, out_c, 1, 1)``. ``padding`` defaults to ``(k - 1) // 2`` which keeps
    the spatial size. With ``padding=0`` the output shrinks by ``k - 1``.
    """
    o, ci, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0 or kh != kw:
        raise ConfigError(f"kernels must be square with odd side, got {kh}x{kw}")
    if x.shape[1] != ci:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {ci}")
    if bias is not None and bias.shape != (1, o, 1, 1):
        raise ShapeError(f"bias must have shape (1, {o}, 1, 1), got {bias.shape}")
    pad = (kh - 1) // 2 if padding is None else padding
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError(f"input {x.shape} too small for a {kh}x{kw} kernel")
    out, cols = _correlate(x.data, weight.data, pad)
    if bias is not None:
        out += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        n, _, ho, wo = g.shape
        gx = gw = gb = None
        if weight.requires_grad:
            gmat = g.reshape(n, o, ho * wo)
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            flipped = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            back = kh - 1 - pad
            gx, _ = _correlate(g, flipped, max(back, 0))
            if back < 0:
                gx = np.ascontiguousarray(gx[:, :, -back : gx.shape[2] + back, -back : gx.shape[3] + back])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, "conv2d", parents, fn)
