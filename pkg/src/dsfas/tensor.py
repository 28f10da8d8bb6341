"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` is an immutable wrapper around a read-only ``numpy``
array.  Operations on tensors that require gradients are recorded on the
innermost active :class:`Tape`; ``tape.backward(loss)`` (or the module
level :func:`backward`) then walks the record in reverse and returns the
gradient of ``loss`` with respect to every leaf tensor that took part.

Images use the NCHW layout throughout.  Binary operations accept either
equal shapes or a scalar on one side; nothing else broadcasts.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "backward",
    "elementwise",
    "reduce",
    "add",
    "sub",
    "mul",
    "neg",
    "absolute",
    "square",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "log",
    "clip",
    "sum",
    "mean",
    "l1_norm",
    "sq_l2_norm",
    "reshape",
    "concat",
    "take",
    "conv2d",
    "conv2d_transpose",
    "linear",
    "instance_norm",
    "conv_output_size",
    "conv_transpose_output_size",
]

DEFAULT_LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinite values."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (no tape, consumed tape, non-scalar loss)."""


class Tensor:
    """Immutable dense n-dimensional array of float64 values."""

    __slots__ = ("_data", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # trusted internal constructor: arr is fresh, float64, already checked
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t._data = arr
        t.requires_grad = requires_grad
        t._tape = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return np.array(self._data)

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, excluded from gradient recording."""
        return Tensor._wrap(self._data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self._data)

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
        if isinstance(other, Tensor):
            if other.size != 1:
                raise ShapeError("division is only defined by a scalar")
            other = other.item()
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the differentiable operations of one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` once::

        with Tape() as tape:
            loss = mean(square(linear(x, w, b)))
        grads = tape.backward(loss)   # {w: dL/dw, b: dL/db}
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape has already been consumed by backward()")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, parents: tuple, grad_fn: Callable) -> None:
        out._tape = self
        self._nodes.append((out, parents, grad_fn))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. every grad-enabled leaf.

        The tape is consumed; calling backward twice raises :class:`TapeError`.
        """
        if self._consumed:
            raise TapeError("tape has already been consumed by backward()")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced under this tape")

        produced = {id(out) for out, _, _ in self._nodes}
        leaves: dict[int, Tensor] = {}
        for _, parents, _ in self._nodes:
            for p in parents:
                if p.requires_grad and id(p) not in produced:
                    leaves[id(p)] = p

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for out, parents, grad_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, grad_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        result = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            result[leaf] = np.zeros(leaf.shape) if g is None else g.reshape(leaf.shape)
        self._nodes = []
        self._consumed = True
        return result


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse mode on the tape that produced ``loss``."""
    if loss._tape is None:
        raise TapeError("loss was not produced under an active tape")
    return loss._tape.backward(loss)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")


def _make(arr: np.ndarray, parents: tuple, grad_fn: Callable, name: str) -> Tensor:
    _check_finite(arr, name)
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(np.ascontiguousarray(arr, dtype=np.float64), needs)
    if needs:
        tape._record(out, parents, grad_fn)
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


_UNARY = {
    "neg": neg,
    "abs": absolute,
    "square": square,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b=None, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if b is not None:
        raise ValueError(f"{op_kind} is unary")
    if op_kind == "leaky_relu":
        return leaky_relu(_as_tensor(a), slope)
    if op_kind not in _UNARY:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return _UNARY[op_kind](_as_tensor(a))


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def _expand(g: np.ndarray, shape: tuple, axes: tuple) -> np.ndarray:
    kept = [1 if i in axes else n for i, n in enumerate(shape)]
    return np.broadcast_to(g.reshape(kept), shape)


def sum(a: Tensor, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axes(axes, a.ndim)
    return _make(
        np.sum(a.data, axis=axes),
        (a,),
        lambda g: (np.array(_expand(g, a.shape, axes)),),
        "sum",
    )


def mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return _make(
        np.mean(a.data, axis=axes) if axes else a.data.copy(),
        (a,),
        lambda g: (_expand(g, a.shape, axes) / count,),
        "mean",
    )


def l1_norm(a: Tensor, axes=None) -> Tensor:
    return sum(absolute(a), axes)


def sq_l2_norm(a: Tensor, axes=None) -> Tensor:
    return sum(square(a), axes)


_REDUCE = {"sum": sum, "mean": mean, "l1_norm": l1_norm, "sq_l2_norm": sq_l2_norm}


def reduce(op_kind: str, a: Tensor, axes=None) -> Tensor:
    if op_kind not in _REDUCE:
        raise ValueError(f"unknown reduction {op_kind!r}")
    return _REDUCE[op_kind](a, axes)


# ---------------------------------------------------------------------------
# structural


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        arr = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(arr.copy(), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of nothing")
    ndim = ts[0].ndim
    axis = _norm_axes(axis, ndim)[0]
    for t in ts[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, grad_fn, "concat")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis``; repeated indices are allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = _norm_axes(axis, a.ndim)[0]
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ShapeError(f"index out of range for axis of length {a.shape[axis]}")

    def grad_fn(g):
        out = np.zeros(a.shape)
        np.add.at(out, (slice(None),) * axis + (idx,), g)
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), grad_fn, "take")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_size(
    size: int, k: int, stride: int, padding: int, output_padding: int = 0
) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, ho, wo, kh, kw) strided view over a padded input
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_np(x: np.ndarray, k: np.ndarray, stride: int, padding: int) -> np.ndarray:
    kh, kw = k.shape[2:]
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    v = _windows(_pad(x, padding), kh, kw, stride, ho, wo)
    out = np.tensordot(v, k, axes=([1, 4, 5], [1, 2, 3]))  # N, ho, wo, K
    return out.transpose(0, 3, 1, 2)


def _conv_kernel_grad(
    x: np.ndarray, dy: np.ndarray, kh: int, kw: int, stride: int, padding: int
) -> np.ndarray:
    # d<conv(x,k), dy>/dk, shape (K, C, kh, kw)
    ho, wo = dy.shape[2:]
    v = _windows(_pad(x, padding), kh, kw, stride, ho, wo)
    return np.tensordot(dy, v, axes=([0, 2, 3], [0, 2, 3]))


def _conv_t_np(
    y: np.ndarray, k: np.ndarray, stride: int, padding: int, out_h: int, out_w: int
) -> np.ndarray:
    n, _, hy, wy = y.shape
    c, kh, kw = k.shape[1:]
    cols = np.tensordot(y, k, axes=([1], [0]))  # N, hy, wy, C, kh, kw
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    hp = max(out_h + 2 * padding, (hy - 1) * stride + kh)
    wp = max(out_w + 2 * padding, (wy - 1) * stride + kw)
    full = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + stride * (hy - 1) + 1 : stride, j : j + stride * (wy - 1) + 1 : stride] += cols[:, :, i, j]
    return full[:, :, padding : padding + out_h, padding : padding + out_w]


def _check_conv_args(x: Tensor, k: Tensor, stride: int, padding: int, in_axis: int) -> None:
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"expected 4-d input and kernel, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[in_axis]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[in_axis]}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")


def _bias_term(bias: Tensor | None, channels: int) -> tuple:
    if bias is None:
        return ()
    if bias.shape != (channels,):
        raise ShapeError(f"bias shape {bias.shape} does not match {channels} channels")
    return (bias,)


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``kernel[K,C,kh,kw]``."""
    _check_conv_args(x, kernel, stride, padding, 1)
    kh, kw = kernel.shape[2:]
    h, w = x.shape[2:]
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    out = _conv_np(x.data, kernel.data, stride, padding)
    extra = _bias_term(bias, kernel.shape[0])
    if extra:
        out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gx = _conv_t_np(g, kernel.data, stride, padding, h, w) if x.requires_grad else None
        gk = _conv_kernel_grad(x.data, g, kh, kw, stride, padding) if kernel.requires_grad else None
        if extra:
            return gx, gk, g.sum(axis=(0, 2, 3))
        return gx, gk

    return _make(out, (x, kernel) + extra, grad_fn, "conv2d")


def conv2d_transpose(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input; ``kernel[K,C,kh,kw]`` maps K -> C."""
    _check_conv_args(x, kernel, stride, padding, 0)
    if not 0 <= output_padding < stride:
        raise ShapeError("output_padding must lie in [0, stride)")
    kh, kw = kernel.shape[2:]
    out_h = conv_transpose_output_size(x.shape[2], kh, stride, padding, output_padding)
    out_w = conv_transpose_output_size(x.shape[3], kw, stride, padding, output_padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError("transpose convolution output would be empty")
    out = _conv_t_np(x.data, kernel.data, stride, padding, out_h, out_w)
    extra = _bias_term(bias, kernel.shape[1])
    if extra:
        out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gx = _conv_np(g, kernel.data, stride, padding) if x.requires_grad else None
        gk = _conv_kernel_grad(g, x.data, kh, kw, stride, padding) if kernel.requires_grad else None
        if extra:
            return gx, gk, g.sum(axis=(0, 2, 3))
        return gx, gk

    return _make(out, (x, kernel) + extra, grad_fn, "conv2d_transpose")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x[N,F]``, ``weight[F,G]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot map {x.shape} with weight {weight.shape}")
    out = x.data @ weight.data
    extra = _bias_term(bias, weight.shape[1])
    if extra:
        out = out + bias.data

    def grad_fn(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        return grads + (g.sum(axis=0),) if extra else grads

    return _make(out, (x, weight) + extra, grad_fn, "linear")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean, unit variance."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects NCHW, got {x.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=(2, 3), keepdims=True) + eps)
    xhat = centered * inv_std

    def grad_fn(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv_std * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), grad_fn, "instance_norm")
