"""Dense tensors with a reverse-mode tape.

A :class:`Tensor` wraps a numpy array. Every differentiable primitive in this
module returns a new tensor that remembers its parents and a closure mapping
the upstream gradient onto gradients for those parents. ``loss.backward()``
walks that record once in reverse topological order.

Tensors are values: no primitive writes into an input's buffer, and the
optimizer swaps in fresh arrays rather than updating in place.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, DegenerateVarianceError, GradientError, ShapeError

_DTYPES = {"single": np.float32, "double": np.float64}


class _State:
    dtype: type = np.float32
    grad_enabled: bool = True
    # When not None, non-smooth primitives append the sign pattern of their
    # argument here. grad_check uses it to detect kink crossings.
    kinks: list | None = None


_STATE = _State()


def get_dtype() -> type:
    return _STATE.dtype


def set_precision(mode: str) -> None:
    """Select ``"single"`` (default) or ``"double"`` for newly created tensors."""
    try:
        _STATE.dtype = _DTYPES[mode]
    except KeyError:
        raise ContractError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}") from None


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    previous = _STATE.dtype
    set_precision(mode)
    try:
        yield
    finally:
        _STATE.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    previous = _STATE.kinks
    _STATE.kinks = []
    try:
        yield _STATE.kinks
    finally:
        _STATE.kinks = previous


def _note_kink(arr: np.ndarray) -> None:
    if _STATE.kinks is not None:
        _STATE.kinks.append(arr > 0)


class Tensor:
    """An N-d real array, optionally tracked on the tape.

    Image tensors use (batch, channels, height, width) layout.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _STATE.dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{grad})"

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient.

        Raises :class:`GradientError` if this graph was already differentiated
        or if a reached leaf still holds a gradient from an earlier pass;
        gradients never silently accumulate across calls.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GradientError("backward() already ran on this graph")
        if not self.requires_grad:
            raise GradientError("loss does not depend on any tensor that requires a gradient")
        order = _toposort(self)
        for node in order:
            if node._backward is None and node.grad is not None:
                raise GradientError(
                    "a leaf already holds a gradient; call zero_grad() before another backward()"
                )
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        self._consumed = True

    # operator sugar; tensor/tensor arithmetic requires identical shapes
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_const(other, -1.0))
        return add_const(self, -np.asarray(other))

    def __rsub__(self, other):
        return add_const(mul_const(self, -1.0), other)

    def __neg__(self):
        return mul_const(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div_const(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._consumed = False
    track = _STATE.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (NCHW input, OIHW weight)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if C != Ci:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has {C} channels, weight {w.shape} expects {Ci}"
        )
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {x.shape} with pad={pad}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {O} output channels")
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    s = xp.strides
    # im2col with (C, kh, kw) rows and (B, Ho, Wo) columns keeps the gathered
    # inner axis contiguous in memory.
    windows = as_strided(
        xp,
        shape=(C, kh, kw, B, Ho, Wo),
        strides=(s[1], s[2], s[3], s[0], s[2] * stride, s[3] * stride),
        writeable=False,
    )
    cols = windows.reshape(C * kh * kw, B * Ho * Wo)
    wmat = w.data.reshape(O, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                # full correlation of the upstream gradient with the flipped kernel
                qh, qw = kh - 1 - pad, kw - 1 - pad
                if qh >= 0 and qw >= 0:
                    gp = np.pad(g, ((0, 0), (0, 0), (qh, qh), (qw, qw)))
                    gs = gp.strides
                    gcols = as_strided(
                        gp,
                        shape=(O, kh, kw, B, H, W),
                        strides=(gs[1], gs[2], gs[3], gs[0], gs[2], gs[3]),
                        writeable=False,
                    ).reshape(O * kh * kw, B * H * W)
                    wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
                    gx = np.ascontiguousarray((wflip @ gcols).reshape(C, B, H, W).transpose(1, 0, 2, 3))
                    return gx, gw, gb
            dcols = (wmat.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            dxp = np.zeros((C, B) + xp.shape[2:], dtype=xp.dtype)
            hi, wi = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + hi : stride, j : j + wi : stride] += dcols[:, i, j]
            if pad:
                dxp = dxp[:, :, pad : pad + H, pad : pad + W]
            gx = np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BNState:
    """Per-channel running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> BNState:
        dtype = dtype or _STATE.dtype
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> BNState:
        return BNState(self.mean.copy(), self.var.copy())


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics (biased variance) normalize ``x``
    and ``state`` is moved towards them by an exponential moving average;
    the running variance uses the unbiased estimate. Inference mode uses
    ``state`` as is.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects a 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d affine shapes {gamma.shape}/{beta.shape} do not match {C} channels")
    if not 0.0 < momentum < 1.0:
        raise ContractError(f"batchnorm2d momentum must lie in (0, 1), got {momentum}")
    g_ = gamma.data.reshape(1, C, 1, 1)
    b_ = beta.data.reshape(1, C, 1, 1)
    if train:
        n = B * H * W
        if n < 2:
            raise DegenerateVarianceError(
                f"batchnorm2d in train mode needs >= 2 values per channel, got batch*height*width = {n}"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean.reshape(1, C, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(1, C, 1, 1)
        state.mean = ((1.0 - momentum) * state.mean + momentum * mean).astype(state.mean.dtype)
        state.var = ((1.0 - momentum) * state.var + momentum * var * (n / (n - 1))).astype(state.var.dtype)
    else:
        n = None
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
    inv = inv.astype(x.dtype, copy=False)
    xhat = xhat.astype(x.dtype, copy=False)
    out = g_ * xhat + b_

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            if n is None:
                gx = dxhat * inv.reshape(1, C, 1, 1)
            else:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
                gx = (inv.reshape(1, C, 1, 1) / n) * (n * dxhat - s1 - xhat * s2)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    _note_kink(x.data)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """``x`` where ``x >= 0``, ``slope * x`` elsewhere. ``slope == 0`` is relu."""
    if slope < 0:
        raise ContractError(f"leaky_relu slope must be >= 0, got {slope}")
    if slope == 0:
        return relu(x)
    _note_kink(x.data)
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    """Hyperbolic tangent, kept strictly inside (-1, 1) even where it rounds to +-1."""
    edge = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    out = np.clip(np.tanh(x.data), -edge, edge)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def absolute(x: Tensor) -> Tensor:
    _note_kink(x.data)
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add needs identical shapes, got {x.shape} and {y.shape}")
    return _result(x.data + y.data, (x, y), lambda g: (g, g), "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"mul needs identical shapes, got {x.shape} and {y.shape}")
    xd, yd = x.data, y.data
    return _result(xd * yd, (x, y), lambda g: (g * yd, g * xd), "mul")


def _const(c, x: Tensor) -> np.ndarray:
    arr = np.asarray(c, dtype=x.dtype)
    if np.broadcast_shapes(arr.shape, x.shape) != x.shape:
        raise ShapeError(f"constant of shape {arr.shape} would broadcast tensor {x.shape}")
    return arr


def add_const(x: Tensor, c) -> Tensor:
    return _result(x.data + _const(c, x), (x,), lambda g: (g,), "add_const")


def mul_const(x: Tensor, c) -> Tensor:
    arr = _const(c, x)
    return _result(x.data * arr, (x,), lambda g: (g * arr,), "mul_const")


def div_const(x: Tensor, c) -> Tensor:
    arr = _const(c, x)
    return _result(x.data / arr, (x,), lambda g: (g / arr,), "div_const")


def where(mask: np.ndarray, x: Tensor) -> Tensor:
    """Keep ``x`` where ``mask`` is true and put an exact +0.0 elsewhere."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.data, x.dtype.type(0))
    return _result(out, (x,), lambda g: (np.where(mask, g, 0).astype(g.dtype, copy=False),), "where")


# ---------------------------------------------------------------------------
# resampling


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects a 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),), "upsample2x")


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 mean pooling, stride 2.

    Summed as ``((a + b) + (c + d)) / 4`` so that pooling a nearest-neighbour
    upsampled tensor recovers it bit for bit.
    """
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avg_pool2x needs a 4-d input with even spatial size, got {x.shape}")
    d = x.data
    out = ((d[:, :, 0::2, 0::2] + d[:, :, 0::2, 1::2]) + (d[:, :, 1::2, 0::2] + d[:, :, 1::2, 1::2])) / 4

    def backward(g):
        return (g.repeat(2, axis=2).repeat(2, axis=3) / 4,)

    return _result(out.astype(x.dtype, copy=False), (x,), backward, "avg_pool2x")


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def l1_sum(x: Tensor) -> Tensor:
    """Sum of absolute values, accumulated strictly left to right in row-major order."""
    _note_kink(x.data)
    a = np.abs(x.data).ravel()
    total = np.cumsum(a)[-1] if a.size else x.dtype.type(0)
    sign = np.sign(x.data)
    return _result(np.asarray(total, dtype=x.dtype), (x,), lambda g: (g * sign,), "l1_sum")


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, x.ndim)
    out = x.data.sum(axis=axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return div_const(tensor_sum(x, axes), count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _result(np.array(out, dtype=x.dtype), (x,), backward, "getitem")


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named learnable tensors, always iterated in lexicographic name order."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        self._params = dict(sorted(self._params.items()))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray | None:
        return self._params[name].grad

    def num_elements(self) -> int:
        return sum(t.size for t in self._params.values())

    def copy(self) -> ParamStore:
        return ParamStore({k: Tensor(v.data.copy(), dtype=v.dtype) for k, v in self._params.items()})

    def astype(self, dtype) -> ParamStore:
        return ParamStore({k: Tensor(v.data, dtype=dtype) for k, v in self._params.items()})

    def equal(self, other: ParamStore) -> bool:
        """Bitwise equality of names, shapes, dtypes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.values(), other.values())
        )


def check_finite(arrays: Sequence[np.ndarray]) -> bool:
    return all(np.isfinite(a).all() for a in arrays)
