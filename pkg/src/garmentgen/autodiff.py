"""Dense tensors with reverse-mode automatic differentiation.

Storage is a contiguous numpy array; the graph is an explicit Tape that
records one node per primitive operation, in execution order.  Running an
op with no active tape (or with inputs that don't require grad) is pure
inference: no node is recorded and no grad buffer is ever allocated.

Training runs in float32; gradient checking flips the module-wide default
to float64 via `precision("float64")` so central differences are trusted.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32

_state = threading.local()


def default_dtype():
    return _default_dtype


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


@contextmanager
def precision(name: str):
    """Temporarily switch the default dtype ("float32" / "float64")."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """A leaf or op output.  `data` is read-only by convention everywhere
    except the optimizer, which updates leaf parameters in place."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad}{tag})"

    # Operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op: str, out: Tensor, inputs: tuple, backward: Callable):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops.  Use as a context manager; nesting
    is allowed and the innermost tape records."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and walk the recorded nodes in reverse,
        accumulating into `.grad` of every requires-grad tensor reached."""
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericError("backward called on a non-finite loss")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _finish(op: str, out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, out, inputs, backward))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ----------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data + b.data, dtype=a.data.dtype)
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _finish("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data - b.data, dtype=a.data.dtype)
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _finish("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data * b.data, dtype=a.data.dtype)
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _finish("mul", out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, dtype=a.data.dtype)

    def backward(g):
        _accum(a, g * s)

    return _finish("scale", out, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi), dtype=a.data.dtype)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accum(a, g * inside)

    return _finish("clip", out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data), dtype=a.data.dtype)
    except ValueError:
        raise DimensionError(f"matmul: batch extents do not broadcast, {a.shape} @ {b.shape}")

    def backward(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _finish("matmul", out, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} is not a permutation of 0..{a.ndim - 1}")
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)), dtype=a.data.dtype)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _finish("transpose", out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = Tensor(a.data.reshape(shape), dtype=a.data.dtype)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _finish("reshape", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                     dtype=tensors[0].data.dtype)
    except ValueError:
        raise DimensionError(
            f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _finish("concat", out, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= axis < a.ndim):
        raise DimensionError(f"narrow: axis {axis} out of range for shape {a.shape}")
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}:{start + length}] out of bounds for extent {a.shape[axis]}")
    idx = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(a.ndim))
    out = Tensor(a.data[idx], dtype=a.data.dtype)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _finish("narrow", out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data), dtype=a.data.dtype)

    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return _finish("sum_all", out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def softmax_lastdim(x: Tensor) -> Tensor:
    # One cheap reduction instead of a full isfinite map: any NaN or Inf
    # (or mixed infinities) poisons a float64 sum.
    if not np.isfinite(np.sum(x.data, dtype=np.float64)):
        raise NumericError("softmax input contains NaN/Inf")
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    out = Tensor(y, dtype=x.data.dtype)

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _finish("softmax", out, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s, dtype=x.data.dtype)

    def backward(g):
        _accum(x, g * (s * (1.0 + x.data * (1.0 - s))))

    return _finish("silu", out, (x,), backward)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize over (channels-in-group, spatial) per sample; no affine.

    Accepts [C,H,W] or [N,C,H,W]; channel axis is the one before the two
    spatial axes.
    """
    if x.ndim not in (3, 4):
        raise DimensionError(f"group_norm expects [C,H,W] or [N,C,H,W], got {x.shape}")
    c_axis = x.ndim - 3
    c = x.shape[c_axis]
    if groups <= 0 or c % groups != 0:
        raise DimensionError(f"group_norm: {groups} groups do not divide {c} channels")
    n = x.shape[0] if x.ndim == 4 else 1
    grouped = x.data.reshape(n, groups, -1)
    mu = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (grouped - mu) * inv_std
    out = Tensor(xhat.reshape(x.shape), dtype=x.data.dtype)

    def backward(g):
        gh = g.reshape(n, groups, -1)
        m1 = gh.mean(axis=2, keepdims=True)
        m2 = (gh * xhat).mean(axis=2, keepdims=True)
        _accum(x, (inv_std * (gh - m1 - xhat * m2)).reshape(x.shape).astype(x.data.dtype))

    return _finish("group_norm", out, (x,), backward)


def im2col(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Unfold [N,C,H,W] into [N*H'*W', C*k*k] patch rows (row-major over
    N, then output row, then output col)."""
    if x.ndim != 4:
        raise DimensionError(f"im2col expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"im2col: window {k} exceeds padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, C, H', W', k, k]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    out = Tensor(cols, dtype=x.data.dtype)

    def backward(g):
        g6 = g.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g6[..., i, j]
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        _accum(x, dxp)

    return _finish("im2col", out, (x,), backward)


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    return ((h + 2 * padding - k) // stride + 1,
            (w + 2 * padding - k) // stride + 1)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int | None = None,
           bias: Tensor | None = None) -> Tensor:
    """2-d cross-correlation, built from im2col + matmul so the backward
    pass falls out of the primitives.  kernel is [O, C, k, k] with k odd;
    default padding keeps the spatial size at stride 1."""
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d kernel must be [O,C,k,k], got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 != 1:
        raise DimensionError(f"conv2d kernel size must be odd, got {k}")
    if padding is None:
        padding = (k - 1) // 2
    unbatched = x.ndim == 3
    x4 = reshape(x, (1,) + x.shape) if unbatched else x
    if x4.ndim != 4 or x4.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    n, _, h, w = x4.shape
    o = kernel.shape[0]
    ho, wo = conv_output_hw(h, w, k, stride, padding)
    cols = im2col(x4, k, stride, padding)
    wmat = reshape(kernel, (o, kernel.shape[1] * k * k))
    y = matmul(cols, transpose(wmat))
    y = transpose(reshape(y, (n, ho, wo, o)), (0, 3, 1, 2))
    if bias is not None:
        if bias.shape != (o,):
            raise DimensionError(f"conv2d bias must be [{o}], got {bias.shape}")
        y = add(y, reshape(bias, (1, o, 1, 1)))
    return reshape(y, (o, ho, wo)) if unbatched else y


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsample of the two trailing spatial axes."""
    if x.ndim != 4:
        raise DimensionError(f"upsample2x expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), dtype=x.data.dtype)

    def backward(g):
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _finish("upsample2x", out, (x,), backward)


# ----------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5) -> float:
    """Compare tape gradients of the scalar `f()` against central
    differences for every element of every tensor in `params`.

    `f` must be deterministic and must read the parameter tensors by
    reference (the checker perturbs them in place).  Requires float64
    parameters — float32 central differences are meaningless at h=1e-5.
    Returns the maximum relative error |num - ana| / (max(|num|,|ana|) + 1e-8).
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ConfigError(f"grad_check needs float64 params, {name!r} is {p.data.dtype.name}")
        if not p.requires_grad:
            raise ConfigError(f"grad_check param {name!r} has requires_grad=False")

    zero_grads(params.values())
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise DimensionError(f"grad_check: f() must return a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: f() returned a non-finite loss")
    tape.backward(loss)
    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    zero_grads(params.values())

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = f().item()
            flat[i] = keep - h
            f_minus = f().item()
            flat[i] = keep
            num = (f_plus - f_minus) / (2.0 * h)
            if not np.isfinite(num):
                raise NumericError(f"grad_check: non-finite difference at {name}[{i}]")
            rel = abs(num - ana[i]) / (max(abs(num), abs(ana[i])) + 1e-8)
            worst = max(worst, rel)
    return worst
