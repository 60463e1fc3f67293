"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op executed while gradients are enabled appends a record
to the calling thread's active :class:`Tape`. :func:`backward` replays that
tape in reverse exactly once. Only equal-shape and scalar-vs-tensor
elementwise arithmetic is supported; channel reshuffles (merging, grouping,
replication) go through :func:`gather_channels` instead of broadcasting.

Values are float32 by default. Ops preserve the dtype of their inputs, so
gradient checks can run the same code in float64.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels

DIV_GUARD = 1e-12

_local = threading.local()


class TapeError(RuntimeError):
    """Raised for misuse of the gradient tape (double backward, dead tape)."""


class Tape:
    """Ordered record of differentiable ops executed on one thread."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.records.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self.records)


def current_tape() -> Tape:
    """Return the thread's live tape, starting a fresh one after consumption."""
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    """Discard the thread's tape without running backward."""
    _local.tape = None


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _as_array(data, dtype) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """An n-dimensional float array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("neg", self), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _lift(other, self.dtype), self)

    def __neg__(self):
        return elementwise("neg", self)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and record it when any input needs a gradient."""
    t = Tensor._wrap(out)
    if is_grad_enabled() and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        tape = current_tape()
        tape.record(t, tuple(inputs), backward_fn)
        t._tape = tape
    return t


def _is_scalar_like(t: Tensor) -> bool:
    return t.data.size == 1


def _unexpand(g: np.ndarray, target: Tensor) -> np.ndarray:
    if g.shape == target.shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(target.shape)


# --------------------------------------------------------------------------- #
# Elementwise
# --------------------------------------------------------------------------- #
_UNARY = {"exp", "log", "neg", "pow2"}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply ``op`` componentwise.

    Binary ops need equal shapes, or one operand with a single element
    (Python scalars count). Division refuses denominators below ``1e-12``
    in magnitude; callers add their own epsilon.
    """
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} takes one operand")
        return _unary(op, a)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise ValueError(f"{op} takes two operands")
    a = _lift(a, b.dtype if isinstance(b, Tensor) else np.float32)
    b = _lift(b, a.dtype)
    if a.shape != b.shape and not (_is_scalar_like(a) or _is_scalar_like(b)):
        raise ValueError(f"shape mismatch in {op}: {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    if a.shape != b.shape:
        # one side is a single element; the result takes the other's shape
        big = a if (not _is_scalar_like(a) or a.ndim > b.ndim) else b
        x = x if a is big else x.reshape(())
        y = y if b is big else y.reshape(())

    if op == "add":
        out = x + y

        def bw(g):
            return _unexpand(g, a), _unexpand(g, b)
    elif op == "sub":
        out = x - y

        def bw(g):
            return _unexpand(g, a), _unexpand(-g, b)
    elif op == "mul":
        out = x * y

        def bw(g):
            return _unexpand(g * y, a), _unexpand(g * x, b)
    else:
        if np.any(np.abs(y) < DIV_GUARD):
            raise ValueError("division by a denominator smaller than 1e-12; add an epsilon")
        out = x / y

        def bw(g):
            return _unexpand(g / y, a), _unexpand(-g * x / (y * y), b)

    return _result(np.asarray(out), (a, b), bw)


def _unary(op: str, a) -> Tensor:
    a = _lift(a, np.float32)
    x = a.data
    if op == "exp":
        out = np.exp(x)

        def bw(g):
            return (g * out,)
    elif op == "log":
        if np.any(x <= 0):
            raise ValueError("log of a non-positive value; clamp the input first")
        out = np.log(x)

        def bw(g):
            return (g / x,)
    elif op == "neg":
        out = -x

        def bw(g):
            return (-g,)
    else:
        out = x * x

        def bw(g):
            return (2 * g * x,)
    return _result(np.asarray(out), (a,), bw)


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


def pow2(a):
    return elementwise("pow2", a)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """``max(a, lo)``; the gradient is zero where the floor is active."""
    x = a.data
    keep = x > lo
    out = np.where(keep, x, np.asarray(lo, dtype=x.dtype))

    def bw(g):
        return (g * keep,)

    return _result(out, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data
    pos = x > 0
    out = np.maximum(x, x * x.dtype.type(slope)) if 0 <= slope <= 1 else np.where(pos, x, x * x.dtype.type(slope))

    def bw(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return _result(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


# --------------------------------------------------------------------------- #
# Reductions
# --------------------------------------------------------------------------- #
def _norm_axis(axis, ndim):
    if axis is None or axis == "all":
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
    return tuple(sorted(ax % ndim for ax in axes))


def reduce(op: str, a: Tensor, axis=None) -> Tensor:
    """Reduce over ``axis`` (an int, a tuple, or ``None``/``"all"``).

    ``sum`` and ``mean`` accumulate in float64 and are differentiable;
    ``max_index`` returns an int64 tensor outside the tape.
    """
    axes = _norm_axis(axis, a.ndim)
    x = a.data
    if op == "max_index":
        if len(axes) != 1:
            raise ValueError("max_index needs exactly one axis")
        return Tensor(np.argmax(x, axis=axes[0]), dtype=np.int64)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    count = int(np.prod([x.shape[ax] for ax in axes])) if axes else 1
    acc = x.sum(axis=axes, dtype=np.float64)
    if op == "mean":
        acc = acc / max(count, 1)
    out = np.asarray(acc, dtype=x.dtype)
    scale = 1.0 / max(count, 1) if op == "mean" else 1.0
    keep_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def bw(g):
        g = np.asarray(g).reshape(keep_shape)
        if scale != 1.0:
            g = g * g.dtype.type(scale)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (a,), bw)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return reduce("sum", a, axis)


def mean(a: Tensor, axis=None) -> Tensor:
    return reduce("mean", a, axis)


def argmax(a: Tensor, axis: int) -> np.ndarray:
    return reduce("max_index", a, axis).data


# --------------------------------------------------------------------------- #
# Shape / channel ops
# --------------------------------------------------------------------------- #
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(src),)

    return _result(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrs = [t.data for t in tensors]
    out = np.concatenate(arrs, axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrs])

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(parts)

    return _result(out, tuple(tensors), bw)


def gather_channels(a: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Output channel ``j`` is the sum of input channels ``groups[j]``.

    Groups may overlap or repeat, so the same op covers merging classes,
    partitioning them, and replicating a single channel.
    """
    x = a.data
    C = x.shape[1]
    groups = [tuple(int(c) for c in g) for g in groups]
    for g in groups:
        if not g:
            raise ValueError("empty channel group")
        if any(c < 0 or c >= C for c in g):
            raise ValueError(f"channel group {g} out of range for {C} channels")
    out_shape = (x.shape[0], len(groups)) + x.shape[2:]
    out = np.empty(out_shape, dtype=x.dtype)
    for j, g in enumerate(groups):
        if len(g) == 1:
            out[:, j] = x[:, g[0]]
        else:
            out[:, j] = x[:, list(g)].sum(axis=1, dtype=np.float64)

    def bw(gout):
        gin = np.zeros_like(x)
        for j, g in enumerate(groups):
            for c in g:
                gin[:, c] += gout[:, j]
        return (gin,)

    return _result(out, (a,), bw)


def select_mask(a: Tensor, keep: np.ndarray | None = None) -> Tensor:
    """Gather kept voxels of a channel-first tensor into ``[C, K]``.

    ``a`` is ``[B, C, *spatial]`` and ``keep`` a boolean ``[B, *spatial]``
    array (``None`` keeps everything). Columns follow row-major voxel order,
    so dropped voxels take no part in any later reduction. An all-false mask
    yields a ``[C, 0]`` tensor.
    """
    x = a.data
    spatial = (x.shape[0],) + x.shape[2:]
    moved = np.moveaxis(x, 1, 0).reshape(x.shape[1], -1)
    if keep is None:
        out = np.ascontiguousarray(moved)
        flat = None
    else:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != spatial:
            raise ValueError(f"mask shape {keep.shape} does not match spatial shape {spatial}")
        flat = keep.reshape(-1)
        out = np.ascontiguousarray(moved[:, flat])
    C = x.shape[1]

    def bw(g):
        if flat is None:
            full = g
        else:
            full = np.zeros((C, flat.size), dtype=g.dtype)
            full[:, flat] = g
        full = full.reshape((C,) + spatial)
        return (np.ascontiguousarray(np.moveaxis(full, 0, 1)),)

    return _result(out, (a,), bw)


def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = a.data
    out = x.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _result(out, (a,), bw)


# --------------------------------------------------------------------------- #
# Network ops
# --------------------------------------------------------------------------- #
def _padding(padding, kh):
    if padding == "same":
        return kh // 2
    if padding == "valid":
        return 0
    return int(padding)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding="same", bias: Tensor | None = None) -> Tensor:
    """2D cross-correlation ``[B,Cin,H,W] * [Cout,Cin,kh,kw] -> [B,Cout,H',W']``.

    ``H' = (H + 2p - kh) // stride + 1`` with ``p = kh // 2`` for ``"same"``
    and 0 for ``"valid"``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    B, Cin, H, W = x.shape
    Cout, Ck, kh, kw = kernel.shape
    if Ck != Cin:
        raise ValueError(f"kernel expects {Ck} input channels, input has {Cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    pad = _padding(padding, kh)
    Ho = _kernels.output_extent(H, kh, stride, pad)
    Wo = _kernels.output_extent(W, kw, stride, pad)
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"non-positive conv output extent {Ho}x{Wo} for input {H}x{W}")
    dtype = np.result_type(x.dtype, kernel.dtype)
    xd = x.data.astype(dtype, copy=False)
    wmat = kernel.data.astype(dtype, copy=False).reshape(Cout, -1)
    cols = _kernels.im2col(xd, kh, kw, stride, pad)
    out = wmat @ cols
    if bias is not None:
        out += bias.data.astype(dtype, copy=False).reshape(Cout, 1)
    out = np.ascontiguousarray(out.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3))
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Cout, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape).astype(kernel.dtype, copy=False)
        gx = None
        if x.requires_grad:
            gx = _kernels.col2im(wmat.T @ g2, x.shape, kh, kw, stride, pad).astype(x.dtype, copy=False)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=1).astype(bias.dtype, copy=False)

    return _result(out, inputs, bw)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) plane to zero mean and unit variance."""
    d = x.data
    mu = d.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    var = d.var(axis=(2, 3), keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((d - mu) * inv).astype(d.dtype)

    def bw(g):
        gm = g.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True, dtype=np.float64)
        return (((g - gm - xhat * gxm) * inv).astype(d.dtype),)

    return _result(xhat, (x,), bw)


def norm_act(x: Tensor, slope: float = 0.01, eps: float = 1e-5) -> Tensor:
    """Fused ``leaky_relu(instance_norm(x))`` using the compiled kernel when available."""
    if x.ndim != 4:
        raise ValueError(f"norm_act expects [B, C, H, W], got {x.shape}")
    y, xhat, inv = _kernels.norm_act_forward(x.data, slope, eps)

    def bw(g):
        return (_kernels.norm_act_backward(g, xhat, inv, slope),)

    return _result(y, (x,), bw)


def softmax(a: Tensor, axis: int = 1, temperature: float = 1.0) -> Tensor:
    """``softmax(a / temperature)`` along ``axis``."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = a.data / a.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(e.dtype)
    inv_t = a.dtype.type(1.0 / temperature)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(y.dtype)
        return ((g - dot) * y * inv_t,)

    return _result(y, (a,), bw)


def detach(a: Tensor) -> Tensor:
    """Same values, cut from the tape; gradients never flow through it."""
    return Tensor._wrap(a.data)


# --------------------------------------------------------------------------- #
# Backward
# --------------------------------------------------------------------------- #
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the path.

    Leaf tensors accumulate into an existing ``grad``; intermediates are
    overwritten. The tape is consumed, so a second call raises
    :class:`TapeError`. A loss that does not depend on any trainable tensor
    is a no-op.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = loss._tape
    if tape is None:
        # a leaf: d(loss)/d(loss) = 1
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    if tape.consumed:
        raise TapeError("this tape was already consumed by a previous backward()")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, bw in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        in_grads = bw(g)
        for inp, ig in zip(inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if inp._tape is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.pop(key)
        leaf.grad = g.astype(leaf.dtype, copy=False) if leaf.grad is None else leaf.grad + g
    tape.records = []
    tape.consumed = True


# --------------------------------------------------------------------------- #
# Gradient check
# --------------------------------------------------------------------------- #
@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    h: float
    checked: int
    errors: list[float] = field(default_factory=list, repr=False)

    def __bool__(self):
        return self.passed


def grad_check(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-3,
    coords: int | None = None,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare autodiff gradients with central differences.

    ``f`` takes the point tensor(s) positionally and returns a scalar. The
    point is copied to float64 so the difference quotient resolves the
    tolerance. With ``coords`` set, only that many randomly chosen
    coordinates are differenced. Per coordinate the relative error is
    ``|a - n| / max(|a|, |n|)``; when both magnitudes fall under
    ``abs_floor`` the absolute difference is used instead.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"step h={h} outside [1e-5, 1e-2]")
    single = isinstance(point, Tensor)
    pts = [point] if single else list(point)
    xs = [Tensor(p.data, requires_grad=True, dtype=np.float64) for p in pts]

    reset_tape()
    y = f(*xs)
    if y.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    backward(y)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

    index = [(i, j) for i, x in enumerate(xs) for j in range(x.size)]
    if coords is not None and coords < len(index):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(index), size=coords, replace=False)
        index = [index[k] for k in sorted(pick)]

    errors = []
    with no_grad():
        for i, j in index:
            flat = xs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(*xs).data.reshape(-1)[0])
            flat[j] = orig - h
            fm = float(f(*xs).data.reshape(-1)[0])
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[i].reshape(-1)[j])
            scale = max(abs(ana), abs(num))
            errors.append(abs(ana - num) if scale < abs_floor else abs(ana - num) / scale)
    worst = max(errors) if errors else 0.0
    return GradCheckReport(max_rel_error=worst, passed=worst < tol, tol=tol, h=h, checked=len(errors), errors=errors)


def parameter(data, name: str | None = None, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)
