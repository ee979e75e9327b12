"""Dense tensors with tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor`. When a :class:`Tape` is active and
any input requires a gradient, the op appends a record holding its inputs and
a closure computing input gradients from the output gradient. ``backward``
replays the records in reverse.

Float32 is the default precision; ``precision(np.float64)`` switches newly
created tensors to 64-bit for gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = [np.float32]
_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


def _check_finite(arr: np.ndarray, op: str) -> None:
    # sum is a cheap screen; confirm elementwise before raising
    if arr.size and not math.isfinite(float(arr.sum())):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (None if isinstance(data, np.ndarray) and data.dtype.kind == "f" else default_dtype()))
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    # -- conveniences -------------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, tape: "Tape | None" = None, leaves: Iterable["Tensor"] = ()):
        tape = tape if tape is not None else current_tape()
        if tape is None:
            raise RuntimeError("no tape recorded this tensor")
        return backward(self, tape, leaves)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable ops; single owner, not thread-safe."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def reset(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording (e.g. for evaluation forwards)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out)
    tape = current_tape()
    if tape is not None and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        tape.records.append(Record(op, inputs, t, grad_fn))
    return t


def backward(loss: Tensor, tape: Tape, leaves: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves listed in ``leaves`` that no path reaches get a zero gradient.
    The tape is reset afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.output) for r in tape.records}
    seen_leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for x, gx in zip(rec.inputs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            if gx.shape != x.shape:
                raise ShapeError(f"{rec.op}: gradient shape {gx.shape} != input shape {x.shape}")
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
            if key not in produced:
                seen_leaves[key] = x
    for key, leaf in seen_leaves.items():
        g = grads[key]
        leaf.grad = g.astype(leaf.dtype, copy=False) if leaf.grad is None else leaf.grad + g
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    tape.reset()
    return {k: grads[k] for k in seen_leaves}


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # only scalars and same-rank size-1 axes (per-channel affine, batch) broadcast
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim or any(x != y and x != 1 and y != 1 for x, y in zip(a.shape, b.shape)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (n, m) in enumerate(zip(shape, g.shape)) if n == 1 and m != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        c = float(b)
        return _emit("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(x: Tensor, key) -> Tensor:
    def grad_fn(g):
        out = np.zeros_like(x.data)
        out[key] = g
        return (out,)

    return _emit("getitem", np.array(x.data[key]), (x,), grad_fn)


def pad2d(x: Tensor, pads) -> Tensor:
    """Zero-pad the last two axes by ((top, bottom), (left, right))."""
    (t, b), (l, r) = pads
    if not (t or b or l or r):
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
    H, W = x.shape[-2:]
    return _emit("pad2d", np.pad(x.data, width), (x,),
                 lambda g: (np.ascontiguousarray(g[..., t:t + H, l:l + W]),))


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[..., index]`` along the last axis."""
    index = np.asarray(index)
    T = table.shape[-1]

    def grad_fn(g):
        lead = table.shape[:-1]
        g2 = g.reshape(int(np.prod(lead, dtype=int)), -1)
        flat = index.ravel()
        out = np.stack([np.bincount(flat, weights=row, minlength=T) for row in g2])
        return (out.reshape(table.shape).astype(table.dtype),)

    return _emit("take", table.data[..., index], (table,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes], dtype=int))
    return mul(tsum(x, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; ``b`` may be a plain 2-D weight."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} and {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul: only the right operand may be shared, got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, reshape(bias, (1,) * (y.ndim - 1) + (bias.size,)))
    return y


# ---------------------------------------------------------------------------
# convolution and pooling


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Padding giving ceil(size/stride) outputs, extra cell at the end."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _resolve_pad(pad, H, W, kh, kw, stride):
    if pad == "same":
        return same_padding(H, kh, stride), same_padding(W, kw, stride)
    if isinstance(pad, int):
        return (pad, pad), (pad, pad)
    (t, b), (l, r) = pad
    return (int(t), int(b)), (int(l), int(r))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad=0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding.

    ``pad`` is an int, ``((top, bottom), (left, right))`` or ``"same"``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if C % groups or O % groups:
        raise ConfigError(f"conv2d: channels {C}->{O} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d: weight {w.shape} expects {Cg * groups} input channels, got {C}")
    (pt, pb), (pl, pr) = _resolve_pad(pad, H, W, kh, kw, stride)
    Hn, Wn = H + pt + pb - kh, W + pl + pr - kw
    if Hn < 0 or Wn < 0 or Hn % stride or Wn % stride:
        raise ConfigError(
            f"conv2d: output extent not integral for input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {(pt, pb), (pl, pr)}")
    Ho, Wo = Hn // stride + 1, Wn // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    g_ = groups
    Og = O // g_
    depthwise = Cg == 1 and Og == 1

    def tap(arr, i, j):
        return arr[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]

    wd = w.data
    if depthwise:
        out = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
        buf = np.empty_like(out)
        for i in range(kh):
            for j in range(kw):
                np.multiply(tap(xp, i, j), wd[:, 0, i, j][None, :, None, None], out=buf)
                out += buf
    else:
        # im2col: (B, groups, Cg*kh*kw, Ho*Wo), channel-major then tap
        if kh == kw == 1 and stride == 1:
            cols = xp.reshape(B, g_, Cg, Ho * Wo)
        else:
            cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    cols[:, :, i, j] = tap(xp, i, j)
            cols = cols.reshape(B, g_, Cg * kh * kw, Ho * Wo)
        wg = wd.reshape(g_, Og, Cg * kh * kw)
        out = (wg @ cols).reshape(B, O, Ho, Wo)

    def grad_fn(g):
        gw = np.zeros_like(wd)
        if depthwise:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, tap(xp, i, j))
                    tap(gxp, i, j)[...] += g * wd[:, 0, i, j][None, :, None, None]
        else:
            gg = g.reshape(B, g_, Og, Ho * Wo)
            gw = (gg @ np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
            gcols = np.swapaxes(wg, -1, -2) @ gg
            if kh == kw == 1 and stride == 1:
                gxp = gcols.reshape(xp.shape)
            else:
                gxp = np.zeros_like(xp)
                gcols = gcols.reshape(B, C, kh, kw, Ho, Wo)
                for i in range(kh):
                    for j in range(kw):
                        tap(gxp, i, j)[...] += gcols[:, :, i, j]
        gx = gxp[:, :, pt:pt + H, pl:pl + W]
        return np.ascontiguousarray(gx), gw

    return _emit("conv2d", out, (x, w), grad_fn)


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 average pool; odd extents keep a partial last cell
    averaged over its valid elements only."""
    B, C, H, W = x.shape
    Ho, Wo = -(-H // 2), -(-W // 2)
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 2 * Ho - H), (0, 2 * Wo - W)))
    count = np.pad(np.ones((H, W), dtype=x.dtype), ((0, 2 * Ho - H), (0, 2 * Wo - W)))
    count = count.reshape(Ho, 2, Wo, 2).sum(axis=(1, 3))
    out = xp.reshape(B, C, Ho, 2, Wo, 2).sum(axis=(3, 5)) / count

    def grad_fn(g):
        gs = g / count
        full = np.repeat(np.repeat(gs, 2, axis=2), 2, axis=3)
        return (np.ascontiguousarray(full[:, :, :H, :W]),)

    return _emit("avg_pool2x2", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> "BatchNormState":
        dtype = dtype or default_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


BN_EPS = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel (axis 1) normalization. Train mode uses batch statistics and
    updates ``state`` in place; eval mode uses the running statistics."""
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    gm = gamma.data.reshape(bshape)
    if train:
        if x.shape[0] < 2:
            raise ValueError(f"batch_norm in train mode needs batch >= 2, got {x.shape[0]}")
        n = x.size // C
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu.reshape(C)
        state.running_var[...] = (1 - m) * state.running_var + m * var.reshape(C) * (n / max(n - 1, 1))
        out = xhat * gm + beta.data.reshape(bshape)

        def grad_fn(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gm
            dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            return dx, dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)
    else:
        inv = (1.0 / np.sqrt(state.running_var + BN_EPS)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - state.running_mean.astype(x.dtype).reshape(bshape)) * inv
        out = xhat * gm + beta.data.reshape(bshape)

        def grad_fn(g):
            return (g * gm * inv, (g * xhat).sum(axis=axes).astype(gamma.dtype),
                    g.sum(axis=axes).astype(beta.dtype))

    return _emit("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# activations and softmax

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    d = np.atleast_1d(x.data)  # in-place ufuncs need arrays, not 0-d scalars
    c1, c3 = d.dtype.type(_GELU_C), d.dtype.type(_GELU_C * 0.044715)
    d2 = d * d
    th = d2 * c3
    th += c1
    th *= d
    np.tanh(th, out=th)
    out = th + 1
    out *= d
    out *= 0.5

    def grad_fn(g):
        # 0.5(1 + th) + 0.5 d (1 - th^2)(c1 + 3 c3 d^2)
        s = th * th
        np.subtract(1, s, out=s)
        s *= d
        s *= d2 * (3 * c3) + c1
        s += th
        s += 1
        s *= 0.5
        s *= g.reshape(s.shape)
        return (s.reshape(x.shape),)

    return _emit("gelu", out.astype(x.dtype, copy=False).reshape(x.shape), (x,), grad_fn)


def sigmoid_np(d: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"gelu": gelu, "sigmoid": sigmoid, "relu": relu}[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for {x.ndim}-D input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), grad_fn)


# ---------------------------------------------------------------------------
# loss


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValueError("bce_with_logits: targets must lie in [0, 1]")
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def grad_fn(g):
        return ((g / n) * (sigmoid_np(z) - t).astype(z.dtype),)

    return _emit("bce_with_logits", np.asarray(loss.mean(), dtype=z.dtype), (logits,), grad_fn)


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                 coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. (a subset of) ``x``."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn().data)
            flat[i] = orig - eps
            fm = float(fn().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor turns the comparison absolute for gradients that are zero by
    construction (a bias feeding straight into a batch norm, or shifting a
    whole softmax row).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_coords: int | None = None, rng: np.random.Generator | None = None,
              zero_scale: float = 1e-3) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``inputs`` must be float64 leaves with ``requires_grad``. With
    ``max_coords`` only a random subset of each input's entries is checked.
    Gradients much smaller than the largest one in the check (below
    ``zero_scale`` times its norm) are compared in absolute terms against that
    floor, since central differences of an exactly-zero gradient return only
    rounding noise.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        x.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape, inputs)
    floor = max(1e-6, zero_scale * max((np.linalg.norm(x.grad) for x in inputs), default=0.0))
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        coords = None
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, max_coords, replace=False))
        num = numeric_grad(fn, x, eps, coords)
        ana = x.grad
        if coords is not None:
            num = num.reshape(-1)[coords]
            ana = ana.reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num, floor))
    return worst
