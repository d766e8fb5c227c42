"""Dense tensors with tape-ordered reverse-mode autodiff, plus Adam.

Only the operator set used by the two generator networks and the deblurring
objective is provided. Every tensor is single-sample (C x H x W or H x W);
there is no batch axis and no general broadcasting.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .signal_ops import conv2d_adjoint, conv2d_circular_fft

__all__ = [
    "Tensor",
    "NonFiniteError",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "conv2d",
    "upsample2x",
    "leaky_relu",
    "sigmoid",
    "soft_shrink",
    "tsum",
    "mean",
    "tabs",
    "square",
    "frob_sq",
    "diff_h",
    "diff_v",
    "concat",
    "channel_norm",
    "circular_conv",
    "backward",
    "finite_diff_check",
    "AdamState",
    "adam_step",
]

# creation order doubles as the topological order of the graph
_counter = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output from {op}")


class Tensor:
    """Real N-D array that may record the operation that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._order = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.dtype:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        a, b = b, a
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return _make(a.data + b, (a,), lambda g: (g,), "add_scalar")
    b = _as_tensor(b, a)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        b = _as_tensor(b)
        return _make(a - b.data, (b,), lambda g: (-g,), "rsub_scalar")
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return _make(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    b = _as_tensor(b, a)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        a, b = b, a
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    b = _as_tensor(b, a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def soft_shrink(a: Tensor, delta: float) -> Tensor:
    """max(|a| - delta, 0) * sign(a); derivative 0 on |a| <= delta."""
    if delta < 0:
        raise ValueError("soft_shrink threshold must be nonnegative")
    x = a.data
    mask = np.abs(x) > delta
    out = np.where(mask, x - np.sign(x) * delta, 0.0).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * mask,), "soft_shrink")


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,), "square")


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=dt),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.data.size
    return _make(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=dt),), "mean"
    )


def frob_sq(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.asarray(np.vdot(x, x)), (a,), lambda g: (2.0 * g * x,), "frob_sq")


# ---------------------------------------------------------------- differences


def diff_h(a: Tensor) -> Tensor:
    """Forward horizontal difference a[..., j+1] - a[..., j]; last column dropped."""
    shape, dt = a.shape, a.dtype

    def bwd(g):
        out = np.zeros(shape, dtype=dt)
        out[..., 1:] += g
        out[..., :-1] -= g
        return (out,)

    return _make(a.data[..., 1:] - a.data[..., :-1], (a,), bwd, "diff_h")


def diff_v(a: Tensor) -> Tensor:
    """Forward vertical difference a[..., i+1, :] - a[..., i, :]; last row dropped."""
    shape, dt = a.shape, a.dtype

    def bwd(g):
        out = np.zeros(shape, dtype=dt)
        out[..., 1:, :] += g
        out[..., :-1, :] -= g
        return (out,)

    return _make(a.data[..., 1:, :] - a.data[..., :-1, :], (a,), bwd, "diff_v")


# ---------------------------------------------------------------- structural


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C x H x W input with an O x C x kh x kw filter bank."""
    if stride not in (1, 2):
        raise ValueError("conv2d supports stride 1 or 2")
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects CxHxW input and OxCxkhxkw weight, got {x.shape}, {w.shape}")
    c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cw}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = h + 2 * p, wd + 2 * p
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(o, ho, wo)

    def bwd(g):
        g2 = g.reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, ho, wo)
            gxp = np.zeros((c, hp, wp), dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gx = gxp[:, p : p + h, p : p + wd] if p else gxp
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=1))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd, "conv2d")


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial axes with affine gamma/beta.

    This is batch normalization in training mode for a batch of one.
    """
    if x.data.ndim != 3:
        raise ValueError("channel_norm expects a C x H x W tensor")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"channel_norm: gamma/beta must have shape ({c},)")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(1, 2), keepdims=True) + eps)
    xhat = xc * inv
    g3 = gamma.data[:, None, None]
    out = g3 * xhat + beta.data[:, None, None]

    def bwd(g):
        gxhat = g * g3
        gx = inv * (gxhat - gxhat.mean(axis=(1, 2), keepdims=True) - xhat * (gxhat * xhat).mean(axis=(1, 2), keepdims=True))
        return (gx, (g * xhat).sum(axis=(1, 2)), g.sum(axis=(1, 2)))

    return _make(out.astype(x.dtype), (x, gamma, beta), bwd, "channel_norm")


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False)
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(n):
        lo, hi = max(i - 1, 0), min(i + 1, n - 1)
        m[2 * i, i] += 0.75
        m[2 * i, lo] += 0.25
        m[2 * i + 1, i] += 0.75
        m[2 * i + 1, hi] += 0.25
    return m


def upsample2x(x: Tensor, mode: str = "bilinear") -> Tensor:
    if x.data.ndim != 3:
        raise ValueError("upsample2x expects a C x H x W tensor")
    c, h, w = x.shape
    if mode == "nearest":
        out = x.data.repeat(2, axis=1).repeat(2, axis=2)
        return _make(out, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),), "upsample_nearest")
    if mode != "bilinear":
        raise ValueError(f"unknown upsampling mode {mode!r}")
    uh = _bilinear_matrix(h, x.dtype)
    uw = _bilinear_matrix(w, x.dtype)
    out = uh @ x.data @ uw.T
    return _make(out, (x,), lambda g: (uh.T @ g @ uw,), "upsample_bilinear")


def circular_conv(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Periodic convolution with a fixed (untracked) centred kernel, per channel."""
    k = np.asarray(kernel, dtype=np.float64)
    out = conv2d_circular_fft(x.data, k).astype(x.dtype)
    dt = x.dtype
    return _make(out, (x,), lambda g: (conv2d_adjoint(g, k).astype(dt),), "circular_conv")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Propagate d(loss)/d(node) through the recorded graph.

    Leaf tensors with ``requires_grad`` get their ``.grad`` overwritten. When
    ``params`` is given, the matching gradients are returned in order, with
    zeros for parameters the loss does not reach.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else None
    if params is not None:
        for p in params:
            p.grad = None

    # collect reachable tracked nodes
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes or not t.requires_grad:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for t in sorted(nodes.values(), key=lambda n: n._order, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: np.ndarray,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
    kink_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Max relative error between backward() and central differences of ``f``.

    ``kink_fn`` maps the point to its distance from the nearest
    non-differentiable point per coordinate; coordinates closer than ``10 h``
    are skipped. ``coords`` restricts the probe to flat indices.
    """
    x0 = np.array(point, dtype=np.float64)
    p = Tensor(x0.copy(), requires_grad=True)
    out = f(p)
    (analytic,) = backward(out, [p])
    analytic = analytic.ravel()

    idx = np.arange(x0.size) if coords is None else np.asarray(list(coords))
    if kink_fn is not None:
        dist = np.asarray(kink_fn(x0), dtype=np.float64).ravel()
        idx = idx[dist[idx] > 10 * h]

    worst = 0.0
    flat = x0.ravel()
    for i in idx:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite objective at probe {i}")
        fd = (fp - fm) / (2 * h)
        a = analytic[i]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(
            [np.zeros_like(p.data) for p in params],
            [np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ValueError("params, grads and Adam state disagree in length")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape}, {g.shape}, {m.shape}")
        _check_finite(g, "adam_step gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.epsilon)
