"""Small NCHW array engine with reverse-mode differentiation.

Every op takes and returns :class:`Value` objects wrapping numpy buffers.
Kernels are vectorised numpy; the graph is recorded through closures and
replayed in reverse topological order by :meth:`Value.backward`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ConfigError(ValueError):
    """Invalid configuration or argument."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds give identical draw sequences."""
    return np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Value:
    """N-d array node in a differentiable graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this node (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node._accum(g)
                continue
            contribs = node._backward(g)
            for p, pg in zip(node._parents, contribs):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(pg, p.data.shape)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_value(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return vmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_value(x, dtype=None) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def parameter(data: np.ndarray, name: str = "") -> Value:
    return Value(data, requires_grad=True, name=name, dtype=data.dtype)


def _make(data: np.ndarray, parents: Sequence[Value], backward) -> Value:
    out = Value(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Value:
    """Elementwise product with singleton broadcasting (e.g. N,1,H,W x N,C,H,W)."""
    a, b = as_value(a), as_value(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(out, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a: Value, c: float) -> Value:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Value) -> Value:
    mask = x.data > 0
    return _make(np.maximum(x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


def sigmoid(x: Value) -> Value:
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def clip(x: Value, lo: float, hi: float) -> Value:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * inside,))


def sqrt(x: Value) -> Value:
    r = np.sqrt(x.data)
    return _make(r, (x,), lambda g: (g * 0.5 / r,))


def vexp(x: Value) -> Value:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def square(x: Value) -> Value:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


# ----------------------------------------------------------------------------
# shape / reductions


def vsum(x: Value, axis=None, keepdims: bool = False) -> Value:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), bw)


def vmean(x: Value, axis=None, keepdims: bool = False) -> Value:
    s = vsum(x, axis, keepdims)
    return scalar_mul(s, s.data.size / x.data.size)


def reshape(x: Value, shape) -> Value:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Value, axes) -> Value:
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(values: Sequence[Value], axis: int = 1) -> Value:
    vals = [as_value(v) for v in values]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, vals, lambda g: tuple(np.split(g, splits, axis=axis)))


def pad2d(x: Value, bottom: int, right: int) -> Value:
    """Zero-pad the bottom and right edges of an NCHW map."""
    if bottom == 0 and right == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (0, bottom), (0, right)))
    H, W = x.shape[2:]
    return _make(out, (x,), lambda g: (g[:, :, :H, :W],))


def crop2d(x: Value, h: int, w: int) -> Value:
    if x.shape[2] == h and x.shape[3] == w:
        return x
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, :h, :w] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[:, :, :h, :w]), (x,), bw)


def global_avgpool(x: Value) -> Value:
    return vmean(x, axis=(2, 3), keepdims=True)


def broadcast_spatial(x: Value, h: int, w: int) -> Value:
    """Tile an N,C,1,1 map to N,C,h,w."""
    out = np.broadcast_to(x.data, x.shape[:2] + (h, w)).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=(2, 3), keepdims=True),))


# ----------------------------------------------------------------------------
# convolution

# forward-only convolutions process output rows in chunks so that the
# unfolded buffer stays under this many elements
_CHUNK_ELEMS = 1 << 24


def _unfold(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Patches of an N,C,H,W array laid out as C,kh,kw,N,Ho,Wo."""
    N, C = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, N, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return cols


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Value, weight: Value, bias: Value | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Value:
    """Grouped 2-D cross-correlation over NCHW input."""
    N, C, H, W = x.shape
    Co, Cg, kh, kw = weight.shape
    if groups < 1 or C % groups:
        raise ConfigError(f"input channels C={C} not divisible by groups={groups}")
    if Co % groups:
        raise ConfigError(f"output channels Co={Co} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ConfigError(f"weight in-channels {Cg} != C/groups = {C // groups}")
    if bias is not None and bias.shape != (Co,):
        raise ConfigError(f"bias length {bias.shape} != Co={Co}")
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {H}x{W}")
    g = groups
    Cog = Co // g
    K = Cg * kh * kw
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    w2 = weight.data.reshape(g, Cog, K)

    need_graph = _grad_enabled and (x.requires_grad or weight.requires_grad
                                    or (bias is not None and bias.requires_grad))
    if not need_graph:
        out = np.empty((N, Co, Ho, Wo), dtype=np.result_type(x.data, weight.data))
        rows = max(1, _CHUNK_ELEMS // max(1, C * kh * kw * Wo))
        for n in range(N):
            for r0 in range(0, Ho, rows):
                r1 = min(Ho, r0 + rows)
                sub_x = xp[n : n + 1, :, r0 * stride : (r1 - 1) * stride + kh]
                cols = _unfold(sub_x, kh, kw, stride, r1 - r0, Wo).reshape(g, K, -1)
                out[n, :, r0:r1] = np.matmul(w2, cols).reshape(Co, r1 - r0, Wo)
        if bias is not None:
            out += bias.data.reshape(1, Co, 1, 1)
        return Value(out, dtype=out.dtype)

    L = N * Ho * Wo
    cols = _unfold(xp, kh, kw, stride, Ho, Wo).reshape(g, K, L)
    out = np.matmul(w2, cols).reshape(Co, N, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, Co, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def bw(gout):
        go = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(g, Cog, L)
        gw = np.matmul(go, cols.transpose(0, 2, 1)).reshape(weight.shape) if weight.requires_grad else None
        gb = gout.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.transpose(0, 2, 1), go).reshape(C, kh, kw, N, Ho, Wo)
            gxp = np.zeros((C, N) + xp.shape[2:], dtype=gout.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, bw)


def pointwise_conv(x: Value, weight: Value, bias: Value | None = None, groups: int = 1) -> Value:
    if weight.shape[2:] != (1, 1):
        raise ConfigError(f"pointwise conv needs a 1x1 kernel, got {weight.shape[2:]}")
    return conv2d(x, weight, bias, stride=1, padding=0, groups=groups)


# ----------------------------------------------------------------------------
# normalisation


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, c: int, dtype=DEFAULT_DTYPE) -> "RunningStats":
        return cls(np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype))


def batchnorm2d(x: Value, gamma: Value, beta: Value, running: RunningStats,
                train: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Value:
    """Per-channel batch normalisation.

    In train mode the batch statistics are used and ``running`` is updated in
    place; in eval mode the running statistics are used.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigError(f"gamma/beta length must equal C={C}")
    shp = (1, C, 1, 1)
    if not train:
        inv = (1.0 / np.sqrt(running.var + eps)).astype(x.dtype)
        xhat = (x.data - running.mean.reshape(shp).astype(x.dtype)) * inv.reshape(shp)
        out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

        def bw_eval(g):
            return (g * (gamma.data * inv).reshape(shp),
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _make(out.astype(x.dtype), (x, gamma, beta), bw_eval)

    axes = (0, 2, 3)
    m = x.data.size // C
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)
    if _grad_enabled:
        unbiased = var.reshape(C) * (m / max(1, m - 1))
        running.mean[:] = (1 - momentum) * running.mean + momentum * mu.reshape(C)
        running.var[:] = (1 - momentum) * running.var + momentum * unbiased

    def bw(g):
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data.reshape(shp)
        gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def window_softmax(x: Value, k: int = 2) -> Value:
    """Softmax over every non-overlapping k x k window of every channel."""
    N, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"spatial dims {H}x{W} not divisible by window {k}")
    v = x.data.reshape(N, C, H // k, k, W // k, k)
    e = np.exp(v - v.max(axis=(3, 5), keepdims=True))
    s = e / e.sum(axis=(3, 5), keepdims=True)

    def bw(g):
        gv = g.reshape(s.shape)
        return ((s * (gv - (gv * s).sum(axis=(3, 5), keepdims=True))).reshape(x.shape),)

    return _make(s.reshape(x.shape), (x,), bw)


# ----------------------------------------------------------------------------
# pooling and resampling


def _check_even(x: Value) -> tuple[int, int, int, int]:
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"2x2 pooling needs even spatial dims, got {H}x{W}")
    return N, C, H, W


def avgpool2(x: Value) -> Value:
    N, C, H, W = _check_even(x)
    d = x.data
    # fixed row-major summation order keeps results bitwise reproducible
    out = (((d[:, :, 0::2, 0::2] + d[:, :, 0::2, 1::2]) + d[:, :, 1::2, 0::2]) + d[:, :, 1::2, 1::2])
    q = x.dtype.type(0.25)
    out = out * q
    return _make(out, (x,), lambda g: (_nn2(g) * q,))


def _nn2(a: np.ndarray) -> np.ndarray:
    return a.repeat(2, axis=-2).repeat(2, axis=-1)


def window_onehot(a: np.ndarray) -> np.ndarray:
    """One-hot of the per-window argmax of 2x2 windows; ties go to the first in row-major order."""
    N, C, H, W = a.shape
    w = a.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    idx = w.argmax(axis=-1)
    oh = np.zeros_like(w)
    np.put_along_axis(oh, idx[..., None], 1, axis=-1)
    return oh.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)


def maxpool2_with_indices(x: Value) -> tuple[Value, Value]:
    """2x2/2 max pooling; also returns the per-window one-hot argmax map."""
    N, C, H, W = _check_even(x)
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).max(axis=(3, 5))
    onehot = window_onehot(x.data)
    return _make(out, (x,), lambda g: (_nn2(g) * onehot,)), Value(onehot, dtype=onehot.dtype)


def max_unpool2(d: Value, onehot: Value) -> Value:
    """Scatter each value to its window's recorded argmax position."""
    return mul(upsample_nn2(d), onehot)


def upsample_nn2(x: Value) -> Value:
    N, C, H, W = x.shape

    def bw(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(_nn2(x.data), (x,), bw)


def bilinear_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) interpolation matrix for x2 upsampling with half-pixel centres."""
    A = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = (o + 0.5) / 2 - 0.5
        src = min(max(src, 0.0), n - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        A[o, i0] += 1 - t
        A[o, i1] += t
    return A


def upsample_bilinear2(x: Value) -> Value:
    N, C, H, W = x.shape
    Ah = bilinear_matrix(H, x.dtype)
    Aw = bilinear_matrix(W, x.dtype)
    out = np.matmul(np.matmul(Ah, x.data), Aw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(Ah.T, g), Aw),))


def channel_max(x: Value) -> Value:
    """Max over channels (N,C,H,W -> N,1,H,W); not differentiable."""
    return Value(x.data.max(axis=1, keepdims=True), dtype=x.dtype)


# ----------------------------------------------------------------------------
# initialisation and optimisation


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Value], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. Parameters without grads are skipped."""
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, p in params.items():
        if p.grad is None or not p.requires_grad:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= upd.astype(p.data.dtype)


# ----------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    tol: float

    @property
    def ok(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def gradcheck(f: Callable[..., Value], inputs: dict[str, np.ndarray], h: float = 1e-6,
              tol: float = 1e-4, probe: np.ndarray | None = None, max_entries: int | None = None,
              rng: np.random.Generator | None = None, floor: float = 1e-6) -> GradcheckReport:
    """Compare analytic gradients with central differences at float64.

    ``f`` maps keyword Values to an output Value; a fixed random projection
    (``probe``) reduces non-scalar outputs to a scalar. The error reported
    per input is ``max|a - n| / max(max|a|, max|n|, floor)`` over the checked
    entries, i.e. relative to that input's largest gradient; ``floor`` stops
    round-off from dominating inputs whose true gradient is ~0. Entries that
    miss ``tol`` are retried once with step ``h / 10``.
    """
    rng = rng if rng is not None else make_rng(12345)
    arrays = {k: np.asarray(v, dtype=np.float64).copy() for k, v in inputs.items()}

    def run(arrs, track):
        vals = {k: Value(a, requires_grad=track, dtype=np.float64) for k, a in arrs.items()}
        return vals, f(**vals)

    vals, out = run(arrays, True)
    if probe is None:
        probe = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)
    loss = vsum(mul(out, Value(probe, dtype=np.float64)))
    loss.backward()

    def central(arrs, flat, i, step):
        orig = flat[i]
        fs = []
        for x in (orig + step, orig - step):
            flat[i] = x
            with no_grad():
                fs.append(float((f(**{k: Value(a, dtype=np.float64) for k, a in arrs.items()}).data * probe).sum()))
        flat[i] = orig
        return (fs[0] - fs[1]) / (2 * step)

    errors: dict[str, float] = {}
    for name, arr in arrays.items():
        analytic = vals[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        diffs, scale = [], floor
        for i in idx:
            a = float(analytic.reshape(-1)[i])
            num = central(arrays, flat, i, h)
            if abs(a - num) > tol * max(floor, abs(a), abs(num)):
                # a kink (ReLU, max) inside [x - h, x + h] spoils the difference;
                # a smaller step avoids it, a wrong backward fails at both
                num2 = central(arrays, flat, i, h / 10)
                if abs(a - num2) < abs(a - num):
                    num = num2
            diffs.append(abs(a - num))
            scale = max(scale, abs(a), abs(num))
        errors[name] = max(diffs, default=0.0) / scale
    return GradcheckReport(errors, tol)


def parameters_of(values: Iterable[Value]) -> list[Value]:
    return [v for v in values if v.requires_grad]
