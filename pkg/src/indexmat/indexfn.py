"""Classical upsampling operators written as index functions on k x k regions.

These are slow, window-by-window reference implementations. They serve as
oracles for the vectorised pooling/upsampling kernels and for the learned
index maps, so they deliberately avoid reusing those kernels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .arraycore import ConfigError, ShapeError, Value, _make


@dataclass(frozen=True)
class LocalRegion:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.size == 0:
            raise ConfigError(f"a local region must be a non-empty k x k matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ConfigError("local region has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def k(self) -> int:
        return self.values.shape[0]


class IndexFunctionKind(enum.Enum):
    MAX = "max"
    AVG = "avg"
    WEIGHTED = "weighted"
    PIXEL_SHUFFLE = "pixel_shuffle"


def _region(region) -> LocalRegion:
    return region if isinstance(region, LocalRegion) else LocalRegion(np.asarray(region))


def index_max(region) -> np.ndarray:
    """Indicator of the maximum; the first maximum in row-major order wins ties."""
    r = _region(region)
    flat = r.values.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    best = 0
    for i in range(1, flat.size):
        if flat[i] > flat[best]:
            best = i
    out[best] = 1.0
    return out.reshape(r.values.shape)


def index_avg(region) -> np.ndarray:
    r = _region(region)
    return np.ones(r.values.shape, dtype=np.float64)


def index_weighted(region, weights) -> np.ndarray:
    """Soft indices ``W * 1(x in X)`` of bilinear interpolation / deconvolution."""
    r = _region(region)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != r.values.shape:
        raise ConfigError(f"weights shape {w.shape} must match region shape {r.values.shape}")
    return w * index_avg(r)


def bilinear_window_weights(di: int, dj: int) -> np.ndarray:
    """Per-position weights of one neighbour in x2 half-pixel bilinear upsampling.

    Inside a 2x2 output block, the sample at block offset (p, q) draws on the
    low-resolution neighbour at relative offset (di, dj) in {-1, 0, 1}^2.
    """
    def axis(d):
        # offsets 0 and 1 of the block sit at -0.25 and +0.25 from the source centre
        return np.array([{-1: 0.25, 0: 0.75, 1: 0.0}[d], {-1: 0.0, 0: 0.75, 1: 0.25}[d]])

    return np.outer(axis(di), axis(dj))


def apply_index_function(x: np.ndarray, kind: IndexFunctionKind, k: int = 2, weights=None) -> np.ndarray:
    """Tile an index function over every k x k window of an N,C,H,W array."""
    N, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"spatial dims {H}x{W} not divisible by {k}")
    out = np.zeros(x.shape, dtype=np.float64)
    for n in range(N):
        for c in range(C):
            for i in range(0, H, k):
                for j in range(0, W, k):
                    win = x[n, c, i : i + k, j : j + k]
                    if kind is IndexFunctionKind.MAX:
                        m = index_max(win)
                    elif kind is IndexFunctionKind.AVG:
                        m = index_avg(win)
                    elif kind is IndexFunctionKind.WEIGHTED:
                        m = index_weighted(win, weights)
                    else:
                        raise ConfigError(f"{kind} is not a per-window index function")
                    out[n, c, i : i + k, j : j + k] = m
    return out


def reference_indexed_pool(x: np.ndarray, index: np.ndarray, k: int = 2) -> np.ndarray:
    """Direct weighted sum over each window: out = sum_{x in E} I(x) x."""
    N, C, H, W = x.shape
    index = np.broadcast_to(index, x.shape)
    out = np.zeros((N, C, H // k, W // k), dtype=np.result_type(x, index))
    for i in range(k):
        for j in range(k):
            out += x[:, :, i::k, j::k] * index[:, :, i::k, j::k]
    return out


def reference_max_unpool(d: np.ndarray, pooled_from: np.ndarray) -> np.ndarray:
    """Classical max-unpooling: scatter d into the argmax slot of each source window."""
    N, C, h, w = d.shape
    out = np.zeros((N, C, 2 * h, 2 * w), dtype=d.dtype)
    for n in range(N):
        for c in range(C):
            for i in range(h):
                for j in range(w):
                    win = pooled_from[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                    a = int(np.argmax(win))
                    out[n, c, 2 * i + a // 2, 2 * j + a % 2] = d[n, c, i, j]
    return out


# ----------------------------------------------------------------------------
# periodic shuffling (depth-to-space)
#
# Channel l of each r*r group fills block position (m, n) with l = m*r + n
# (zero-based row-major).


def pixel_shuffle_array(x: np.ndarray, r: int) -> np.ndarray:
    N, Cr, H, W = x.shape
    if r < 1 or Cr % (r * r):
        raise ShapeError(f"channel count {Cr} not divisible by r^2={r * r}")
    C = Cr // (r * r)
    return x.reshape(N, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(N, C, H * r, W * r)


def pixel_unshuffle_array(x: np.ndarray, r: int) -> np.ndarray:
    N, C, Hr, Wr = x.shape
    if r < 1 or Hr % r or Wr % r:
        raise ShapeError(f"spatial dims {Hr}x{Wr} not divisible by r={r}")
    H, W = Hr // r, Wr // r
    return x.reshape(N, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(N, C * r * r, H, W)


def pixel_shuffle(x: Value, r: int = 2) -> Value:
    out = pixel_shuffle_array(x.data, r)
    return _make(out, (x,), lambda g: (pixel_unshuffle_array(g, r),))


def pixel_unshuffle(x: Value, r: int = 2) -> Value:
    out = pixel_unshuffle_array(x.data, r)
    return _make(out, (x,), lambda g: (pixel_shuffle_array(g, r),))


def index_pixel_shuffle(r: int) -> np.ndarray:
    """One-hot index functions of periodic shuffling, shape (r*r, r, r).

    Slice l is the indicator selecting channel l for its output position.
    """
    out = np.zeros((r * r, r, r))
    for m in range(r):
        for n in range(r):
            out[m * r + n, m, n] = 1.0
    return out
