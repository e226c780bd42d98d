"""Procedural matting samples: soft foregrounds over textured backgrounds.

A sample is a pure function of ``(seed, index)``, so datasets can be rebuilt
bit-identically and generated in any order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .arraycore import ConfigError

TRIMAP_BG, TRIMAP_UNKNOWN, TRIMAP_FG = 0, 128, 255


@dataclass
class MattingSample:
    image: np.ndarray  # H,W,3 uint8
    trimap: np.ndarray  # H,W uint8 in {0, 128, 255}
    alpha: np.ndarray  # H,W float32, multiples of 1/255
    fg: np.ndarray  # H,W,3 uint8
    bg: np.ndarray  # H,W,3 uint8
    dilation: int = 0

    @property
    def size(self) -> tuple[int, int]:
        return self.alpha.shape


@dataclass(frozen=True)
class AugmentConfig:
    crop: int = 64
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.75, 1.5)
    trimap_dilation_range: tuple[int, int] | None = (1, 15)
    center_prob: float = 0.5


def quantize_alpha(alpha: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(alpha, 0, 1) * 255) / 255).astype(np.float32)


def _smooth_noise(rng, size: int, sigma: float, channels: int = 1) -> np.ndarray:
    n = rng.standard_normal((size, size, channels))
    n = ndimage.gaussian_filter(n, sigma=(sigma, sigma, 0), mode="wrap")
    n -= n.mean()
    return n / (n.std() + 1e-12)


def _strokes(rng, size: int, count: int, soft: bool) -> np.ndarray:
    """Thin random-walk polylines (hair-like strands) rendered with soft edges."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    for _ in range(count):
        p = rng.uniform(0.2 * size, 0.8 * size, 2)
        heading = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(0.35, 0.9)
        step = size / 16
        for _ in range(int(rng.integers(4, 10))):
            heading += rng.normal(0, 0.5)
            q = p + step * np.array([np.sin(heading), np.cos(heading)])
            d = q - p
            t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / (d @ d), 0, 1)
            dist = np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))
            seg = np.exp(-0.5 * (dist / width) ** 2) if soft else (dist <= width).astype(float)
            out = np.maximum(out, seg)
            p = q
    return out


def gen_foreground(rng: np.random.Generator, size: int, soft: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Random foreground colours and an alpha made of a blob plus hair-like strands."""
    field = _smooth_noise(rng, size, sigma=size / 10)[..., 0]
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    field = field - 6.0 * (yy ** 2 + xx ** 2) + rng.uniform(0.5, 1.2)
    if soft:
        blob = np.clip(field / rng.uniform(0.3, 0.8) + 0.5, 0, 1)
        blob = ndimage.gaussian_filter(blob, rng.uniform(0.6, 1.5))
    else:
        blob = (field > 0).astype(float)
    strands = _strokes(rng, size, int(rng.integers(3, 9)), soft)
    alpha = quantize_alpha(np.maximum(blob, strands))
    base = rng.uniform(30, 225, 3)
    tex = _smooth_noise(rng, size, sigma=rng.uniform(1.0, 3.0), channels=3) * rng.uniform(10, 40)
    fg = np.clip(base + tex, 0, 255).round().astype(np.uint8)
    return fg, alpha


def gen_background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    c0, c1 = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * yy + np.sin(angle) * xx)[..., None]
    bg = c0 + (c1 - c0) * (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    bg = bg + _smooth_noise(rng, size, sigma=rng.uniform(0.5, 4.0), channels=3) * rng.uniform(10, 45)
    freq = rng.uniform(3, 12)
    stripes = np.sin(2 * np.pi * freq * (np.sin(angle) * yy - np.cos(angle) * xx))[..., None]
    bg = bg + stripes * rng.uniform(0, 30, 3)
    return np.clip(bg, 0, 255).round().astype(np.uint8)


def composite(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    a = alpha.astype(np.float64)[..., None]
    return np.clip(np.round(a * fg + (1 - a) * bg), 0, 255).astype(np.uint8)


def make_trimap(alpha: np.ndarray, dilation_radius: int) -> np.ndarray:
    """Unknown band = fractional-alpha pixels dilated by a square of the given radius."""
    if dilation_radius < 0:
        raise ConfigError(f"dilation radius must be >= 0, got {dilation_radius}")
    frac = (alpha > 0) & (alpha < 1)
    r = int(dilation_radius)
    unknown = ndimage.maximum_filter(frac, size=2 * r + 1, mode="constant", cval=False) if r else frac
    tri = np.where(alpha >= 1, TRIMAP_FG, TRIMAP_BG).astype(np.uint8)
    tri[unknown] = TRIMAP_UNKNOWN
    return tri


def make_sample(rng: np.random.Generator, size: int, dilation: int = 5, soft: bool = True) -> MattingSample:
    fg, alpha = gen_foreground(rng, size, soft)
    bg = gen_background(rng, size)
    return MattingSample(composite(fg, bg, alpha), make_trimap(alpha, dilation), alpha, fg, bg, dilation)


def _resize(a: np.ndarray, out: int, order: int) -> np.ndarray:
    zoom = (out / a.shape[0], out / a.shape[1]) + (1,) * (a.ndim - 2)
    return ndimage.zoom(a.astype(np.float64), zoom, order=order, mode="nearest", grid_mode=True)


def _resize_window(a: np.ndarray, out: int, y0: int, x0: int, c: int) -> np.ndarray:
    """``_resize(a, out, 1)[y0:y0+c, x0:x0+c]`` without resampling the rest of the image."""
    zy, zx = a.shape[0] / out, a.shape[1] / out
    extra = a.ndim - 2
    with warnings.catch_warnings():
        # a 1-D matrix means a diagonal one, which is what we want here
        warnings.simplefilter("ignore", UserWarning)
        return ndimage.affine_transform(a.astype(np.float64), [zy, zx] + [1] * extra,
                                        [(y0 + 0.5) * zy - 0.5, (x0 + 0.5) * zx - 0.5] + [0] * extra,
                                        output_shape=(c, c) + a.shape[2:], order=1, mode="nearest")


def augment(sample: MattingSample, cfg: AugmentConfig, rng: np.random.Generator) -> MattingSample:
    """Random scale, crop, horizontal flip and fresh trimap dilation."""
    H, W = sample.size
    if cfg.crop > min(H, W) * cfg.scale_range[1]:
        raise ConfigError(f"crop {cfg.crop} larger than any scaled {H}x{W} sample")
    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    scale = max(scale, cfg.crop / min(H, W))
    fg, bg, alpha, tri = sample.fg, sample.bg, sample.alpha, sample.trimap
    side = int(round(H * scale)) if scale != 1.0 else H
    if scale != 1.0:
        tri = _resize(tri, side, 0).astype(np.uint8)
    h, w = tri.shape
    c = cfg.crop
    unknown = np.argwhere((tri > 0) & (tri < 255))
    if len(unknown) and rng.random() < cfg.center_prob:
        cy, cx = unknown[rng.integers(len(unknown))]
        y0 = int(np.clip(cy - c // 2, 0, h - c))
        x0 = int(np.clip(cx - c // 2, 0, w - c))
    else:
        y0 = int(rng.integers(0, h - c + 1))
        x0 = int(rng.integers(0, w - c + 1))
    sl = (slice(y0, y0 + c), slice(x0, x0 + c))
    tri = tri[sl]
    if scale != 1.0:
        fg = np.clip(_resize_window(fg, side, y0, x0, c).round(), 0, 255).astype(np.uint8)
        bg = np.clip(_resize_window(bg, side, y0, x0, c).round(), 0, 255).astype(np.uint8)
        alpha = quantize_alpha(_resize_window(alpha, side, y0, x0, c))
    else:
        fg, bg, alpha = fg[sl], bg[sl], alpha[sl]
    if rng.random() < cfg.flip_prob:
        fg, bg, alpha, tri = fg[:, ::-1], bg[:, ::-1], alpha[:, ::-1], tri[:, ::-1]
    fg, bg, alpha = (np.ascontiguousarray(a) for a in (fg, bg, alpha))
    dilation = sample.dilation
    if cfg.trimap_dilation_range is not None:
        dilation = int(rng.integers(cfg.trimap_dilation_range[0], cfg.trimap_dilation_range[1] + 1))
        tri = make_trimap(alpha, dilation)
    else:
        # keep the label map, repairing labels that resampling made inconsistent
        tri = tri.copy()
        known = tri != TRIMAP_UNKNOWN
        tri[known] = np.where(alpha[known] >= 1, TRIMAP_FG, TRIMAP_BG)
        tri[(alpha > 0) & (alpha < 1)] = TRIMAP_UNKNOWN
    return MattingSample(composite(fg, bg, alpha), np.ascontiguousarray(tri), alpha, fg, bg, dilation)


def flip(sample: MattingSample) -> MattingSample:
    return replace(sample, **{k: np.ascontiguousarray(getattr(sample, k)[:, ::-1])
                              for k in ("image", "trimap", "alpha", "fg", "bg")})


# ----------------------------------------------------------------------------
# datasets


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, index])


def base_sample(seed: int, index: int, size: int = 96) -> MattingSample:
    rng = sample_rng(seed, index)
    return make_sample(rng, size, dilation=int(rng.integers(1, 16)))


def dataset_sample(seed: int, index: int, cfg: AugmentConfig = AugmentConfig(), base_size: int = 96) -> MattingSample:
    """Sample ``index`` of the dataset with the given seed, augmented and cropped."""
    base = base_sample(seed, index, base_size)
    return augment(base, cfg, np.random.default_rng([seed & 0xFFFFFFFF, index, 1]))


def check_invariants(s: MattingSample) -> list[str]:
    """Return violated sample invariants (empty when the sample is valid)."""
    bad = []
    expect = s.alpha.astype(np.float64)[..., None] * s.fg + (1 - s.alpha.astype(np.float64)[..., None]) * s.bg
    if np.abs(s.image - expect).max() > 0.5 + 1e-6:
        bad.append("composition")
    if not set(np.unique(s.trimap)) <= {TRIMAP_BG, TRIMAP_UNKNOWN, TRIMAP_FG}:
        bad.append("trimap values")
    if np.any(s.alpha[s.trimap == TRIMAP_FG] != 1):
        bad.append("foreground alpha")
    if np.any(s.alpha[s.trimap == TRIMAP_BG] != 0):
        bad.append("background alpha")
    if s.alpha.min() < 0 or s.alpha.max() > 1:
        bad.append("alpha range")
    return bad
