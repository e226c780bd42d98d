"""Matting errors (SAD, MSE, gradient, connectivity) over a trimap's unknown band.

Mattes are float arrays in [0, 1]. Gradient and connectivity errors follow
the widely used evaluation code: Gaussian-derivative gradients with
sigma 1.4, connectivity thresholds every 0.1 with theta 0.15, and sums
reported divided by 1000 like SAD.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


@dataclass
class MetricReport:
    sad: float
    sad_raw: float
    mse: float
    grad: float
    conn: float
    unknown_pixel_count: int

    def as_dict(self) -> dict:
        return asdict(self)


def _prep(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    mask = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != pred.shape:
        raise ValueError(f"mask shape {mask.shape} != matte shape {pred.shape}")
    return pred, gt, mask


def sad(pred, gt, mask=None) -> float:
    """Raw sum of absolute differences over the mask."""
    pred, gt, mask = _prep(pred, gt, mask)
    return float(np.abs(pred - gt)[mask].sum())


def mse(pred, gt, mask=None) -> float:
    pred, gt, mask = _prep(pred, gt, mask)
    n = int(mask.sum())
    return float(((pred - gt) ** 2)[mask].sum() / n) if n else 0.0


def gaussian_derivative_kernel(sigma: float = 1.4, epsilon: float = 1e-2) -> np.ndarray:
    """x-derivative-of-Gaussian kernel (smoothing in y), unit L2 norm."""
    half = int(np.ceil(sigma * np.sqrt(-2 * np.log(np.sqrt(2 * np.pi) * sigma * epsilon))))
    u = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-u ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))
    dg = -u * g / sigma ** 2
    k = np.outer(g, dg)
    return k / np.sqrt((k ** 2).sum())


def gradient_magnitude(a: np.ndarray, sigma: float = 1.4) -> np.ndarray:
    hx = gaussian_derivative_kernel(sigma)
    gx = ndimage.convolve(a, hx, mode="nearest")
    gy = ndimage.convolve(a, hx.T, mode="nearest")
    return np.hypot(gx, gy)


def grad_error(pred, gt, mask=None, sigma: float = 1.4) -> float:
    pred, gt, mask = _prep(pred, gt, mask)
    diff = (gradient_magnitude(pred, sigma) - gradient_magnitude(gt, sigma)) ** 2
    return float(diff[mask].sum() / 1000.0)


_FOUR = ndimage.generate_binary_structure(2, 1)


def _largest_component(m: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(m, structure=_FOUR)
    if n == 0:
        return np.zeros_like(m, bool)
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == sizes.argmax()


def connectivity_levels(pred: np.ndarray, gt: np.ndarray, step: float = 0.1) -> np.ndarray | None:
    """Largest threshold at which each pixel stays connected to the source.

    The source is the largest 4-connected region where both mattes are 1.
    Returns None when there is no such region.
    """
    source = _largest_component((pred >= 1) & (gt >= 1))
    if not source.any():
        return None
    n_steps = int(round(1 / step))
    level = np.full(pred.shape, -1.0)
    for i in range(1, n_steps + 1):
        t = i * step
        lab, _ = ndimage.label((pred >= t) & (gt >= t), structure=_FOUR)
        src_labels = np.unique(lab[source])
        connected = np.isin(lab, src_labels[src_labels > 0])
        newly = (level < 0) & ~connected
        level[newly] = (i - 1) * step
    level[level < 0] = 1.0
    return level


def conn_error(pred, gt, mask=None, step: float = 0.1, theta: float = 0.15) -> float:
    pred, gt, mask = _prep(pred, gt, mask)
    level = connectivity_levels(pred, gt, step)
    if level is None:
        warnings.warn("no jointly opaque source region; connectivity falls back to SAD", RuntimeWarning)
        return float(np.abs(pred - gt)[mask].sum() / 1000.0)
    dp, dg = pred - level, gt - level
    phi_p = 1 - dp * (dp >= theta)
    phi_g = 1 - dg * (dg >= theta)
    return float(np.abs(phi_p - phi_g)[mask].sum() / 1000.0)


def evaluate(pred, gt, trimap) -> MetricReport:
    """All four metrics over the unknown band (trimap values in [1, 254])."""
    trimap = np.asarray(trimap)
    mask = (trimap > 0) & (trimap < 255)
    raw = sad(pred, gt, mask)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        conn = conn_error(pred, gt, mask)
    return MetricReport(raw / 1000.0, raw, mse(pred, gt, mask), grad_error(pred, gt, mask),
                        conn, int(mask.sum()))


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to aggregate")
    d = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("sad", "sad_raw", "mse", "grad", "conn")}
    return MetricReport(**d, unknown_pixel_count=int(sum(r.unknown_pixel_count for r in reports)))
