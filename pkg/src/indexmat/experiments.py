"""Scripted experiments: index-block capacity and desk-scale upsampling ordering."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import arraycore as ac
from .arraycore import Value
from .indexnet import Family, IndexBlockConfig, build_index_block, index_forward, index_logits
from .mattenet import ModelConfig, Schedule, evaluate_model, fit
from .metrics import MetricReport, mean_report
from .synthdata import AugmentConfig, base_sample, dataset_sample

log = logging.getLogger(__name__)


def window_cross_entropy(z: Value, target: np.ndarray) -> Value:
    """Mean cross-entropy of per-window softmax logits against one-hot targets.

    ``z`` and ``target`` are (N,1,H,W); each 2x2 window is one 4-way
    classification problem.
    """
    N, C, H, W = z.shape
    zw = z.data.reshape(N, C, H // 2, 2, W // 2, 2)
    m = zw.max(axis=(3, 5), keepdims=True)
    e = np.exp(zw - m)
    s = e.sum(axis=(3, 5), keepdims=True)
    tw = target.reshape(zw.shape)
    n_win = N * C * (H // 2) * (W // 2)
    loss = ((np.log(s) + m).sum() - (tw * zw).sum()) / n_win
    grad = ((e / s - tw) / n_win).reshape(z.shape)
    return ac._make(np.asarray(loss, dtype=z.dtype), (z,), lambda g: (g * grad,))


def window_agreement(z: np.ndarray, target: np.ndarray) -> float:
    """Fraction of 2x2 windows where argmax(z) hits the target's selected cell."""
    return float((ac.window_onehot(z) * target).sum() / (target.size / 4))


# ----------------------------------------------------------------------------
# capacity: can an index block learn the max function?


@dataclass(frozen=True)
class CapacityConfig:
    channels: int = 2
    expansion: int = 8
    steps: int = 2000
    batch: int = 16
    size: int = 8
    lr: float = 1e-2
    test_windows: int = 5000


@dataclass
class CapacityResult:
    seed: int
    linear: float
    nonlinear: float


def _max_task(rng, n: int, cfg: CapacityConfig) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian features and the window one-hot of their channel max (what HMI picks)."""
    x = rng.standard_normal((n, cfg.channels, cfg.size, cfg.size)).astype(np.float32)
    hmi = IndexBlockConfig(Family.HOLISTIC_MAX, channels=cfg.channels)
    with ac.no_grad():
        t = index_forward(None, hmi, Value(x)).encoder_map.data
    return x, t


def train_max_fitter(nonlinear: bool, seed: int, cfg: CapacityConfig = CapacityConfig()) -> float:
    """Train a holistic index block to reproduce max indices; return test agreement."""
    bcfg = IndexBlockConfig(Family.HOLISTIC, nonlinear=nonlinear, channels=cfg.channels,
                            expansion=cfg.expansion)
    rng = ac.make_rng(seed)
    block = build_index_block(bcfg, rng)
    opt = ac.AdamState()
    for _ in range(cfg.steps):
        x, t = _max_task(rng, cfg.batch, cfg)
        for p in block.params.values():
            p.grad = None
        loss = window_cross_entropy(index_logits(block, bcfg, Value(x), train=True), t)
        loss.backward()
        ac.adam_step(block.params, opt, cfg.lr)
    n_test = -(-cfg.test_windows // (cfg.size * cfg.size // 4))
    x, t = _max_task(ac.make_rng(seed + 10_000), n_test, cfg)
    with ac.no_grad():
        z = index_logits(block, bcfg, Value(x), train=False).data
    return window_agreement(z, t)


def capacity_experiment(seeds=range(5), cfg: CapacityConfig = CapacityConfig()) -> list[CapacityResult]:
    out = []
    for s in seeds:
        r = CapacityResult(s, train_max_fitter(False, s, cfg), train_max_fitter(True, s, cfg))
        log.info("capacity seed %d: linear %.4f nonlinear %.4f", s, r.linear, r.nonlinear)
        out.append(r)
    return out


# ----------------------------------------------------------------------------
# desk-scale matting: bilinear vs. max-unpooling vs. learned indices


ORDERING_VARIANTS = ("bilinear", "maxpool", "index")


@dataclass(frozen=True)
class OrderingConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    train_count: int = 2000
    test_count: int = 200
    steps: int = 2000
    batch: int = 8
    data_seed: int = 1000
    test_seed: int = 5000
    base_size: int = 96
    crop: int = 64


@dataclass
class OrderingRun:
    variant: str
    seed: int
    report: MetricReport
    seconds: float
    per_sample_sad: list[float] = field(default_factory=list)


def ordering_model(variant: str, cfg: OrderingConfig) -> ModelConfig:
    """Same backbone for all variants; only the upsampling operator differs.

    Decoder skip fusion is off so the decoder sees encoder detail only
    through the upsampling operator.
    """
    return ModelConfig(stages=len(cfg.stage_channels), stage_channels=cfg.stage_channels,
                       upsampling=variant, family=Family.DEPTHWISE_M2O, nonlinear=True, context=True,
                       fusion="none", context_block=False)


def ordering_run(variant: str, seed: int, cfg: OrderingConfig = OrderingConfig(),
                 train=None, test=None) -> OrderingRun:
    t0 = time.perf_counter()
    train = train if train is not None else [base_sample(cfg.data_seed + seed, i, cfg.base_size)
                                             for i in range(cfg.train_count)]
    aug = AugmentConfig(crop=cfg.crop)
    test = test if test is not None else [dataset_sample(cfg.test_seed, i, aug, cfg.base_size)
                                          for i in range(cfg.test_count)]
    mcfg = ordering_model(variant, cfg)
    sched = Schedule(steps=cfg.steps, batch=cfg.batch, seed=seed)
    state = fit(mcfg, train, sched, augment_cfg=aug)
    reports = evaluate_model(state.params, mcfg, test)
    run = OrderingRun(variant, seed, mean_report(reports), time.perf_counter() - t0,
                      [r.sad for r in reports])
    log.info("ordering %s seed %d: SAD %.4f (%.0fs)", variant, seed, run.report.sad, run.seconds)
    return run


def ordering_experiment(seeds=range(3), cfg: OrderingConfig = OrderingConfig(),
                        variants=ORDERING_VARIANTS) -> dict[str, list[OrderingRun]]:
    out: dict[str, list[OrderingRun]] = {v: [] for v in variants}
    for s in seeds:
        train = [base_sample(cfg.data_seed + s, i, cfg.base_size) for i in range(cfg.train_count)]
        test = [dataset_sample(cfg.test_seed, i, AugmentConfig(crop=cfg.crop), cfg.base_size)
                for i in range(cfg.test_count)]
        for v in variants:
            out[v].append(ordering_run(v, s, cfg, train, test))
    return out


def median_sad(runs: list[OrderingRun]) -> float:
    return float(np.median([r.report.sad for r in runs]))
