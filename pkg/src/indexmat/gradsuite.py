"""Finite-difference gradient checks for every differentiable piece of the pipeline."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import arraycore as ac
from . import indexfn, sampler
from .arraycore import Value
from .indexnet import Family, IndexBlockConfig, IndexBlockParams, build_index_block, index_forward
from .mattenet import ModelConfig, build_model, forward, matting_loss

F64 = np.float64


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    per_input: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _x(rng, *shape) -> np.ndarray:
    return rng.standard_normal(shape)


def op_checks(rng) -> Iterator[tuple[str, Callable, dict]]:
    yield "conv2d", lambda x, w, b: ac.conv2d(x, w, b, stride=2), \
        {"x": _x(rng, 1, 3, 6, 6), "w": _x(rng, 4, 3, 2, 2), "b": _x(rng, 4)}
    yield "conv2d_grouped_padded", lambda x, w, b: ac.conv2d(x, w, b, stride=2, padding=1, groups=3), \
        {"x": _x(rng, 2, 3, 6, 6), "w": _x(rng, 6, 1, 4, 4), "b": _x(rng, 6)}
    yield "conv2d_3x3", lambda x, w: ac.conv2d(x, w, None, 1, 1), {"x": _x(rng, 2, 2, 5, 4), "w": _x(rng, 3, 2, 3, 3)}
    yield "pointwise_conv", lambda x, w, b: ac.pointwise_conv(x, w, b), \
        {"x": _x(rng, 2, 3, 4, 4), "w": _x(rng, 5, 3, 1, 1), "b": _x(rng, 5)}
    stats = ac.RunningStats.fresh(3, F64)
    yield "batchnorm2d", lambda x, g, b: ac.batchnorm2d(x, g, b, stats, train=True), \
        {"x": _x(rng, 2, 3, 4, 4), "g": _x(rng, 3), "b": _x(rng, 3)}
    yield "relu", ac.relu, {"x": _x(rng, 2, 3, 4, 4)}
    yield "clip", lambda x: ac.clip(x, -0.5, 0.5), {"x": _x(rng, 2, 3, 4, 4)}
    yield "sigmoid", ac.sigmoid, {"x": _x(rng, 2, 3, 4, 4)}
    yield "window_softmax", ac.window_softmax, {"x": _x(rng, 2, 3, 4, 6)}
    yield "avgpool2", ac.avgpool2, {"x": _x(rng, 2, 3, 4, 6)}
    yield "maxpool2", lambda x: ac.maxpool2_with_indices(x)[0], {"x": _x(rng, 2, 3, 4, 6)}
    yield "upsample_nn2", ac.upsample_nn2, {"x": _x(rng, 2, 3, 3, 2)}
    yield "upsample_bilinear2", ac.upsample_bilinear2, {"x": _x(rng, 2, 3, 3, 4)}
    yield "mul_broadcast", ac.mul, {"a": _x(rng, 2, 1, 4, 4), "b": _x(rng, 2, 3, 4, 4)}
    yield "add", ac.add, {"a": _x(rng, 2, 3, 4, 4), "b": _x(rng, 1, 3, 1, 1)}
    yield "concat", lambda a, b: ac.concat([a, b]), {"a": _x(rng, 2, 3, 4, 4), "b": _x(rng, 2, 2, 4, 4)}
    yield "scalar_mul", lambda x: ac.scalar_mul(x, 4.0), {"x": _x(rng, 2, 3, 4, 4)}
    yield "pixel_shuffle", lambda x: indexfn.pixel_shuffle(x, 2), {"x": _x(rng, 2, 8, 3, 3)}
    yield "pixel_unshuffle", lambda x: indexfn.pixel_unshuffle(x, 2), {"x": _x(rng, 2, 2, 4, 6)}
    yield "indexed_pool", sampler.indexed_pool, {"x": _x(rng, 2, 3, 4, 4), "encoder_map": _x(rng, 2, 1, 4, 4)}
    yield "indexed_upsample", sampler.indexed_upsample, {"d": _x(rng, 2, 3, 2, 2), "decoder_map": _x(rng, 2, 3, 4, 4)}


FAMILY_CONFIGS = {
    fam: [IndexBlockConfig(fam, nl, ctx, channels=4) for nl in (False, True) for ctx in (False, True)]
    for fam in (Family.HOLISTIC, Family.DEPTHWISE_O2O, Family.DEPTHWISE_M2O)
}


def _block_check(cfg: IndexBlockConfig, rng, composite: bool = False):
    blk = build_index_block(cfg, rng, dtype=F64)
    keys = {k.replace(".", "__"): k for k in blk.params}
    inputs = {"x": _x(rng, 2, cfg.channels, 4, 4)}
    inputs.update({kk: blk.params[k].data.copy() for kk, k in keys.items()})
    for k in keys:
        if k.endswith("gamma"):
            inputs[k] = 1.0 + 0.2 * rng.standard_normal(inputs[k].shape)

    def f(x, **params):
        p = IndexBlockParams({k: params[kk] for kk, k in keys.items()},
                             {k: ac.RunningStats.fresh(v.mean.size, F64) for k, v in blk.bn.items()})
        pair = index_forward(p, cfg, x, train=True)
        if composite:
            return sampler.indexed_upsample(sampler.indexed_pool(x, pair.encoder_map), pair.decoder_map)
        return ac.concat([pair.encoder_map, pair.decoder_map])

    return f, inputs


def cast_model(P, dtype) -> None:
    for v in P.params.values():
        v.data = v.data.astype(dtype)
    for st in P.bn.values():
        st.mean, st.var = st.mean.astype(dtype), st.var.astype(dtype)


def tiny_model_check(mode: str, family: Family | None, rng):
    cfg = ModelConfig(stages=1, stage_channels=(4,), upsampling=mode, family=family or Family.HOLISTIC,
                      nonlinear=True, context=True, fusion="concat", context_block=True)
    P = build_model(cfg, rng)
    cast_model(P, F64)
    keys = {k.replace(".", "__"): k for k in P.params}
    inputs = {"x": rng.random((2, 4, 8, 8))}
    inputs.update({kk: P.params[k].data.copy() for kk, k in keys.items()})
    alpha_gt = rng.random((2, 1, 8, 8))
    trimap = np.full((2, 1, 8, 8), 128, np.uint8)
    trimap[:, :, :2] = 0
    fg, bg = rng.random((2, 3, 8, 8)) * 255, rng.random((2, 3, 8, 8)) * 255

    def f(x, **params):
        for kk, k in keys.items():
            P.params[k] = params[kk]
        if P.blocks and P.blocks[0] is not None:
            P.blocks[0].params = {k[len("enc0.index."):]: v for k, v in P.params.items()
                                  if k.startswith("enc0.index.")}
        alpha = forward(P, cfg, x, train=True).alpha
        return matting_loss(alpha, alpha_gt, trimap, fg, bg).total

    return f, inputs


def run_suite(families=("holistic", "o2o", "m2o"), tol: float = 1e-4, seed: int = 0,
              include_ops: bool = True, include_model: bool = True) -> list[CheckResult]:
    rng = ac.make_rng(seed)
    results: list[CheckResult] = []

    def check(name, f, inputs, max_entries=None):
        rep = ac.gradcheck(f, inputs, tol=tol, max_entries=max_entries, rng=rng)
        results.append(CheckResult(name, rep.worst, tol, rep.max_rel_error))

    if include_ops:
        for name, f, inputs in op_checks(rng):
            check(name, f, inputs)
    for fam_name in families:
        fam = Family(fam_name)
        if fam is Family.HOLISTIC_MAX:
            continue
        for cfg in FAMILY_CONFIGS[fam]:
            tag = f"{fam.value}{'_nl' if cfg.nonlinear else ''}{'_ctx' if cfg.context else ''}"
            check(f"index_{tag}", *_block_check(cfg, rng))
        nl_ctx = IndexBlockConfig(fam, True, True, channels=4)
        check(f"ip_iu_composite_{fam.value}", *_block_check(nl_ctx, rng, composite=True))
        if include_model:
            check(f"model_{fam.value}", *tiny_model_check("index", fam, rng), max_entries=12)
    if include_model:
        for mode in ("maxpool", "bilinear"):
            check(f"model_{mode}", *tiny_model_check(mode, None, rng), max_entries=12)
    return results


@contextlib.contextmanager
def corrupted_sigmoid_backward():
    """Swap in a sigmoid whose backward drops the (1 - s) factor (negative control)."""
    orig = ac.sigmoid

    def bad_sigmoid(x: Value) -> Value:
        s = orig(Value(x.data, dtype=x.dtype)).data
        return ac._make(s, (x,), lambda g: (g * s,))

    ac.sigmoid = bad_sigmoid
    try:
        yield
    finally:
        ac.sigmoid = orig
