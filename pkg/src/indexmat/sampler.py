"""Indexed pooling and indexed upsampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import arraycore as ac
from .arraycore import ConfigError, ShapeError, Value
from . import indexfn

# window area of the 2x2 pooling; undoes the averaging in avgpool2
POOL_CONSTANT = 4.0


@dataclass
class PoolingContext:
    encoder_map: Value
    decoder_map: Value
    input_hw: tuple[int, int]


def _check_map(x: Value, m: Value, what: str) -> None:
    if x.data.ndim != 4 or m.data.ndim != 4:
        raise ShapeError(f"{what}: expected NCHW operands, got {x.shape} and {m.shape}")
    for ax, (a, b) in enumerate(zip(x.shape, m.shape)):
        if a != b and b != 1:
            raise ShapeError(f"{what}: index map dim {ax} is {b}, feature map has {a}")


def indexed_pool(x: Value, encoder_map: Value, constant: float = POOL_CONSTANT) -> Value:
    """Index-weighted sum over each 2x2 window, computed as 4 * avgpool(x * map)."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"indexed_pool needs even spatial dims, got {H}x{W}")
    _check_map(x, encoder_map, "indexed_pool")
    return ac.scalar_mul(ac.avgpool2(ac.mul(x, encoder_map)), constant)


def indexed_upsample(d: Value, decoder_map: Value) -> Value:
    """``decoder_map * nearest_upsample(d)``."""
    N, C, h, w = d.shape
    if decoder_map.shape[2:] != (2 * h, 2 * w):
        raise ShapeError(f"decoder map spatial size {decoder_map.shape[2:]} != 2x {(h, w)}")
    up = ac.upsample_nn2(d)
    _check_map(up, decoder_map, "indexed_upsample")
    return ac.mul(decoder_map, up)


@dataclass
class EquivalenceReport:
    cases: int = 0
    failures: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.cases > 0 and not self.failures

    def record(self, name: str, passed: bool) -> None:
        if not passed:
            self.failures[name] = self.failures.get(name, 0) + 1


def pool_unpool_equivalence_suite(seed: int, n_cases: int = 100, constant: float = POOL_CONSTANT,
                                  shape: tuple = (2, 3, 6, 8)) -> EquivalenceReport:
    """Check IP/IU special cases against classical pooling, bitwise at float64."""
    if n_cases <= 0:
        raise ConfigError("equivalence suite needs at least one case")
    rng = ac.make_rng(seed)
    rep = EquivalenceReport()
    for _ in range(n_cases):
        x = rng.standard_normal(shape)
        xv = Value(x, dtype=np.float64)
        onehot = indexfn.apply_index_function(x, indexfn.IndexFunctionKind.MAX)
        ones = indexfn.apply_index_function(x, indexfn.IndexFunctionKind.AVG)
        uniform = Value(ones / POOL_CONSTANT, dtype=np.float64)

        ip_max = indexed_pool(xv, Value(onehot), constant).data
        rep.record("ip_onehot_eq_maxpool", np.array_equal(ip_max, ac.maxpool2_with_indices(xv)[0].data))
        ip_avg = indexed_pool(xv, uniform, constant).data
        rep.record("ip_uniform_eq_avgpool", np.array_equal(ip_avg, ac.avgpool2(xv).data))

        d = rng.standard_normal((shape[0], shape[1], shape[2] // 2, shape[3] // 2))
        dv = Value(d, dtype=np.float64)
        iu_max = indexed_upsample(dv, Value(onehot)).data
        rep.record("iu_onehot_eq_unpool", np.array_equal(iu_max, indexfn.reference_max_unpool(d, x)))
        iu_nn = indexed_upsample(dv, Value(ones)).data
        rep.record("iu_ones_eq_nearest", np.array_equal(iu_nn, ac.upsample_nn2(dv).data))

        soft = Value(ac.window_softmax(Value(rng.standard_normal(shape))).data, dtype=np.float64)
        route = indexed_pool(xv, soft, constant).data
        direct = indexfn.reference_indexed_pool(x, soft.data)
        rep.record("ip_route_eq_direct_sum", np.array_equal(route, direct))
        rep.cases += 1
    return rep
