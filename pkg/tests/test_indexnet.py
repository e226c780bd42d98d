import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from indexmat import arraycore as ac
from indexmat.arraycore import ConfigError, ShapeError, Value
from indexmat.indexnet import (
    Family, IndexBlockConfig, build_index_block, context_receptive_field, index_forward,
    index_logits, index_param_count,
)

LEARNED = (Family.HOLISTIC, Family.DEPTHWISE_O2O, Family.DEPTHWISE_M2O)


def run(cfg, x, seed=0, train=False):
    blk = build_index_block(cfg, ac.make_rng(seed), dtype=np.float64)
    with ac.no_grad():
        return blk, index_forward(blk, cfg, Value(x, dtype=np.float64), train=train)


@pytest.mark.parametrize("family,expected", [
    (Family.HOLISTIC, 132), (Family.DEPTHWISE_O2O, 160), (Family.DEPTHWISE_M2O, 1056), (Family.HOLISTIC_MAX, 0),
])
def test_linear_counts_at_c8(family, expected):
    cfg = IndexBlockConfig(family, channels=8)
    assert index_param_count(cfg) == expected
    assert build_index_block(cfg, ac.make_rng(0)).count() == expected


def test_nonlinear_context_count_hand_value():
    # holistic, C=4, e=2, 4x4 kernel: 16*4*8 + 2*8 + 8*4 + 4
    cfg = IndexBlockConfig(Family.HOLISTIC, nonlinear=True, context=True, channels=4)
    assert index_param_count(cfg) == 512 + 16 + 32 + 4


@pytest.mark.parametrize("family,nonlinear,context,C", list(itertools.product(
    list(Family), (False, True), (False, True), (4, 8, 16, 32))))
def test_closed_form_count_matches_enumeration(family, nonlinear, context, C):
    cfg = IndexBlockConfig(family, nonlinear, context, channels=C)
    assert build_index_block(cfg, ac.make_rng(0)).count() == index_param_count(cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        IndexBlockConfig(Family.HOLISTIC, k=3)
    with pytest.raises(ConfigError):
        IndexBlockConfig(Family.HOLISTIC, expansion=0)
    with pytest.raises(ValueError):
        IndexBlockConfig("nope")


@pytest.mark.parametrize("family", LEARNED)
@pytest.mark.parametrize("nonlinear", (False, True))
@pytest.mark.parametrize("context", (False, True))
def test_output_shapes(family, nonlinear, context):
    cfg = IndexBlockConfig(family, nonlinear, context, channels=4)
    _, pair = run(cfg, np.random.default_rng(0).standard_normal((2, 4, 6, 8)))
    c_out = 1 if family is Family.HOLISTIC else 4
    assert pair.encoder_map.shape == pair.decoder_map.shape == (2, c_out, 6, 8)


def test_shape_errors():
    cfg = IndexBlockConfig(Family.HOLISTIC, channels=4)
    with pytest.raises(ShapeError):
        run(cfg, np.zeros((1, 4, 5, 4)))
    with pytest.raises(ShapeError):
        run(cfg, np.zeros((1, 3, 4, 4)))


def test_hmi_maps_are_hard_one_hot_of_channel_max():
    x = np.zeros((1, 2, 2, 2))
    x[0, 1, 1, 0] = 5.0
    x[0, 0, 0, 1] = 3.0
    _, pair = run(IndexBlockConfig(Family.HOLISTIC_MAX, channels=2), x)
    np.testing.assert_array_equal(pair.encoder_map.data[0, 0], [[0, 0], [1, 0]])
    assert pair.logits is None


def test_o2o_is_channel_local_and_m2o_is_not():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 4, 4, 4))
    x2 = x.copy()
    x2[0, 2] += rng.standard_normal((4, 4))
    for family, local in ((Family.DEPTHWISE_O2O, True), (Family.DEPTHWISE_M2O, False)):
        cfg = IndexBlockConfig(family, nonlinear=True, channels=4)
        blk = build_index_block(cfg, ac.make_rng(1), dtype=np.float64)
        with ac.no_grad():
            z1 = index_logits(blk, cfg, Value(x, dtype=np.float64), train=False).data
            z2 = index_logits(blk, cfg, Value(x2, dtype=np.float64), train=False).data
        changed = [not np.array_equal(z1[0, c], z2[0, c]) for c in range(4)]
        if local:
            assert changed == [False, False, True, False]
        else:
            assert all(changed)


@pytest.mark.parametrize("context", (False, True))
def test_context_widens_the_receptive_field(context):
    cfg = IndexBlockConfig(Family.HOLISTIC, context=context, channels=2)
    assert context_receptive_field(cfg) == (4 if context else 2)
    blk = build_index_block(cfg, ac.make_rng(0), dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((1, 2, 8, 8))
    x2 = x.copy()
    x2[0, :, 4, 4] += 1.0  # just outside the window at rows/cols 2..3
    with ac.no_grad():
        z1 = index_logits(blk, cfg, Value(x, dtype=np.float64), train=False).data
        z2 = index_logits(blk, cfg, Value(x2, dtype=np.float64), train=False).data
    assert (not np.array_equal(z1[0, 0, 2:4, 2:4], z2[0, 0, 2:4, 2:4])) == context


def test_frozen_bn_parameters_receive_no_update():
    cfg = IndexBlockConfig(Family.HOLISTIC, nonlinear=True, channels=4, bn_trainable=False)
    blk = build_index_block(cfg, ac.make_rng(0))
    assert not blk.params["bn1.gamma"].requires_grad
    pair = index_forward(blk, cfg, Value(np.random.default_rng(0).standard_normal((2, 4, 4, 4)).astype(np.float32)))
    ac.vsum(pair.decoder_map).backward()
    assert blk.params["bn1.gamma"].grad is None
    assert blk.params["conv1.weight"].grad is not None


@given(st.integers(0, 10 ** 6), st.sampled_from(LEARNED), st.booleans(), st.booleans(),
       st.sampled_from((1, 2, 3, 4)), st.floats(0.1, 20.0), st.booleans())
def test_normalisation_invariants(seed, family, nonlinear, context, C, scale, train):
    cfg = IndexBlockConfig(family, nonlinear, context, channels=C)
    x = np.random.default_rng(seed).standard_normal((2, C, 4, 6)) * scale
    _, pair = run(cfg, x, seed, train)
    enc, dec = pair.encoder_map.data, pair.decoder_map.data
    sums = enc.reshape(2, -1, 2, 2, 3, 2).sum(axis=(3, 5))
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)
    assert np.all(dec > 0) and np.all(dec < 1)
