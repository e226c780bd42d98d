import numpy as np
import pytest

from indexmat import arraycore as ac
from indexmat.arraycore import ConfigError, ShapeError, Value
from indexmat.indexnet import Family
from indexmat.mattenet import (
    ModelConfig, Schedule, build_model, export_index_maps, finalize_alpha, fit, forward, init_state,
    layer_param_counts, make_batch, matting_loss, predict, train_step,
)
from indexmat.synthdata import base_sample, dataset_sample, AugmentConfig

TINY = ModelConfig(stages=2, stage_channels=(4, 8), family=Family.DEPTHWISE_M2O)


def batch_of(n=2, seed=0, size=32):
    return make_batch([dataset_sample(seed, i, AugmentConfig(crop=size), base_size=48) for i in range(n)])


def params_snapshot(P):
    return {k: v.data.copy() for k, v in P.params.items()}


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(stages=3)
    with pytest.raises(ConfigError):
        ModelConfig(upsampling="deconv")
    with pytest.raises(ConfigError):
        ModelConfig(fusion="sum")


@pytest.mark.parametrize("cfg", [
    TINY,
    ModelConfig(stages=3, stage_channels=(4, 8, 8), fusion="none", context_block=True),
    ModelConfig(stages=1, stage_channels=(6,), upsampling="bilinear"),
])
def test_backbone_count_matches_closed_form(cfg):
    P = build_model(cfg, ac.make_rng(0))
    assert P.backbone_count() == sum(layer_param_counts(cfg).values())


def test_backbone_count_invariant_across_families_and_baselines():
    counts = set()
    for family in Family:
        for nonlinear in (False, True):
            cfg = ModelConfig(stages=2, stage_channels=(4, 8), family=family, nonlinear=nonlinear)
            counts.add(build_model(cfg, ac.make_rng(0)).backbone_count())
    for mode in ("maxpool", "bilinear"):
        counts.add(build_model(ModelConfig(stages=2, stage_channels=(4, 8), upsampling=mode),
                               ac.make_rng(0)).backbone_count())
    assert len(counts) == 1


@pytest.mark.parametrize("hw", [(32, 32), (37, 45), (5, 9)])
@pytest.mark.parametrize("mode", ["index", "maxpool", "bilinear"])
def test_forward_handles_arbitrary_sizes(hw, mode):
    cfg = ModelConfig(stages=2, stage_channels=(4, 8), upsampling=mode)
    P = build_model(cfg, ac.make_rng(0))
    x = np.random.default_rng(0).random((1, 4) + hw).astype(np.float32)
    a = predict(P, cfg, x)
    assert a.shape == (1, 1) + hw
    assert np.all((a >= 0) & (a <= 1))


def test_forward_rejects_wrong_input_channels():
    P = build_model(TINY, ac.make_rng(0))
    with pytest.raises(ShapeError):
        forward(P, TINY, Value(np.zeros((1, 3, 8, 8), np.float32)))


def test_loss_ignores_predictions_outside_unknown_region():
    b = batch_of()
    rng = np.random.default_rng(0)
    pred = rng.random(b.alpha.shape).astype(np.float32)
    outside = (b.trimap == 0) | (b.trimap == 255)
    assert outside.any()
    pred2 = pred.copy()
    pred2[outside] = rng.random(int(outside.sum()))
    l1 = matting_loss(Value(pred), b.alpha, b.trimap, b.fg, b.bg)
    l2 = matting_loss(Value(pred2), b.alpha, b.trimap, b.fg, b.bg)
    assert l1.total.item() == l2.total.item()
    assert l1.l_alpha.item() == l2.l_alpha.item() and l1.l_comp.item() == l2.l_comp.item()


def test_loss_hand_value():
    # one unknown pixel, error 0.5; F=255, B=0 so composition error 0.5*255 per channel
    pred = Value(np.full((1, 1, 1, 1), 0.5, np.float64), dtype=np.float64)
    gt = np.ones((1, 1, 1, 1))
    tri = np.full((1, 1, 1, 1), 128, np.uint8)
    fg, bg = np.full((1, 3, 1, 1), 255.0), np.zeros((1, 3, 1, 1))
    L = matting_loss(pred, gt, tri, fg, bg)
    assert L.l_alpha.item() == pytest.approx(0.5, abs=1e-9)
    assert L.l_comp.item() == pytest.approx(0.5, abs=1e-9)


def test_empty_unknown_region_gives_zero_loss():
    pred = Value(np.full((1, 1, 2, 2), 0.3, np.float32))
    tri = np.zeros((1, 1, 2, 2), np.uint8)
    L = matting_loss(pred, np.zeros((1, 1, 2, 2)), tri, np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 2)))
    assert L.empty_mask and L.total.item() == 0.0


def test_loss_requires_fg_and_bg():
    with pytest.raises(ConfigError):
        matting_loss(Value(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), None, None)


def test_zero_lr_step_leaves_parameters_unchanged():
    st = init_state(TINY, 0)
    before = params_snapshot(st.params)
    train_step(st.params, TINY, batch_of(), st.opt, 0.0)
    for k, v in st.params.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_schedule_decay():
    s = Schedule(steps=100, lr=1e-3)
    assert s.lr_at(0) == 1e-3
    assert s.lr_at(60) == pytest.approx(1e-4)
    assert s.lr_at(85) == pytest.approx(1e-5)


def test_training_is_deterministic_per_seed():
    data = [base_sample(3, i, 48) for i in range(6)]
    sched = Schedule(steps=10, batch=2, seed=5)
    a = fit(TINY, data, sched, augment_cfg=AugmentConfig(crop=32))
    b = fit(TINY, data, sched, augment_cfg=AugmentConfig(crop=32))
    for k in a.params.params:
        np.testing.assert_array_equal(a.params.params[k].data, b.params.params[k].data)


def test_fit_rejects_dataset_smaller_than_batch():
    with pytest.raises(ConfigError):
        fit(TINY, [base_sample(0, 0, 48)], Schedule(steps=1, batch=2))


def test_single_sample_overfit():
    cfg = ModelConfig(stages=2, stage_channels=(8, 16), fusion="concat")
    s = dataset_sample(11, 0, AugmentConfig(crop=32), base_size=48)
    b = make_batch([s])
    st = init_state(cfg, 0)
    losses = []
    for _ in range(500):
        losses.append(train_step(st.params, cfg, b, st.opt, 1e-3)["loss"])
        if losses[-1] < 0.02:
            break
    assert min(losses) < 0.02, f"final loss {losses[-1]:.4f}"


def test_export_index_maps():
    cfg = ModelConfig(stages=2, stage_channels=(4, 8), family=Family.HOLISTIC_MAX)
    P = build_model(cfg, ac.make_rng(0))
    x = np.random.default_rng(0).random((1, 4, 16, 12)).astype(np.float32)
    with ac.no_grad():
        tr = forward(P, cfg, Value(x), train=False)
    maps = export_index_maps(tr)
    assert [m.shape for m in maps] == [(1, 16, 12), (1, 8, 6)]
    for m in maps:
        assert set(np.unique(m)) <= {0, 255}


def test_export_constant_map_is_uniform_gray():
    cfg = ModelConfig(stages=1, stage_channels=(4,), family=Family.HOLISTIC)
    P = build_model(cfg, ac.make_rng(0))
    for k, v in P.params.items():
        if ".index." in k:
            v.data[:] = 0
    with ac.no_grad():
        tr = forward(P, cfg, Value(np.random.default_rng(0).random((1, 4, 8, 8)).astype(np.float32)), train=False)
    m = export_index_maps(tr)[0]
    assert np.all(m == m.flat[0])
    assert m.flat[0] == 128  # sigmoid(0) = 0.5


def test_finalize_alpha():
    a = np.array([[0.31, 0.31, 0.31]])
    t = np.array([[0, 128, 255]], np.uint8)
    np.testing.assert_allclose(finalize_alpha(a, t), [[0.0, 79 / 255, 1.0]])  # 0.31 * 255 = 79.05
