import numpy as np
import pytest
from hypothesis import given, strategies as st

from indexmat import metrics as M
from oracles import conn_oracle, grad_oracle

ALL = np.ones((8, 8), bool)


def conn_cases():
    # island of 0.6 cut off from the opaque block by a 0.2 moat in the prediction
    gt = np.zeros((8, 8))
    gt[:, :4], gt[:, 4:] = 1, 0.6
    pred = gt.copy()
    pred[:, 4] = 0.2
    yield "moat", pred, gt, 0.0032
    # two opaque blocks; only the larger one is the source
    gt = np.full((8, 8), 0.5)
    gt[:3, :3] = 1
    gt[6:, 6:] = 1
    pred = gt.copy()
    pred[3, :] = 0.3
    yield "two_sources", pred, gt, 0.0024
    # ramp with one broken pixel
    _, x = np.mgrid[0:8, 0:8]
    gt = np.clip(1 - x / 7, 0, 1)
    gt[:, 0] = 1
    pred = gt.copy()
    pred[4, 1] = 0.05
    yield "ramp", pred, gt, 0.0008571428571428572


@pytest.mark.parametrize("name,pred,gt,frozen", list(conn_cases()))
def test_conn_matches_brute_force_oracle(name, pred, gt, frozen):
    assert conn_oracle(pred, gt, ALL) == pytest.approx(frozen, abs=1e-12)
    assert M.conn_error(pred, gt, ALL) == pytest.approx(frozen, abs=1e-12)


@given(st.integers(0, 10 ** 6))
def test_conn_agrees_with_oracle_on_random_mattes(seed):
    rng = np.random.default_rng(seed)
    gt = np.round(rng.random((8, 8)) * 10) / 10
    gt[:3, :3] = 1
    pred = np.clip(gt + np.round(rng.normal(0, 0.2, (8, 8)) * 10) / 10, 0, 1)
    pred[:2, :2] = 1
    mask = rng.random((8, 8)) < 0.7
    assert M.conn_error(pred, gt, mask) == pytest.approx(conn_oracle(pred, gt, mask), abs=1e-12)


def test_conn_without_source_falls_back_to_sad_with_warning():
    gt = np.full((4, 4), 0.5)
    pred = np.full((4, 4), 0.25)
    with pytest.warns(RuntimeWarning):
        v = M.conn_error(pred, gt, np.ones((4, 4), bool))
    assert v == pytest.approx(16 * 0.25 / 1000)


def test_grad_matches_dense_oracle_on_step_edge():
    gt = np.zeros((5, 5))
    gt[:, 3:] = 1
    pred = np.zeros((5, 5))
    pred[:, 2:] = 1
    m = np.ones((5, 5), bool)
    frozen = 0.022812834330553214
    assert grad_oracle(pred, gt, m) == pytest.approx(frozen, rel=1e-12)
    assert M.grad_error(pred, gt, m) == pytest.approx(frozen, rel=1e-12)


def test_gaussian_kernel_is_antisymmetric_unit_norm():
    k = M.gaussian_derivative_kernel(1.4)
    assert k.shape == (9, 9)  # half-width ceil(3.62) = 4
    np.testing.assert_allclose((k ** 2).sum(), 1.0)
    np.testing.assert_allclose(k, -k[:, ::-1], atol=1e-15)


@given(st.integers(0, 10 ** 6), st.floats(-0.5, 0.5))
def test_grad_invariant_to_constant_offsets(seed, c):
    rng = np.random.default_rng(seed)
    pred, gt = rng.random((12, 12)), rng.random((12, 12))
    m = rng.random((12, 12)) < 0.5
    assert M.grad_error(pred + c, gt, m) == pytest.approx(M.grad_error(pred, gt, m), rel=1e-9, abs=1e-12)
    assert M.grad_error(pred + c, gt + c, m) == pytest.approx(M.grad_error(pred, gt, m), rel=1e-9, abs=1e-12)


@given(st.integers(0, 10 ** 6))
def test_identical_mattes_score_zero(seed):
    rng = np.random.default_rng(seed)
    a = np.round(rng.random((10, 10)) * 255) / 255
    a[:3] = 1
    tri = np.full((10, 10), 128, np.uint8)
    r = M.evaluate(a, a, tri)
    assert (r.sad, r.mse, r.grad, r.conn) == (0.0, 0.0, 0.0, 0.0)


def test_sad_mse_hand_values_and_mask():
    pred = np.array([[0.5, 1.0], [0.0, 0.25]])
    gt = np.array([[0.0, 1.0], [0.5, 0.25]])
    tri = np.array([[128, 255], [128, 0]], np.uint8)
    r = M.evaluate(pred, gt, tri)
    assert r.unknown_pixel_count == 2
    assert r.sad_raw == pytest.approx(1.0)
    assert r.sad == pytest.approx(1e-3)
    assert r.mse == pytest.approx(0.25)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        M.sad(np.zeros((3, 3)), np.zeros((3, 4)))


def test_mean_report():
    a = M.MetricReport(1, 1000, 0.1, 2, 3, 10)
    b = M.MetricReport(3, 3000, 0.3, 4, 5, 20)
    m = M.mean_report([a, b])
    assert (m.sad, m.mse, m.grad, m.conn, m.unknown_pixel_count) == (2, pytest.approx(0.2), 3, 4, 30)
    with pytest.raises(ValueError):
        M.mean_report([])
