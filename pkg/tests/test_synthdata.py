import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from indexmat import synthdata as sd
from indexmat.arraycore import ConfigError

IDENTITY = sd.AugmentConfig(crop=48, flip_prob=0.0, scale_range=(1.0, 1.0), trimap_dilation_range=None)


def test_composite_hand_values():
    fg = np.full((1, 1, 3), 200, np.uint8)
    bg = np.full((1, 1, 3), 100, np.uint8)
    for a, expect in ((1.0, 200), (0.0, 100), (0.5, 150)):
        assert sd.composite(fg, bg, np.array([[a]]))[0, 0, 0] == expect


def test_make_trimap_examples():
    assert np.all(sd.make_trimap(np.zeros((6, 6)), 3) == sd.TRIMAP_BG)
    binary = np.zeros((6, 6))
    binary[2:, 2:] = 1
    assert not np.any(sd.make_trimap(binary, 0) == sd.TRIMAP_UNKNOWN)
    one = np.zeros((9, 9))
    one[4, 4] = 0.5
    unknown = sd.make_trimap(one, 2) == sd.TRIMAP_UNKNOWN
    assert unknown.sum() == 25 and unknown[2:7, 2:7].all()
    with pytest.raises(ConfigError):
        sd.make_trimap(one, -1)


def test_foreground_softening_switch():
    _, hard = sd.gen_foreground(np.random.default_rng(0), 48, soft=False)
    assert set(np.unique(hard)) <= {0.0, 1.0}
    _, soft = sd.gen_foreground(np.random.default_rng(0), 48, soft=True)
    assert np.all(np.round(soft * 255) == soft * 255)


def test_fractional_fraction_over_100_seeds():
    fracs = []
    for seed in range(100):
        _, a = sd.gen_foreground(np.random.default_rng(seed), 96)
        fracs.append(((a > 0.05) & (a < 0.95)).mean())
    assert min(fracs) >= 0.05


def test_samples_are_pure_functions_of_seed_and_index():
    a, b = sd.dataset_sample(7, 3), sd.dataset_sample(7, 3)
    for k in ("image", "trimap", "alpha", "fg", "bg"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    assert not np.array_equal(a.alpha, sd.dataset_sample(7, 4).alpha)


def test_identity_augment_returns_the_sample():
    s = sd.base_sample(1, 0, size=48)
    out = sd.augment(s, IDENTITY, np.random.default_rng(0))
    for k in ("image", "trimap", "alpha", "fg", "bg"):
        np.testing.assert_array_equal(getattr(out, k), getattr(s, k))


def test_flip_twice_is_identity():
    s = sd.base_sample(2, 5, size=32)
    back = sd.flip(sd.flip(s))
    for k in ("image", "trimap", "alpha", "fg", "bg"):
        np.testing.assert_array_equal(getattr(back, k), getattr(s, k))


def test_crop_larger_than_scaled_sample_rejected():
    with pytest.raises(ConfigError):
        sd.augment(sd.base_sample(0, 0, 32), sd.AugmentConfig(crop=64, scale_range=(1.0, 1.5)),
                   np.random.default_rng(0))


@settings(max_examples=1000)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 10 ** 5))
def test_augmented_sample_invariants(seed, index):
    s = sd.dataset_sample(seed, index, base_size=72)
    assert s.image.shape == (64, 64, 3) and s.trimap.shape == (64, 64)
    assert sd.check_invariants(s) == []
    assert 1 <= s.dilation <= 15
