import dataclasses
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from indexmat import formats as fm
from indexmat.arraycore import ConfigError
from indexmat.mattenet import ModelConfig, Schedule, fit, init_state
from indexmat.synthdata import AugmentConfig, base_sample, dataset_sample

TINY = ModelConfig(stages=2, stage_channels=(4, 8))


@given(st.integers(0, 10 ** 6), st.integers(1, 9), st.integers(1, 9), st.booleans())
def test_pnm_round_trip_bitwise(tmp_path_factory, seed, h, w, rgb):
    img = np.random.default_rng(seed).integers(0, 256, (h, w, 3) if rgb else (h, w), dtype=np.uint8)
    p = tmp_path_factory.mktemp("pnm") / ("x.ppm" if rgb else "x.pgm")
    fm.write_pnm(p, img)
    back = fm.read_pnm(p)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, img)


def test_pnm_header_with_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\xff")
    np.testing.assert_array_equal(fm.read_pnm(p), [[7, 255]])


@pytest.mark.parametrize("payload", [b"P3\n1 1\n255\n0 0 0", b"P5\n2 2\n255\n\x00", b"P5\nx 2\n255\n", b"P5\n1 1\n65535\n\x00\x00"])
def test_pnm_rejects_bad_files(tmp_path, payload):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(fm.IntegrityError):
        fm.read_pnm(p)


def test_pnm_rejects_non_uint8(tmp_path):
    with pytest.raises(ConfigError):
        fm.write_pnm(tmp_path / "f.pgm", np.zeros((2, 2), np.float32))


def test_trimap_decoding():
    np.testing.assert_array_equal(fm.decode_trimap(np.array([0, 1, 128, 254, 255], np.uint8)), [0, 128, 128, 128, 255])


def test_sample_round_trip(tmp_path):
    s = dataset_sample(4, 2, AugmentConfig(crop=32), base_size=48)
    fm.write_sample(tmp_path, 7, s)
    back = fm.read_sample(tmp_path, 7)
    for k in ("image", "trimap", "alpha", "fg", "bg"):
        np.testing.assert_array_equal(getattr(back, k), getattr(s, k))
    assert fm.list_samples(tmp_path) == [7]


def test_config_round_trip_and_errors():
    c = fm.RunConfig(seed=3, channels=(4, 8), stages=2, lr=2.5e-4, nonlinear=False, decay_at=(0.5,))
    assert fm.parse_config(fm.serialize_config(c)) == c
    assert fm.parse_config("") == fm.RunConfig()
    assert fm.parse_config("# comment\nseed = 9  # trailing\n").seed == 9
    with pytest.raises(ConfigError, match="unknown key"):
        fm.parse_config("colour = red\n")
    with pytest.raises(ConfigError):
        fm.parse_config("steps = many\n")
    with pytest.raises(ConfigError):
        fm.parse_config("nonlinear = maybe\n")
    with pytest.raises(ConfigError):
        fm.parse_config("stages = 3\n")
    with pytest.raises(ConfigError):
        fm.parse_config("no equals sign\n")


@given(st.integers(0, 10 ** 6), st.integers(1, 200), st.booleans())
def test_config_round_trip_property(seed, steps, nl):
    rng = np.random.default_rng(seed)
    c = fm.RunConfig(seed=seed, steps=steps, nonlinear=nl, lr=float(rng.random()), out_dir=f"r{seed}",
                     scale_min=float(rng.uniform(0.5, 1)))
    assert fm.parse_config(fm.serialize_config(c)) == c


def test_records_round_trip_bitwise():
    rng = np.random.default_rng(0)
    rec = {"a": rng.standard_normal((2, 3)).astype(np.float32), "scalar": np.array(1.5, np.float32),
           "nan": np.array([np.nan, np.inf, -0.0], np.float32)}
    back = fm.decode_records(fm.encode_records(rec))
    assert list(back) == list(rec)
    for k in rec:
        assert back[k].tobytes() == rec[k].tobytes() and back[k].shape == rec[k].shape


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_records_reject_corruption_and_version():
    buf = bytearray(fm.encode_records({"w": np.ones(4, np.float32)}))
    flipped = bytes(buf[:20]) + bytes([buf[20] ^ 1]) + bytes(buf[21:])
    with pytest.raises(fm.IntegrityError, match="CRC"):
        fm.decode_records(flipped)
    v2 = _with_crc(fm.MAGIC + struct.pack("<II", 2, 0))
    with pytest.raises(fm.IntegrityError, match="version"):
        fm.decode_records(v2)
    with pytest.raises(fm.IntegrityError):
        fm.decode_records(b"JUNKJUNKJUNKJUNK")
    dup = fm.MAGIC + struct.pack("<II", 1, 2)
    for _ in range(2):
        dup += struct.pack("<I", 1) + b"x" + struct.pack("<I", 0) + np.float32(1).tobytes()
    with pytest.raises(fm.IntegrityError, match="duplicate"):
        fm.decode_records(_with_crc(dup))
    with pytest.raises(ConfigError):
        fm.encode_records({"d": np.zeros(2)})


def test_checkpoint_round_trip_preserves_every_parameter(tmp_path):
    st = init_state(TINY, 3)
    fm.save_checkpoint(tmp_path / "m.idxn", st)
    back = fm.load_checkpoint(tmp_path / "m.idxn", TINY)
    assert set(back.params.params) == set(st.params.params)
    for k, v in st.params.params.items():
        assert back.params.params[k].data.tobytes() == v.data.tobytes()


def test_checkpoint_for_a_different_model_is_rejected(tmp_path):
    fm.save_checkpoint(tmp_path / "m.idxn", init_state(TINY, 0))
    with pytest.raises(fm.IntegrityError):
        fm.load_checkpoint(tmp_path / "m.idxn", ModelConfig(stages=2, stage_channels=(4, 16)))
    with pytest.raises(fm.IntegrityError):
        fm.load_checkpoint(tmp_path / "m.idxn", dataclasses.replace(TINY, context_block=True))


def test_resumed_training_is_bit_identical(tmp_path):
    data = [base_sample(8, i, 48) for i in range(6)]
    aug = AugmentConfig(crop=32)
    full = fit(TINY, data, Schedule(steps=8, batch=2, seed=1), augment_cfg=aug)
    half = fit(TINY, data, Schedule(steps=8, batch=2, seed=1), augment_cfg=aug, stop_at=4)
    assert half.step == 4
    fm.save_checkpoint(tmp_path / "half.idxn", half)
    resumed = fit(TINY, data, Schedule(steps=8, batch=2, seed=1), fm.load_checkpoint(tmp_path / "half.idxn", TINY),
                  augment_cfg=aug)
    assert resumed.step == full.step == 8
    for k, v in full.params.params.items():
        assert resumed.params.params[k].data.tobytes() == v.data.tobytes(), k
    for k, s in full.params.bn.items():
        np.testing.assert_array_equal(resumed.params.bn[k].mean, s.mean)
