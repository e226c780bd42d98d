"""On-disk formats: PPM/PGM images, key=value run configs, IDXN checkpoints."""

from __future__ import annotations

import dataclasses
import os
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .arraycore import AdamState, ConfigError
from .mattenet import ModelConfig, Schedule, TrainState, build_model
from . import arraycore as ac
from .synthdata import AugmentConfig, MattingSample

MAGIC = b"IDXN"
VERSION = 1


class IntegrityError(RuntimeError):
    """Corrupted or incompatible file."""


# ----------------------------------------------------------------------------
# images


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while True:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise IntegrityError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    try:
        w, pos = _read_token(buf, pos)
        h, pos = _read_token(buf, pos)
        maxval, pos = _read_token(buf, pos)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise IntegrityError(f"{path}: malformed header") from None
    if maxval != 255:
        raise IntegrityError(f"{path}: only maxval 255 is supported")
    ch = 3 if magic == b"P6" else 1
    data = buf[pos + 1 : pos + 1 + w * h * ch]
    if len(data) != w * h * ch:
        raise IntegrityError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, ch) if ch == 3 else \
        np.frombuffer(data, dtype=np.uint8).reshape(h, w)
    return arr.copy()


def write_pnm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ConfigError(f"images must be uint8, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ConfigError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def alpha_to_u8(alpha: np.ndarray) -> np.ndarray:
    return np.round(np.clip(alpha, 0, 1) * 255).astype(np.uint8)


def u8_to_alpha(a: np.ndarray) -> np.ndarray:
    return (a.astype(np.float32) / np.float32(255)).astype(np.float32)


def decode_trimap(t: np.ndarray) -> np.ndarray:
    """Any value in [1, 254] reads as unknown (128)."""
    out = np.where(t >= 255, 255, 0).astype(np.uint8)
    out[(t > 0) & (t < 255)] = 128
    return out


_SAMPLE_PARTS = ("image", "fg", "bg", "alpha", "trimap")


def write_sample(directory, index: int, s: MattingSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = d / f"{index:05d}"
    write_pnm(f"{stem}_image.ppm", s.image)
    write_pnm(f"{stem}_fg.ppm", s.fg)
    write_pnm(f"{stem}_bg.ppm", s.bg)
    write_pnm(f"{stem}_alpha.pgm", alpha_to_u8(s.alpha))
    write_pnm(f"{stem}_trimap.pgm", s.trimap)


def read_sample(directory, index: int) -> MattingSample:
    stem = Path(directory) / f"{index:05d}"
    return MattingSample(
        image=read_pnm(f"{stem}_image.ppm"),
        trimap=decode_trimap(read_pnm(f"{stem}_trimap.pgm")),
        alpha=u8_to_alpha(read_pnm(f"{stem}_alpha.pgm")),
        fg=read_pnm(f"{stem}_fg.ppm"),
        bg=read_pnm(f"{stem}_bg.ppm"),
    )


def list_samples(directory) -> list[int]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no such data directory: {directory}")
    return sorted(int(p.name[:5]) for p in d.glob("*_image.ppm"))


def read_dataset(directory) -> list[MattingSample]:
    return [read_sample(directory, i) for i in list_samples(directory)]


# ----------------------------------------------------------------------------
# run config


@dataclass(frozen=True)
class RunConfig:
    upsampling: str = "index"
    family: str = "m2o"
    nonlinear: bool = True
    context: bool = True
    expansion: int = 2
    bn_trainable: bool = True
    stages: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 128)
    fusion: str = "concat"
    context_block: bool = False
    seed: int = 0
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3
    decay_at: tuple[float, ...] = (0.6, 0.85)
    checkpoint_every: int = 500
    data_seed: int = 1000
    train_count: int = 2000
    base_size: int = 96
    crop: int = 64
    flip_prob: float = 0.5
    scale_min: float = 0.75
    scale_max: float = 1.5
    dilation_min: int = 1
    dilation_max: int = 15
    data_dir: str = ""
    out_dir: str = "run"

    def model_config(self) -> ModelConfig:
        return ModelConfig(stages=self.stages, stage_channels=self.channels, upsampling=self.upsampling,
                           family=self.family, nonlinear=self.nonlinear, context=self.context,
                           expansion=self.expansion, bn_trainable=self.bn_trainable, fusion=self.fusion,
                           context_block=self.context_block)

    def schedule(self) -> Schedule:
        return Schedule(steps=self.steps, batch=self.batch, lr=self.lr, decay_at=self.decay_at,
                        seed=self.seed, checkpoint_every=self.checkpoint_every)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(crop=self.crop, flip_prob=self.flip_prob, scale_range=(self.scale_min, self.scale_max),
                             trimap_dilation_range=(self.dilation_min, self.dilation_max))


def _parse_field(f: dataclasses.Field, raw: str):
    default = f.default
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc


def _format_field(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_field(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_field(known[key], raw)
    cfg = RunConfig(**values)
    cfg.model_config()  # validate
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format_field(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


# ----------------------------------------------------------------------------
# checkpoints


def encode_records(records: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(records))
    for name, arr in records.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise ConfigError(f"record {name!r} must be float32, got {a.dtype}")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        out += np.ascontiguousarray(a, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode_records(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise IntegrityError("not an IDXN checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise IntegrityError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise IntegrityError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(dims)
            pos += 4 * size
            if name in out:
                raise IntegrityError(f"duplicate record {name!r}")
            out[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"malformed checkpoint: {exc}") from exc
    if pos != len(buf) - 4:
        raise IntegrityError("trailing bytes after the last record")
    return out


def state_records(state: TrainState) -> dict[str, np.ndarray]:
    rec: dict[str, np.ndarray] = {}
    for k, v in state.params.params.items():
        rec[f"param/{k}"] = v.data
    for k, st in state.params.bn.items():
        rec[f"bn/{k}/mean"] = st.mean
        rec[f"bn/{k}/var"] = st.var
    for k in state.opt.m:
        rec[f"adam/m/{k}"] = state.opt.m[k]
        rec[f"adam/v/{k}"] = state.opt.v[k]
    rec["adam/step"] = np.array(state.opt.step, dtype=np.float32)
    rec["train/step"] = np.array(state.step, dtype=np.float32)
    return rec


def save_checkpoint(path, state: TrainState) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_records(state_records(state)))
    os.replace(tmp, path)


def load_checkpoint(path, cfg: ModelConfig) -> TrainState:
    """Rebuild a model for ``cfg`` and fill it from the checkpoint at ``path``."""
    rec = decode_records(Path(path).read_bytes())
    P = build_model(cfg, ac.make_rng(0))
    for k, v in P.params.items():
        key = f"param/{k}"
        if key not in rec:
            raise IntegrityError(f"checkpoint lacks parameter {k!r}")
        if rec[key].shape != v.shape:
            raise IntegrityError(f"parameter {k!r} has shape {rec[key].shape}, model expects {v.shape}")
        v.data = rec[key].copy()
    expected = {f"param/{k}" for k in P.params}
    extra = {k for k in rec if k.startswith("param/")} - expected
    if extra:
        raise IntegrityError(f"checkpoint has parameters unknown to this model: {sorted(extra)[:3]}")
    for k, st in P.bn.items():
        if f"bn/{k}/mean" not in rec or f"bn/{k}/var" not in rec:
            raise IntegrityError(f"checkpoint lacks running statistics for {k!r}")
        st.mean[:] = rec[f"bn/{k}/mean"]
        st.var[:] = rec[f"bn/{k}/var"]
    opt = AdamState(step=int(rec.get("adam/step", np.float32(0))))
    for key, arr in rec.items():
        if key.startswith("adam/m/"):
            name = key[len("adam/m/"):]
            opt.m[name] = arr.copy()
            opt.v[name] = rec[f"adam/v/{name}"].copy()
    return TrainState(P, opt, int(rec.get("train/step", np.float32(0))))
