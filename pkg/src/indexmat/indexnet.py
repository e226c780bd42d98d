"""Learned index functions: holistic and depthwise index networks.

An index block maps a feature map ``x`` (N,C,H,W) to raw logits of shape
(N,1,H,W) for holistic families or (N,C,H,W) for depthwise ones. Two
normalisations turn the logits into the encoder map (softmax over every 2x2
window) and the decoder map (sigmoid).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import arraycore as ac
from .arraycore import ConfigError, RunningStats, ShapeError, Value
from .indexfn import pixel_shuffle


class Family(str, enum.Enum):
    HOLISTIC = "holistic"
    DEPTHWISE_O2O = "o2o"
    DEPTHWISE_M2O = "m2o"
    HOLISTIC_MAX = "hmi"


@dataclass(frozen=True)
class IndexBlockConfig:
    family: Family = Family.HOLISTIC
    nonlinear: bool = False
    context: bool = False
    channels: int = 16
    k: int = 2
    expansion: int = 2
    bn_trainable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.k != 2:
            raise ConfigError(f"only k=2 index windows are supported, got k={self.k}")
        if self.expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {self.expansion}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")

    @property
    def holistic(self) -> bool:
        return self.family in (Family.HOLISTIC, Family.HOLISTIC_MAX)

    @property
    def groups(self) -> int:
        return self.channels if self.family is Family.DEPTHWISE_O2O else 1

    @property
    def kernel(self) -> int:
        return 2 * self.k if self.context else self.k

    @property
    def padding(self) -> int:
        # (H + 2p - 2k) / 2 + 1 == H / 2 needs p = k / 2 with the enlarged kernel
        return self.k // 2 if self.context else 0


@dataclass
class IndexMapPair:
    encoder_map: Value
    decoder_map: Value
    logits: Value | None = None


@dataclass
class IndexBlockParams:
    params: dict[str, Value] = field(default_factory=dict)
    bn: dict[str, RunningStats] = field(default_factory=dict)

    def count(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))


def context_receptive_field(cfg: IndexBlockConfig) -> int:
    if cfg.family is Family.HOLISTIC_MAX:
        return cfg.k
    return cfg.kernel


def index_param_count(cfg: IndexBlockConfig) -> int:
    """Closed-form parameter count of an index block."""
    C, kk, e = cfg.channels, cfg.kernel ** 2, cfg.expansion
    if cfg.family is Family.HOLISTIC_MAX:
        return 0
    if cfg.family is Family.HOLISTIC:
        if not cfg.nonlinear:
            return kk * C * 4 + 4
        hidden = e * C
        return kk * C * hidden + 2 * hidden + hidden * 4 + 4
    cin = 1 if cfg.family is Family.DEPTHWISE_O2O else C
    if not cfg.nonlinear:
        return 4 * (kk * cin * C + C)
    return 4 * (kk * cin * C + 2 * C + cin * C + C)


def _bn_params(p: IndexBlockParams, name: str, c: int, trainable: bool, dtype) -> None:
    p.params[f"{name}.gamma"] = Value(np.ones(c, dtype), requires_grad=trainable, dtype=dtype)
    p.params[f"{name}.beta"] = Value(np.zeros(c, dtype), requires_grad=trainable, dtype=dtype)
    p.bn[name] = RunningStats.fresh(c, dtype)


def _conv_params(p: IndexBlockParams, name: str, rng, co: int, ci: int, k: int,
                 bias: bool, zero: bool, dtype) -> None:
    shape = (co, ci, k, k)
    w = np.zeros(shape, dtype) if zero else ac.he_normal(rng, shape, ci * k * k, dtype)
    p.params[f"{name}.weight"] = ac.parameter(w)
    if bias:
        p.params[f"{name}.bias"] = ac.parameter(np.zeros(co, dtype))


def build_index_block(cfg: IndexBlockConfig, rng: np.random.Generator, zero_init: bool = False,
                      dtype=ac.DEFAULT_DTYPE) -> IndexBlockParams:
    """Allocate and initialise the parameters of one index block."""
    p = IndexBlockParams()
    C, k = cfg.channels, cfg.kernel
    fam = cfg.family
    if fam is Family.HOLISTIC_MAX:
        return p
    if fam is Family.HOLISTIC:
        if cfg.nonlinear:
            hidden = cfg.expansion * C
            _conv_params(p, "conv1", rng, hidden, C, k, False, zero_init, dtype)
            _bn_params(p, "bn1", hidden, cfg.bn_trainable, dtype)
            _conv_params(p, "conv2", rng, 4, hidden, 1, True, zero_init, dtype)
        else:
            _conv_params(p, "conv1", rng, 4, C, k, True, zero_init, dtype)
    elif fam in (Family.DEPTHWISE_O2O, Family.DEPTHWISE_M2O):
        cin = C // cfg.groups
        for col in range(4):
            if cfg.nonlinear:
                _conv_params(p, f"col{col}.conv1", rng, C, cin, k, False, zero_init, dtype)
                _bn_params(p, f"col{col}.bn1", C, cfg.bn_trainable, dtype)
                _conv_params(p, f"col{col}.conv2", rng, C, cin, 1, True, zero_init, dtype)
            else:
                _conv_params(p, f"col{col}.conv1", rng, C, cin, k, True, zero_init, dtype)
    else:
        raise ConfigError(f"unknown index family {fam!r}")
    return p


def index_logits(params: IndexBlockParams, cfg: IndexBlockConfig, x: Value, train: bool = True) -> Value:
    P = params.params
    s, pad = 2, cfg.padding
    if cfg.family is Family.HOLISTIC:
        if cfg.nonlinear:
            h = ac.conv2d(x, P["conv1.weight"], None, s, pad)
            h = ac.relu(ac.batchnorm2d(h, P["bn1.gamma"], P["bn1.beta"], params.bn["bn1"], train))
            z = ac.pointwise_conv(h, P["conv2.weight"], P["conv2.bias"])
        else:
            z = ac.conv2d(x, P["conv1.weight"], P["conv1.bias"], s, pad)
        return pixel_shuffle(z, 2)
    # the four column branches run as one convolution: conv1 emits channels in
    # (c, column) order, which is also the order the pixel shuffle expects
    g, C = cfg.groups, cfg.channels
    w1 = _interleave([P[f"col{i}.conv1.weight"] for i in range(4)])
    if not cfg.nonlinear:
        b1 = _interleave([P[f"col{i}.conv1.bias"] for i in range(4)])
        return pixel_shuffle(ac.conv2d(x, w1, b1, s, pad, groups=g), 2)
    h = ac.conv2d(x, w1, None, s, pad, groups=g)
    N, _, hh, ww = h.shape
    # column-major from here so each column's BN and 1x1 conv is a contiguous block
    h = ac.reshape(ac.transpose(ac.reshape(h, (N, C, 4, hh, ww)), (0, 2, 1, 3, 4)), (N, 4 * C, hh, ww))
    stats = [params.bn[f"col{i}.bn1"] for i in range(4)]
    joint = RunningStats(np.concatenate([r.mean for r in stats]), np.concatenate([r.var for r in stats]))
    gamma = ac.concat([P[f"col{i}.bn1.gamma"] for i in range(4)], axis=0)
    beta = ac.concat([P[f"col{i}.bn1.beta"] for i in range(4)], axis=0)
    h = ac.relu(ac.batchnorm2d(h, gamma, beta, joint, train))
    for i, r in enumerate(stats):
        r.mean[:] = joint.mean[i * C : (i + 1) * C]
        r.var[:] = joint.var[i * C : (i + 1) * C]
    w2 = ac.concat([P[f"col{i}.conv2.weight"] for i in range(4)], axis=0)
    b2 = ac.concat([P[f"col{i}.conv2.bias"] for i in range(4)], axis=0)
    z = ac.conv2d(h, w2, b2, groups=4 * g)
    z = ac.transpose(ac.reshape(z, (N, 4, C, hh, ww)), (0, 2, 1, 3, 4))
    return pixel_shuffle(ac.reshape(z, (N, 4 * C, hh, ww)), 2)


def _interleave(parts: list[Value]) -> Value:
    # [(C, ...)] x 4 -> (4C, ...) with row c*4 + i taken from parts[i][c]
    C = parts[0].shape[0]
    rest = parts[0].shape[1:]
    joined = ac.concat([ac.reshape(v, (C, 1) + rest) for v in parts], axis=1)
    return ac.reshape(joined, (4 * C,) + rest)


def index_forward(params: IndexBlockParams, cfg: IndexBlockConfig, x: Value, train: bool = True) -> IndexMapPair:
    """Predict the encoder/decoder index maps for ``x``."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"index block needs even spatial dims, got {H}x{W}")
    if C != cfg.channels:
        raise ShapeError(f"index block built for C={cfg.channels}, got input with C={C}")
    if cfg.family is Family.HOLISTIC_MAX:
        hard = Value(ac.window_onehot(ac.channel_max(x).data), dtype=x.dtype)
        return IndexMapPair(hard, hard, None)
    z = index_logits(params, cfg, x, train)
    # keep the decoder map strictly inside (0, 1) where the sigmoid rounds to 0 or 1
    eps = float(np.finfo(z.dtype).eps)
    return IndexMapPair(ac.window_softmax(z, 2), ac.clip(ac.sigmoid(z), eps, 1 - eps), z)
