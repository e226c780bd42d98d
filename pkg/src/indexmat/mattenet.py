"""Toy encoder-decoder matting network with pluggable down/upsampling.

Each encoder stage is two conv3x3-BN-ReLU layers followed by a 2x
downsampling; the matching decoder stage upsamples with the same stage's
indices, optionally concatenates the encoder feature, and applies two more
conv3x3-BN-ReLU layers. A conv3x3 + sigmoid head predicts alpha.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import arraycore as ac
from .arraycore import AdamState, ConfigError, RunningStats, Value
from .indexnet import Family, IndexBlockConfig, IndexBlockParams, build_index_block, index_forward
from .sampler import PoolingContext, indexed_pool, indexed_upsample

log = logging.getLogger(__name__)

UPSAMPLING_MODES = ("index", "maxpool", "bilinear")
FUSION_MODES = ("none", "concat")
EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 4
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    upsampling: str = "index"
    family: Family = Family.DEPTHWISE_M2O
    nonlinear: bool = True
    context: bool = True
    expansion: int = 2
    bn_trainable: bool = True
    fusion: str = "concat"
    context_block: bool = False
    input_channels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "family", Family(self.family))
        if self.stages != len(self.stage_channels):
            raise ConfigError(f"stages={self.stages} but {len(self.stage_channels)} stage channels given")
        if self.stages < 1:
            raise ConfigError("need at least one stage")
        if self.upsampling not in UPSAMPLING_MODES:
            raise ConfigError(f"upsampling must be one of {UPSAMPLING_MODES}, got {self.upsampling!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.input_channels != 4:
            raise ConfigError("input is RGB + trimap: input_channels must be 4")

    def index_config(self, stage: int) -> IndexBlockConfig:
        return IndexBlockConfig(self.family, self.nonlinear, self.context, self.stage_channels[stage],
                                expansion=self.expansion, bn_trainable=self.bn_trainable)


@dataclass
class ModelParams:
    params: dict[str, Value] = field(default_factory=dict)
    bn: dict[str, RunningStats] = field(default_factory=dict)
    blocks: list[IndexBlockParams | None] = field(default_factory=list)

    def count(self, prefix: str | None = None) -> int:
        return int(sum(v.data.size for k, v in self.params.items() if prefix is None or k.startswith(prefix)))

    def index_count(self) -> int:
        return self.count("enc") - self.backbone_count("enc")

    def backbone_count(self, prefix: str = "") -> int:
        return int(sum(v.data.size for k, v in self.params.items()
                       if k.startswith(prefix) and ".index." not in k))

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None


@dataclass
class ForwardTrace:
    alpha: Value
    contexts: list[PoolingContext]
    skips: list[Value]
    stage_inputs: list[tuple[int, int]]


@dataclass
class LossTerms:
    l_alpha: Value
    l_comp: Value
    total: Value
    unknown_pixels: int
    empty_mask: bool = False


# ----------------------------------------------------------------------------
# construction


def _conv(P: ModelParams, name: str, rng, co: int, ci: int, k: int, bias: bool) -> None:
    P.params[f"{name}.weight"] = ac.parameter(ac.he_normal(rng, (co, ci, k, k), ci * k * k))
    if bias:
        P.params[f"{name}.bias"] = ac.parameter(np.zeros(co, ac.DEFAULT_DTYPE))


def _bn(P: ModelParams, name: str, c: int) -> None:
    P.params[f"{name}.gamma"] = ac.parameter(np.ones(c, ac.DEFAULT_DTYPE))
    P.params[f"{name}.beta"] = ac.parameter(np.zeros(c, ac.DEFAULT_DTYPE))
    P.bn[name] = RunningStats.fresh(c)


def _conv_bn(P: ModelParams, name: str, rng, co: int, ci: int) -> None:
    _conv(P, f"{name}.conv", rng, co, ci, 3, False)
    _bn(P, f"{name}.bn", co)


def layer_param_counts(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter count per backbone layer (index blocks excluded)."""
    out: dict[str, int] = {}
    ch = cfg.stage_channels
    cin = cfg.input_channels
    for s, c in enumerate(ch):
        out[f"enc{s}.0"] = 9 * cin * c + 2 * c
        out[f"enc{s}.1"] = 9 * c * c + 2 * c
        cin = c
    if cfg.context_block:
        c = ch[-1]
        out["ctx.proj"] = c * c + c
        out["ctx.fuse"] = 2 * c * c + 2 * c
    for s in reversed(range(cfg.stages)):
        c = ch[s]
        cout = ch[s - 1] if s > 0 else ch[0]
        cin = 2 * c if cfg.fusion == "concat" else c
        out[f"dec{s}.0"] = 9 * cin * c + 2 * c
        out[f"dec{s}.1"] = 9 * c * cout + 2 * cout
    out["head"] = 9 * ch[0] + 1
    return out


def build_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    P = ModelParams()
    ch = cfg.stage_channels
    cin = cfg.input_channels
    for s, c in enumerate(ch):
        _conv_bn(P, f"enc{s}.0", rng, c, cin)
        _conv_bn(P, f"enc{s}.1", rng, c, c)
        cin = c
        if cfg.upsampling == "index":
            blk = build_index_block(cfg.index_config(s), rng)
            for k, v in blk.params.items():
                P.params[f"enc{s}.index.{k}"] = v
            for k, v in blk.bn.items():
                P.bn[f"enc{s}.index.{k}"] = v
            P.blocks.append(blk)
        else:
            P.blocks.append(None)
    if cfg.context_block:
        c = ch[-1]
        _conv(P, "ctx.proj", rng, c, c, 1, True)
        P.params["ctx.fuse.conv.weight"] = ac.parameter(ac.he_normal(rng, (c, 2 * c, 1, 1), 2 * c))
        _bn(P, "ctx.fuse.bn", c)
    for s in reversed(range(cfg.stages)):
        c = ch[s]
        cout = ch[s - 1] if s > 0 else ch[0]
        _conv_bn(P, f"dec{s}.0", rng, c, 2 * c if cfg.fusion == "concat" else c)
        _conv_bn(P, f"dec{s}.1", rng, cout, c)
    _conv(P, "head", rng, 1, ch[0], 3, True)
    return P


# ----------------------------------------------------------------------------
# forward


def _apply_conv_bn(P: ModelParams, name: str, x: Value, train: bool) -> Value:
    y = ac.conv2d(x, P.params[f"{name}.conv.weight"], None, 1, 1)
    y = ac.batchnorm2d(y, P.params[f"{name}.bn.gamma"], P.params[f"{name}.bn.beta"], P.bn[f"{name}.bn"], train)
    return ac.relu(y)


def pad_multiple(h: int, w: int, stages: int) -> tuple[int, int]:
    m = 2 ** stages
    return (-h) % m, (-w) % m


def forward(P: ModelParams, cfg: ModelConfig, x: Value, train: bool = True) -> ForwardTrace:
    """Run the network on an N,4,H,W image+trimap tensor."""
    if x.data.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise ac.ShapeError(f"expected N,{cfg.input_channels},H,W input, got {x.shape}")
    H, W = x.shape[2:]
    pb, pr = pad_multiple(H, W, cfg.stages)
    y = ac.pad2d(x, pb, pr)
    contexts: list[PoolingContext] = []
    skips: list[Value] = []
    sizes: list[tuple[int, int]] = []
    for s in range(cfg.stages):
        y = _apply_conv_bn(P, f"enc{s}.0", y, train)
        y = _apply_conv_bn(P, f"enc{s}.1", y, train)
        skips.append(y)
        sizes.append(y.shape[2:])
        if cfg.upsampling == "index":
            pair = index_forward(P.blocks[s], cfg.index_config(s), y, train)
            contexts.append(PoolingContext(pair.encoder_map, pair.decoder_map, y.shape[2:]))
            y = indexed_pool(y, pair.encoder_map)
        else:
            y, onehot = ac.maxpool2_with_indices(y)
            contexts.append(PoolingContext(onehot, onehot, skips[-1].shape[2:]))
    if cfg.context_block:
        g = ac.relu(ac.pointwise_conv(ac.global_avgpool(y), P.params["ctx.proj.weight"], P.params["ctx.proj.bias"]))
        g = ac.broadcast_spatial(g, *y.shape[2:])
        y = ac.pointwise_conv(ac.concat([y, g]), P.params["ctx.fuse.conv.weight"])
        y = ac.relu(ac.batchnorm2d(y, P.params["ctx.fuse.bn.gamma"], P.params["ctx.fuse.bn.beta"],
                                   P.bn["ctx.fuse.bn"], train))
    for s in reversed(range(cfg.stages)):
        if cfg.upsampling == "bilinear":
            y = ac.upsample_bilinear2(y)
        else:
            y = indexed_upsample(y, contexts[s].decoder_map)
        if cfg.fusion == "concat":
            y = ac.concat([y, skips[s]])
        y = _apply_conv_bn(P, f"dec{s}.0", y, train)
        y = _apply_conv_bn(P, f"dec{s}.1", y, train)
    logits = ac.conv2d(y, P.params["head.weight"], P.params["head.bias"], 1, 1)
    alpha = ac.crop2d(ac.sigmoid(logits), H, W)
    return ForwardTrace(alpha, contexts, skips, sizes)


def predict(P: ModelParams, cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Inference-mode alpha prediction for an N,4,H,W float array."""
    with ac.no_grad():
        return forward(P, cfg, Value(x.astype(ac.DEFAULT_DTYPE)), train=False).alpha.data


def finalize_alpha(alpha: np.ndarray, trimap: np.ndarray) -> np.ndarray:
    """Evaluation-ready matte: known trimap regions forced to 0/1, quantised to 8 bits."""
    a = np.where(trimap >= 255, 1.0, np.where(trimap <= 0, 0.0, alpha.astype(np.float64)))
    return np.round(np.clip(a, 0, 1) * 255) / 255


# ----------------------------------------------------------------------------
# losses


def unknown_mask(trimap: np.ndarray) -> np.ndarray:
    return (trimap > 0) & (trimap < 255)


def matting_loss(alpha_pred: Value, alpha_gt: np.ndarray, trimap: np.ndarray,
                 fg: np.ndarray | None, bg: np.ndarray | None) -> LossTerms:
    """Charbonnier alpha + composition losses over the trimap's unknown band.

    Shapes: alpha_pred/alpha_gt/trimap N,1,H,W; fg/bg N,3,H,W in [0, 255].
    """
    if fg is None or bg is None:
        raise ConfigError("composition loss needs the sample's foreground and background")
    dt = alpha_pred.dtype
    mask = unknown_mask(trimap).astype(dt)
    n = int(mask.sum())
    zero = ac.scalar_mul(ac.vsum(alpha_pred), 0.0)
    if n == 0:
        log.warning("empty unknown region: matting loss is zero")
        return LossTerms(zero, zero, zero, 0, True)
    eps2 = dt.type(EPS * EPS)
    diff = ac.sub(alpha_pred, Value(alpha_gt.astype(dt)))
    l_alpha = ac.scalar_mul(ac.vsum(ac.mul(ac.sqrt(ac.add(ac.square(diff), Value(eps2))), Value(mask))), 1.0 / n)
    fgv, bgv = fg.astype(dt), bg.astype(dt)
    comp_p = ac.add(ac.mul(alpha_pred, Value(fgv - bgv)), Value(bgv))
    comp_g = alpha_gt.astype(dt) * fgv + (1 - alpha_gt.astype(dt)) * bgv
    cdiff = ac.sub(comp_p, Value(comp_g))
    cerr = ac.mul(ac.sqrt(ac.add(ac.square(cdiff), Value(eps2))), Value(mask))
    l_comp = ac.scalar_mul(ac.vsum(cerr), 1.0 / (255.0 * 3 * n))
    return LossTerms(l_alpha, l_comp, ac.add(l_alpha, l_comp), n)


# ----------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class Schedule:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3
    decay_at: tuple[float, ...] = (0.6, 0.85)
    decay: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for frac in self.decay_at:
            if step >= int(math.floor(frac * self.steps)):
                lr *= self.decay
        return lr


@dataclass
class Batch:
    x: np.ndarray
    alpha: np.ndarray
    trimap: np.ndarray
    fg: np.ndarray
    bg: np.ndarray


def network_input(image: np.ndarray, trimap: np.ndarray) -> np.ndarray:
    """N,H,W,3 uint8 image + N,H,W trimap -> N,4,H,W float input."""
    img = image.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    tri = trimap.astype(np.float32)[:, None] / 255.0
    return np.concatenate([img, tri], axis=1)


def make_batch(samples: Sequence) -> Batch:
    img = np.stack([s.image for s in samples])
    tri = np.stack([s.trimap for s in samples])
    return Batch(
        x=network_input(img, tri),
        alpha=np.stack([s.alpha for s in samples]).astype(np.float32)[:, None],
        trimap=tri[:, None],
        fg=np.stack([s.fg for s in samples]).astype(np.float32).transpose(0, 3, 1, 2),
        bg=np.stack([s.bg for s in samples]).astype(np.float32).transpose(0, 3, 1, 2),
    )


def train_step(P: ModelParams, cfg: ModelConfig, batch: Batch, opt: AdamState, lr: float) -> dict[str, float]:
    P.zero_grad()
    trace = forward(P, cfg, Value(batch.x), train=True)
    loss = matting_loss(trace.alpha, batch.alpha, batch.trimap, batch.fg, batch.bg)
    loss.total.backward()
    if lr != 0.0:
        ac.adam_step(P.params, opt, lr)
    else:
        opt.step += 1
    return {"loss": loss.total.item(), "l_alpha": loss.l_alpha.item(), "l_comp": loss.l_comp.item(), "lr": lr}


def export_index_maps(trace: ForwardTrace) -> list[np.ndarray]:
    """Per-stage decoder index maps as N,H,W uint8 grayscale images.

    Depthwise maps are averaged over channels. Maps are min-max scaled to
    [0, 255]; a constant map becomes uniform mid-gray (or its own value
    when it already lies in [0, 1]).
    """
    out = []
    for ctx in trace.contexts:
        m = ctx.decoder_map.data.astype(np.float64).mean(axis=1)
        lo, hi = m.min(axis=(1, 2), keepdims=True), m.max(axis=(1, 2), keepdims=True)
        span = hi - lo
        scaled = np.where(span > 0, (m - lo) / np.where(span > 0, span, 1), np.clip(m, 0, 1))
        out.append(np.round(scaled * 255).astype(np.uint8))
    return out


def with_upsampling(cfg: ModelConfig, mode: str, **kw) -> ModelConfig:
    return replace(cfg, upsampling=mode, **kw)


@dataclass
class TrainState:
    params: ModelParams
    opt: AdamState
    step: int = 0


def init_state(cfg: ModelConfig, seed: int) -> TrainState:
    return TrainState(build_model(cfg, ac.make_rng(seed)), AdamState(), 0)


def batch_indices(schedule: Schedule, step: int, n: int) -> np.ndarray:
    """Batch drawn at ``step``; depends only on (seed, step) so resumes replay it."""
    return np.random.default_rng([schedule.seed & 0xFFFFFFFF, step, 7]).choice(n, schedule.batch, replace=False)


def fit(cfg: ModelConfig, dataset: Sequence, schedule: Schedule, state: TrainState | None = None,
        augment_cfg=None, on_step=None, on_checkpoint=None, stop_at: int | None = None) -> TrainState:
    """Train until ``schedule.steps``, resuming from ``state`` when given.

    ``dataset`` holds base samples; when ``augment_cfg`` is set each drawn
    sample is augmented with a generator keyed on (seed, step, slot).
    ``stop_at`` ends the run early without changing the schedule, which is
    what an interrupted run looks like.
    """
    from .synthdata import augment

    if len(dataset) < schedule.batch:
        raise ConfigError(f"dataset of {len(dataset)} samples is smaller than batch {schedule.batch}")
    state = state if state is not None else init_state(cfg, schedule.seed)
    end = schedule.steps if stop_at is None else min(stop_at, schedule.steps)
    while state.step < end:
        step = state.step
        idx = batch_indices(schedule, step, len(dataset))
        picked = [dataset[int(i)] for i in idx]
        if augment_cfg is not None:
            picked = [augment(s, augment_cfg, np.random.default_rng([schedule.seed & 0xFFFFFFFF, step, slot]))
                      for slot, s in enumerate(picked)]
        metrics = train_step(state.params, cfg, make_batch(picked), state.opt, schedule.lr_at(step))
        state.step += 1
        if on_step is not None:
            on_step(step, metrics)
        if on_checkpoint is not None and schedule.checkpoint_every and state.step % schedule.checkpoint_every == 0:
            on_checkpoint(state)
    return state


def evaluate_model(P: ModelParams, cfg: ModelConfig, samples: Sequence, batch: int = 16):
    """Per-sample MetricReports of the model's predictions."""
    from .metrics import evaluate

    reports = []
    for i in range(0, len(samples), batch):
        chunk = samples[i : i + batch]
        b = make_batch(chunk)
        alpha = predict(P, cfg, b.x)
        for s, a in zip(chunk, alpha):
            reports.append(evaluate(finalize_alpha(a[0], s.trimap), s.alpha, s.trimap))
    return reports
