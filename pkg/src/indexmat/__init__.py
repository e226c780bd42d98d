"""Learned index functions for encoder-decoder image matting, on a small numpy autodiff core."""

from .arraycore import ConfigError, ShapeError, Value, gradcheck, no_grad
from .indexnet import Family, IndexBlockConfig, build_index_block, index_forward
from .mattenet import ModelConfig, Schedule, build_model, fit, forward, predict
from .metrics import MetricReport, evaluate
from .sampler import indexed_pool, indexed_upsample

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ShapeError", "Value", "gradcheck", "no_grad",
    "Family", "IndexBlockConfig", "build_index_block", "index_forward",
    "ModelConfig", "Schedule", "build_model", "fit", "forward", "predict",
    "MetricReport", "evaluate", "indexed_pool", "indexed_upsample",
]
