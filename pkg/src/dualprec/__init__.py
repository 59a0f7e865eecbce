"""Dual-precision quantized network training: one weight set, two bit-widths,
precision switching by attaching or stripping a single bit-plane."""

from .config import ConfigError, TrainConfig
from .engine import EngineError, Network, accuracy, softmax_cross_entropy
from .optim import Adam
from .packstore import (
    ModelState,
    PackError,
    pack,
    switch_precision,
    unpack,
)
from .quant import (
    LevelTensor,
    QuantSpec,
    ScaleRule,
    UpscaleBits,
    compute_scale,
    dequantize,
    quantize_indices,
    ste_weight_gradient,
    truncate_indices,
    upscale_indices,
    upscale_scale,
)
from .trainer import (
    DualPrecisionTrainer,
    DualWeight,
    PhasePlan,
    binarize_upscale,
    combine_hypotheses,
    init_dual_weight,
    normalize_index_params,
    run_baseline_training,
    run_training,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ConfigError",
    "DualPrecisionTrainer",
    "DualWeight",
    "EngineError",
    "LevelTensor",
    "ModelState",
    "Network",
    "PackError",
    "PhasePlan",
    "QuantSpec",
    "ScaleRule",
    "TrainConfig",
    "UpscaleBits",
    "accuracy",
    "binarize_upscale",
    "combine_hypotheses",
    "compute_scale",
    "dequantize",
    "init_dual_weight",
    "normalize_index_params",
    "pack",
    "quantize_indices",
    "run_baseline_training",
    "run_training",
    "softmax_cross_entropy",
    "ste_weight_gradient",
    "switch_precision",
    "truncate_indices",
    "unpack",
    "upscale_indices",
    "upscale_scale",
]
