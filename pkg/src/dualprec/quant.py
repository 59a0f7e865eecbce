"""Quantization math for dual-precision weights.

A quantized tensor is a pair (indices, scale): signed integer level indices
times a positive per-tensor step size. A b-bit tensor is promoted to b+1 bits
by doubling every index and appending a binary up-scaling bit at the least
significant position, and demoted again by an arithmetic right shift. The two
precisions therefore share their b high-order bits by construction, and
switching between them never touches the shared bits.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

MIN_BITS = 2
MAX_BITS = 8

# Step size used when a tensor is entirely zero and max|w| gives no range.
ZERO_TENSOR_SCALE = 1.0

INDEX_DTYPE = np.int16


class ScaleRule(Enum):
    """Rule tying the (b+1)-bit scale to the b-bit scale.

    LEVEL_SPAN keeps the span of all 2^b codes constant:
        (2^b - 1) * s_b = (2^(b+1) - 1) * s_{b+1}
    RANGE_EXACT keeps the largest positive representable value constant:
        p_b * s_b = p_{b+1} * s_{b+1},  p = 2^(b-1) - 1
    """

    LEVEL_SPAN = "level-span"
    RANGE_EXACT = "range-exact"


@dataclass(frozen=True)
class QuantSpec:
    """Bit-width, derived clip bounds, and scale rule for one quantized tensor."""

    bits: int
    scale_rule: ScaleRule = ScaleRule.LEVEL_SPAN

    def __post_init__(self) -> None:
        if not isinstance(self.bits, int) or not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(
                f"bit-width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {self.bits!r}"
            )

    @property
    def lower_clip(self) -> int:
        """Most negative representable index, -2^(b-1)."""
        return -(1 << (self.bits - 1))

    @property
    def upper_clip(self) -> int:
        """Most positive representable index, 2^(b-1) - 1."""
        return (1 << (self.bits - 1)) - 1

    @property
    def num_levels(self) -> int:
        return 1 << self.bits

    def up(self) -> "QuantSpec":
        """Spec for the same tensor after appending one up-scaling bit."""
        return QuantSpec(self.bits + 1, self.scale_rule)

    def down(self) -> "QuantSpec":
        """Spec for the same tensor after stripping the up-scaling bit."""
        return QuantSpec(self.bits - 1, self.scale_rule)


@dataclass(frozen=True)
class LevelTensor:
    """Integer level indices plus the positive scale mapping them to reals."""

    indices: np.ndarray
    spec: QuantSpec
    scale: float

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices)
        if not np.issubdtype(idx.dtype, np.integer):
            raise TypeError("indices must be an integer array")
        object.__setattr__(self, "indices", idx.astype(INDEX_DTYPE, copy=False))
        object.__setattr__(self, "scale", float(self.scale))
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("invalid scale")
        if idx.size:
            lo, hi = self.spec.lower_clip, self.spec.upper_clip
            if idx.min() < lo or idx.max() > hi:
                raise ValueError(f"index out of clip range [{lo}, {hi}]")

    @property
    def shape(self) -> tuple:
        return self.indices.shape

    def distinct_levels(self) -> int:
        """Number of distinct index values actually used."""
        return int(np.unique(self.indices).size)


@dataclass(frozen=True)
class UpscaleBits:
    """One binary up-scaling bit per weight element."""

    lam: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.lam)
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError("up-scaling bits must be 0 or 1")
        object.__setattr__(self, "lam", arr.astype(np.uint8, copy=False))

    @property
    def shape(self) -> tuple:
        return self.lam.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero."""
    x = np.asarray(x)
    return np.trunc(x + np.copysign(np.asarray(0.5, dtype=x.dtype), x))


def compute_scale(weights: np.ndarray, spec: QuantSpec) -> float:
    """Step size max(|w|) / (2^(b-1) - 1) for the given bit-width.

    An all-zero tensor has no usable range; it gets the fixed fallback scale
    so downstream division stays well defined (its indices are all zero
    regardless of scale).
    """
    w = np.asarray(weights)
    if w.size == 0:
        raise ValueError("empty weight tensor")
    peak = float(np.max(np.abs(w)))
    if peak == 0.0:
        return ZERO_TENSOR_SCALE
    return peak / spec.upper_clip


def quantize_indices(weights: np.ndarray, scale: float, spec: QuantSpec) -> LevelTensor:
    """Map real weights to clipped integer levels: clip(round(w/scale), n, p)."""
    scale = float(scale)
    if not (np.isfinite(scale) and scale > 0):
        raise ValueError("invalid scale")
    w = np.asarray(weights)
    ratio = w / scale
    idx = round_half_away(ratio)
    idx = np.clip(idx, spec.lower_clip, spec.upper_clip).astype(INDEX_DTYPE)
    return LevelTensor(idx, spec, scale)


def dequantize(levels: LevelTensor) -> np.ndarray:
    """Real-valued tensor indices * scale."""
    return levels.indices * levels.scale


def upscale_scale(scale_b: float, bits: int, rule: ScaleRule) -> float:
    """Scale of the (b+1)-bit tensor derived from the b-bit scale."""
    scale_b = float(scale_b)
    if not (np.isfinite(scale_b) and scale_b > 0):
        raise ValueError("invalid scale")
    if rule is ScaleRule.LEVEL_SPAN:
        return (2**bits - 1) * scale_b / (2 ** (bits + 1) - 1)
    return (2 ** (bits - 1) - 1) * scale_b / (2**bits - 1)


def downscale_scale(scale_hi: float, bits_low: int, rule: ScaleRule) -> float:
    """Inverse of :func:`upscale_scale`: recover the b-bit scale from b+1."""
    scale_hi = float(scale_hi)
    if not (np.isfinite(scale_hi) and scale_hi > 0):
        raise ValueError("invalid scale")
    if rule is ScaleRule.LEVEL_SPAN:
        return (2 ** (bits_low + 1) - 1) * scale_hi / (2**bits_low - 1)
    return (2**bits_low - 1) * scale_hi / (2 ** (bits_low - 1) - 1)


def upscale_indices(levels: LevelTensor, bits_up: UpscaleBits) -> LevelTensor:
    """Branch every b-bit level into two (b+1)-bit levels: I' = 2*I + lam.

    The output provably stays inside the (b+1)-bit clip range: for
    I in [-2^(b-1), 2^(b-1)-1] and lam in {0,1}, 2*I + lam lies in
    [-2^b, 2^b - 1], so no clipping is applied.
    """
    if levels.spec.bits >= MAX_BITS:
        raise ValueError(f"cannot up-scale beyond {MAX_BITS} bits")
    if levels.indices.shape != bits_up.lam.shape:
        raise ValueError("shape mismatch between level indices and up-scaling bits")
    idx_hi = 2 * levels.indices.astype(INDEX_DTYPE) + bits_up.lam
    scale_hi = upscale_scale(levels.scale, levels.spec.bits, levels.spec.scale_rule)
    return LevelTensor(idx_hi.astype(INDEX_DTYPE), levels.spec.up(), scale_hi)


def truncate_indices(levels_hi: LevelTensor) -> tuple[LevelTensor, UpscaleBits]:
    """Strip the up-scaling bit: I = I_hi >> 1, lam = I_hi - 2*I.

    Exact inverse of :func:`upscale_indices` on the indices; the low scale is
    recovered by inverting the scale rule (floating-point, so exact only up
    to rounding of the real representation).
    """
    if levels_hi.spec.bits <= MIN_BITS:
        raise ValueError(f"cannot truncate below {MIN_BITS} bits")
    idx_lo = levels_hi.indices >> 1  # arithmetic shift: floor division
    lam = (levels_hi.indices - 2 * idx_lo).astype(np.uint8)
    scale_lo = downscale_scale(
        levels_hi.scale, levels_hi.spec.bits - 1, levels_hi.spec.scale_rule
    )
    return (
        LevelTensor(idx_lo.astype(INDEX_DTYPE), levels_hi.spec.down(), scale_lo),
        UpscaleBits(lam),
    )


def ste_weight_gradient(
    upstream_grad: np.ndarray,
    weights: np.ndarray,
    scale: float,
    spec: QuantSpec,
) -> np.ndarray:
    """Straight-through gradient for the quantizer.

    Passes the upstream gradient through unchanged where w/scale lies inside
    the clip range [n, p] and zeroes it where the quantizer saturates.
    """
    g = np.asarray(upstream_grad)
    w = np.asarray(weights)
    if g.shape != w.shape:
        raise ValueError("shape mismatch between gradient and weights")
    ratio = w / float(scale)
    mask = (ratio >= spec.lower_clip) & (ratio <= spec.upper_clip)
    return g * mask.astype(g.dtype)
