"""Unbiased stochastic uniform quantization of gradient vectors.

A vector is scaled by its infinity norm onto [-1, 1] and each entry is
randomly rounded to one of the two surrounding levels of a uniform grid
with 2**bits points, with probabilities chosen so the rounding is unbiased.
The norm itself travels alongside the indices at 64-bit precision, which
is where the fixed header in :func:`payload_bits` comes from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_HEADER_BITS = 64


@dataclass(frozen=True)
class QuantizedGradient:
    """Wire form of one digital upload: bit width, norm, per-entry level indices."""

    bits: int
    inf_norm: float
    level_indices: np.ndarray

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if self.inf_norm < 0:
            raise ValueError("inf_norm must be nonnegative")


def quantize(g, bits: int, rng: np.random.Generator) -> QuantizedGradient:
    """Stochastically round ``g`` onto the signed uniform grid with 2**bits levels.

    Each normalized entry in [level_j, level_{j+1}] rounds up with probability
    (x - level_j) / (level_{j+1} - level_j), which makes the decoded value an
    unbiased estimate of the input. An all-zero vector encodes with inf_norm 0.
    """
    g = np.asarray(g, dtype=float)
    if bits < 1:
        raise ValueError("bits must be >= 1")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient entries must be finite")
    inf_norm = float(np.max(np.abs(g))) if g.size else 0.0
    if inf_norm == 0.0:
        return QuantizedGradient(bits, 0.0, np.zeros(g.shape, dtype=np.int64))
    levels = 2.0 ** bits
    step = 2.0 / (levels - 1.0)
    # position on the grid, in [0, levels - 1]
    pos = (g / inf_norm + 1.0) / step
    lower = np.floor(pos)
    np.clip(lower, 0.0, levels - 2.0, out=lower)
    round_up = rng.random(g.shape) < (pos - lower)
    indices = lower.astype(np.int64) + round_up
    return QuantizedGradient(bits, inf_norm, indices)


def dequantize(q: QuantizedGradient) -> np.ndarray:
    """Decode level indices back to values: inf_norm * (-1 + 2k / (2**bits - 1))."""
    denom = 2.0 ** q.bits - 1.0
    return q.inf_norm * (-1.0 + 2.0 * q.level_indices / denom)


def payload_bits(bits: int, gradient_dim: int) -> int:
    """Upload size of one quantized gradient: 64 norm bits plus d * bits."""
    if bits < 1:
        raise ValueError("bits must be >= 1")
    if gradient_dim < 0:
        raise ValueError("gradient_dim must be nonnegative")
    return NORM_HEADER_BITS + gradient_dim * bits


def quant_mse_term(inf_norm: float, bits: int) -> float:
    """Per-entry worst-case quantization variance, (inf_norm / (2**bits - 1))**2."""
    if bits < 1:
        raise ValueError("bits must be >= 1")
    scaled = inf_norm / (2.0 ** bits - 1.0)
    return scaled * scaled
