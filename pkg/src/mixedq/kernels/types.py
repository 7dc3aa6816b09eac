"""Shared kernel types."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import InvalidInputError
from ..quant import QTensor, Scale, dequantize


class MethodId(str, Enum):
    """Approximation family; declaration order is the tie-break order."""

    IBERT = "ibert"
    FQVIT = "fqvit"
    IVIT = "ivit"


class OpKind(str, Enum):
    SOFTMAX = "softmax"
    GELU = "gelu"
    LAYERNORM = "layernorm"


METHOD_ORDER = (MethodId.IBERT, MethodId.FQVIT, MethodId.IVIT)

OPTIONS = {
    OpKind.SOFTMAX: (MethodId.IBERT, MethodId.FQVIT, MethodId.IVIT),
    OpKind.GELU: (MethodId.IBERT, MethodId.IVIT),
    OpKind.LAYERNORM: (MethodId.IBERT, MethodId.FQVIT, MethodId.IVIT),
}


@dataclass(frozen=True)
class KernelOutput:
    """Result of a non-linear kernel.

    ``q_in`` is the input as the kernel actually consumed it (after any
    narrowing or per-channel requantization).  For log2-coded softmax output
    ``log2`` is set and ``q`` holds the codes ``k`` of values ``2**-k``.
    """

    q: QTensor
    log2: bool = False
    q_in: QTensor | None = None

    @property
    def scale(self) -> Scale:
        return self.q.scale

    def dequantize(self) -> np.ndarray:
        if self.log2:
            return np.exp2(-self.q.values.astype(np.float64))
        return dequantize(self.q)

    def linear_ints(self, frac_bits: int = 30) -> tuple[np.ndarray, float]:
        """Integer values and scale for use in a following integer matmul."""
        if not self.log2:
            return self.q.ints(), self.q.scale.value
        codes = self.q.ints()
        vals = np.where(codes <= frac_bits, np.left_shift(np.int64(1), np.maximum(frac_bits - codes, 0)), 0)
        return vals, 2.0**-frac_bits


@dataclass(frozen=True)
class AffineParams:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        b = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if g.shape != b.shape:
            raise InvalidInputError(f"gamma/beta length mismatch: {g.size} vs {b.size}")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)

    @classmethod
    def identity(cls, dim: int) -> "AffineParams":
        return cls(np.ones(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.gamma.size


@dataclass(frozen=True)
class CalibStats:
    """Calibration for the power-of-two-factor LayerNorm.

    ``channel_max`` holds per-feature input magnitudes, ``out_alpha`` the
    clip bound of the output quantizer, ``lo`` the smallest allowed factor
    exponent.
    """

    channel_max: np.ndarray
    global_max: float
    out_alpha: float
    lo: int = -3

    def __post_init__(self):
        cm = np.asarray(self.channel_max, dtype=np.float64).reshape(-1).copy()
        cm.setflags(write=False)
        object.__setattr__(self, "channel_max", cm)

    def factors(self) -> np.ndarray:
        """Per-channel exponents ``clip(round(log2(ch / global)), lo, 0)``."""
        g = max(self.global_max, 1e-30)
        ratio = np.maximum(self.channel_max, 1e-30) / g
        return np.clip(np.round(np.log2(ratio)), self.lo, 0).astype(np.int64)
