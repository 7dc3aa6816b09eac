"""Uniform symmetric quantization, dyadic rescaling and the STE gradient rule.

Every tensor in the package is a plain ``numpy`` array.  Quantized tensors
carry their integer codes together with the :class:`Scale` that maps them
back to real values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

ZERO_ALPHA = 1e-8
MIN_BITS, MAX_BITS = 2, 16


def as_tensor(data) -> np.ndarray:
    """Validate ``data`` as a finite float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("empty tensor")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("tensor contains NaN or Inf")
    return arr


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def round_shift(values: np.ndarray, shift: int) -> np.ndarray:
    """Arithmetic right shift of int64 values with round-half-away-from-zero."""
    values = np.asarray(values, dtype=np.int64)
    if shift <= 0:
        return values << -shift
    if shift >= 63:
        return np.zeros_like(values)
    mag = (np.abs(values) + (1 << (shift - 1))) >> shift
    return np.where(values < 0, -mag, mag)


@dataclass(frozen=True)
class Scale:
    """Real step size of a quantizer.

    ``alpha`` is the clip bound and ``bits`` the code width; for scales
    derived from data, ``value == 2 * alpha / (2**bits - 1)``.
    """

    value: float
    alpha: float
    bits: int

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise InvalidInputError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if not (self.value > 0 and np.isfinite(self.value)):
            raise InvalidInputError(f"scale value must be positive, got {self.value}")
        if self.alpha < 0:
            raise InvalidInputError(f"alpha must be nonnegative, got {self.alpha}")

    @classmethod
    def from_alpha(cls, alpha: float, bits: int) -> "Scale":
        if not MIN_BITS <= bits <= MAX_BITS:
            raise InvalidInputError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
        # D1 extended: ranges below epsilon (including all-zero) use epsilon
        alpha = max(float(alpha), ZERO_ALPHA)
        return cls(2.0 * alpha / (2**bits - 1), alpha, bits)

    @property
    def qmax(self) -> int:
        # one code past the two's-complement range is admitted: round(127.5) == 128
        return 2 ** (self.bits - 1)


@dataclass(frozen=True)
class QTensor:
    """Integer codes plus the scale that dequantizes them."""

    values: np.ndarray
    scale: Scale

    def __post_init__(self):
        vals = np.asarray(self.values)
        if not np.issubdtype(vals.dtype, np.integer):
            raise InvalidInputError("QTensor values must be integers")
        if vals.size and int(np.abs(vals.astype(np.int64)).max()) > self.scale.qmax:
            raise InvalidInputError(
                f"QTensor value exceeds {self.scale.bits}-bit symmetric range")
        vals = vals.astype(np.int32)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def ints(self) -> np.ndarray:
        """Codes widened to int64 for accumulation."""
        return self.values.astype(np.int64)


@dataclass(frozen=True)
class DyadicScale:
    """The rational ``b * 2**-c``."""

    b: int
    c: int

    @property
    def value(self) -> float:
        return self.b / 2.0**self.c


def compute_scale(t, bits: int) -> Scale:
    t = as_tensor(t)
    if not MIN_BITS <= bits <= MAX_BITS:
        raise InvalidInputError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return Scale.from_alpha(float(np.max(np.abs(t))), bits)


def quantize(t, s: Scale) -> QTensor:
    t = as_tensor(t)
    clipped = np.clip(t, -s.alpha, s.alpha)
    if s.alpha > 0 and s.value == 2.0 * s.alpha / (2**s.bits - 1):
        # r * (2^n - 1) / (2 alpha) keeps exact ties exact, e.g. 1.0 -> 127.5
        codes = round_half_away(clipped * ((2**s.bits - 1) / (2.0 * s.alpha)))
    else:
        codes = round_half_away(clipped / s.value)
    codes = np.clip(codes, -s.qmax, s.qmax)
    return QTensor(codes.astype(np.int64), s)


def dequantize(q: QTensor) -> np.ndarray:
    return q.values.astype(np.float64) * q.scale.value


def fake_quantize(t, bits: int) -> np.ndarray:
    t = as_tensor(t)
    return dequantize(quantize(t, compute_scale(t, bits)))


def ste_grad(upstream, r, s: Scale) -> np.ndarray:
    """Straight-through gradient: pass ``upstream`` where ``-alpha <= r <= alpha``."""
    upstream = np.asarray(upstream, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if upstream.shape != r.shape:
        raise InvalidInputError(f"shape mismatch: {upstream.shape} vs {r.shape}")
    inside = (r >= -s.alpha) & (r <= s.alpha)
    return np.where(inside, upstream, 0.0)


def dyadic_approx(real_scale: float, precision_bits: int = 31) -> DyadicScale:
    """Approximate ``real_scale`` by ``b * 2**-c`` with ``|b| < 2**(precision_bits-1)``.

    The shift ``c`` is maximized, then common factors of two are cancelled
    so exact powers of two come back in lowest terms.
    """
    if not 8 <= precision_bits <= 31:
        raise InvalidInputError(f"precision_bits must be in [8, 31], got {precision_bits}")
    real_scale = float(real_scale)
    if not (real_scale > 0 and np.isfinite(real_scale)):
        raise InvalidInputError(f"real_scale must be positive, got {real_scale}")
    limit = 2 ** (precision_bits - 1) - 1
    if real_scale >= limit:
        raise InvalidInputError(f"real_scale {real_scale} does not fit in {precision_bits} bits")
    _, exp = np.frexp(real_scale)  # real = m * 2**exp, m in [0.5, 1)
    c = precision_bits - 1 - int(exp)
    b = int(round_half_away(math.ldexp(real_scale, c)))
    while b > limit:
        c -= 1
        b = int(round_half_away(math.ldexp(real_scale, c)))
    while c > 0 and b % 2 == 0:
        b //= 2
        c -= 1
    if c < 0:
        raise InvalidInputError(f"real_scale {real_scale} needs a negative shift")
    return DyadicScale(b, c)


def rescale_ints(values, ratio: float, precision_bits: int = 31) -> np.ndarray:
    """Multiply int64 ``values`` by ``ratio`` using one integer multiply and shift.

    The multiplier precision shrinks with the magnitude of ``values`` so the
    product stays inside the 64-bit accumulator.
    """
    values = np.asarray(values, dtype=np.int64)
    peak = int(np.abs(values).max()) if values.size else 0
    if peak == 0 or peak * ratio < 0.25:
        return np.zeros_like(values) if peak else values.copy()
    precision = min(precision_bits, 62 - peak.bit_length())
    if precision < 8:
        raise OverflowError(f"values up to {peak} leave no room for a dyadic multiplier")
    d = dyadic_approx(ratio, precision)
    if peak * d.b >= 2**62:
        raise OverflowError("intermediate product exceeds 64-bit accumulator")
    return round_shift(values * d.b, d.c)


def requantize(q: QTensor, new_scale: Scale, precision_bits: int = 31) -> QTensor:
    """Re-express ``q`` on ``new_scale`` with integer multiply-and-shift.

    Results outside the target code range are clipped.
    """
    vals = q.ints()
    d = dyadic_approx(q.scale.value / new_scale.value, precision_bits)
    if vals.size and int(np.abs(vals).max()) * d.b >= 2**62:
        raise OverflowError("intermediate product exceeds 64-bit accumulator")
    vals = np.clip(round_shift(vals * d.b, d.c), -new_scale.qmax, new_scale.qmax)
    return QTensor(vals, new_scale)


def requantize_acc(acc, acc_scale: float, bits: int, alpha: float | None = None) -> QTensor:
    """Requantize a wide integer accumulator to ``bits``.

    The target clip bound defaults to the accumulator's own peak magnitude.
    """
    acc = np.asarray(acc, dtype=np.int64)
    if alpha is None:
        alpha = float(np.abs(acc).max()) * acc_scale if acc.size else 0.0
    target = Scale.from_alpha(alpha, bits)
    vals = rescale_ints(acc, acc_scale / target.value)
    return QTensor(np.clip(vals, -target.qmax, target.qmax), target)
