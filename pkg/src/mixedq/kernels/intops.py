"""Integer primitives shared by the non-linear kernels.

Exponent-domain arithmetic runs on Q16 fixed-point reals obtained from the
input codes with a single dyadic multiply, so the result does not depend on
how coarse the input grid is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError
from ..quant import QTensor, rescale_ints, round_shift
from ..fit import load_constants

FRAC_BITS = 16          # fraction bits of fixed-point exponent arguments
EXP_FRAC_BITS = 24      # fraction bits of exponential outputs
MAX_EXP_ARG = 8.0       # largest positive argument the shift exponential accepts
IBERT_ISQRT_ITERS = 64  # upper bound; I-BERT iterates until the estimate stops falling
IVIT_ISQRT_ITERS = 10

_C = load_constants()
EXP_A, EXP_B, EXP_C = _C["exp_a"], _C["exp_b"], _C["exp_c"]
ERF_A, ERF_B = _C["erf_a"], _C["erf_b"]
POW2_K = _C["pow2_k"]

_LN2_Q = int(round(math.log(2.0) * 2**FRAC_BITS))
_POW2_K_Q = int(round(POW2_K * 2**EXP_FRAC_BITS))
_EXP_B_Q = int(round(EXP_B * 2**FRAC_BITS))
_EXP_C_Q = int(round(EXP_C / EXP_A * 2 ** (2 * FRAC_BITS)))


@dataclass(frozen=True)
class FixedPoint:
    """Wide int64 values with a real scale; used for intermediates past 16 bits."""

    values: np.ndarray
    scale: float

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale


def to_fixed(ints, scale: float, frac_bits: int = FRAC_BITS) -> np.ndarray:
    """Re-express integer codes at ``scale`` as fixed-point with ``frac_bits``."""
    return rescale_ints(np.asarray(ints, dtype=np.int64), scale * 2**frac_bits)


def _bit_length(n: np.ndarray) -> np.ndarray:
    """Elementwise ``int.bit_length`` for int64 arrays; nonpositive entries give 0.

    The float exponent can overshoot by one when the conversion rounds up to
    a power of two; the shift test corrects that case.
    """
    n = np.maximum(np.asarray(n, dtype=np.int64), 0)
    e = np.frexp(n.astype(np.float64))[1].astype(np.int64)
    return e - ((n >> np.maximum(e - 1, 0)) == 0) * (e > 0)


def isqrt_newton(n, max_iters: int = IBERT_ISQRT_ITERS, early_exit: bool = True):
    """Floor square root by integer Newton iteration.

    Starts at ``2**ceil(bitlength(n)/2)``, which is never below the root, and
    iterates ``x <- (x + n // x) >> 1``.  With ``early_exit`` the loop stops
    once the estimate no longer falls; otherwise it runs exactly
    ``max_iters`` times.  A final correction step makes the result exact
    even if the iteration budget was too small.

    Accepts a Python int or an int64 array.
    """
    scalar = np.isscalar(n) or isinstance(n, int)
    if scalar:
        n_int = int(n)
        if n_int < 0:
            raise InvalidInputError("isqrt of negative number")
        if n_int == 0:
            return 0
        x = 1 << ((n_int.bit_length() + 1) // 2)
        for _ in range(max_iters):
            nxt = (x + n_int // x) >> 1
            if nxt >= x:
                if early_exit:
                    break
                continue
            x = nxt
        while x * x > n_int:
            x -= 1
        while (x + 1) * (x + 1) <= n_int:
            x += 1
        return x

    arr = np.asarray(n, dtype=np.int64)
    if np.any(arr < 0):
        raise InvalidInputError("isqrt of negative number")
    x = np.left_shift(np.int64(1), (_bit_length(arr) + 1) // 2)
    safe = np.maximum(arr, 1)
    for _ in range(max_iters):
        nxt = (x + safe // x) >> 1
        falling = nxt < x
        if early_exit and not falling.any():
            break
        x = np.where(falling, nxt, x)
    x = np.where(arr == 0, 0, x)
    while True:
        over = x * x > arr
        if not over.any():
            break
        x = x - over
    while True:
        under = (x + 1) * (x + 1) <= arr
        if not under.any():
            break
        x = x + under
    return x


def exp_shift_fixed(x_q: np.ndarray) -> np.ndarray:
    """``e**x`` for Q16 ``x`` via base change to 2; returns Q24 values.

    ``log2(e)`` is taken as ``(1.0111)_2`` so the base change is two shifts
    and an add.  The fractional power of two is a quadratic pinned to 1 and
    1/2 at its endpoints.
    """
    x_q = np.asarray(x_q, dtype=np.int64)
    if x_q.size and x_q.max() > int(MAX_EXP_ARG * 2**FRAC_BITS):
        raise InvalidInputError(f"shift exponential supports arguments up to {MAX_EXP_ARG}")
    t = x_q + (x_q >> 1) - (x_q >> 4)
    neg = -t
    z = neg >> FRAC_BITS                     # integer part of -t (floor)
    f = neg - (z << FRAC_BITS)               # fractional part in [0, 1)
    phi = ((f * f) >> FRAC_BITS) - f         # f^2 - f, Q16, <= 0
    one = np.int64(1) << EXP_FRAC_BITS
    mant = one - (f << (EXP_FRAC_BITS - FRAC_BITS - 1)) + ((_POW2_K_Q * phi) >> FRAC_BITS)
    pos = np.maximum(z, 0)
    out = np.where(z >= 0, (mant + ((np.int64(1) << pos) >> 1)) >> pos, mant << np.maximum(-z, 0))
    return out


def exp_poly_fixed(x_q: np.ndarray) -> FixedPoint:
    """``e**x`` for Q16 ``x <= 0`` by range reduction and a fitted quadratic.

    ``x = r - z ln2`` with ``r`` in ``(-ln2, 0]``; ``a (r + b)**2 + c`` is
    evaluated in integers and shifted right by ``z``.
    """
    x_q = np.asarray(x_q, dtype=np.int64)
    if x_q.size and x_q.max() > 0:
        raise InvalidInputError("polynomial exponential expects nonpositive arguments")
    z = (-x_q) // _LN2_Q
    r = x_q + z * _LN2_Q
    shifted = r + _EXP_B_Q
    poly = (shifted * shifted + _EXP_C_Q) >> 8   # Q32 -> Q24, units of EXP_A
    out = round_shift_vec(poly, z)
    return FixedPoint(out, EXP_A * 2.0**-EXP_FRAC_BITS)


def round_shift_vec(values: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Elementwise right shift with round-half-up for nonnegative values."""
    shifts = np.minimum(np.asarray(shifts, dtype=np.int64), 62)
    half = np.where(shifts > 0, np.left_shift(np.int64(1), np.maximum(shifts - 1, 0)), 0)
    return (values + half) >> shifts


def log2_round_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """``round(log2(num / den))`` for ``num >= den > 0`` in integer arithmetic.

    The half-step threshold ``sqrt(2)`` is represented with 15 fraction bits.
    """
    k = _bit_length(num) - _bit_length(den)
    k = k - ((den << np.maximum(k, 0)) > num)
    sqrt2_q = 46341  # round(sqrt(2) * 2**15)
    up = (num << 15) >= (den << k) * sqrt2_q
    return k + up


def fixed_from_qtensor(q: QTensor) -> np.ndarray:
    return to_fixed(q.ints(), q.scale.value)


__all__ = [
    "FixedPoint", "isqrt_newton", "shift_exp", "poly_iexp", "exp_shift_fixed", "exp_poly_fixed",
    "log2_round_ratio", "to_fixed", "round_shift", "FRAC_BITS", "EXP_FRAC_BITS",
]


def shift_exp(q: QTensor) -> FixedPoint:
    """Shift-based ``e**x`` of the dequantized codes; scale ``2**-EXP_FRAC_BITS``."""
    return FixedPoint(exp_shift_fixed(fixed_from_qtensor(q)), 2.0**-EXP_FRAC_BITS)


def poly_iexp(q: QTensor) -> FixedPoint:
    """Polynomial ``e**x`` of the dequantized codes (``x <= 0``)."""
    return exp_poly_fixed(fixed_from_qtensor(q))
