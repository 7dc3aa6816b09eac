"""Integer GELU kernels."""

from __future__ import annotations

import math

import numpy as np

from ..quant import QTensor, requantize_acc, rescale_ints, round_half_away
from .intops import ERF_A, ERF_B, EXP_FRAC_BITS, exp_shift_fixed, to_fixed
from .types import KernelOutput

SIGMOID_FRAC_BITS = 15
# Smallest input step used inside the erf polynomial.  Finer input grids are
# rescaled onto it so the integer constants stay well inside int64.
MIN_ERF_STEP = 1e-6


def _finish(acc: np.ndarray, acc_scale: float, bits: int, q: QTensor,
            alpha: float | None) -> KernelOutput:
    if acc_scale < 0:
        acc, acc_scale = -acc, -acc_scale
    return KernelOutput(requantize_acc(acc, acc_scale, bits, alpha), q_in=q)


def gelu_ibert(q: QTensor, bits: int = 8, alpha: float | None = None) -> KernelOutput:
    """``x * (1 + erf(x / sqrt 2)) / 2`` with a clipped quadratic for erf.

    ``alpha`` fixes the output clip bound; by default it follows the data.
    """
    x, step = q.ints(), q.scale.value
    if step < MIN_ERF_STEP:
        x, step = rescale_ints(x, step / MIN_ERF_STEP), MIN_ERF_STEP
    s_erf = step / math.sqrt(2.0)
    b_int = int(round_half_away(ERF_B / s_erf))        # negative clip point
    poly_scale = ERF_A * s_erf * s_erf                  # negative
    c_int = int(round_half_away(1.0 / poly_scale))      # the "+1" in poly units
    clipped = np.minimum(np.abs(x), -b_int)
    erf_int = np.sign(x) * ((clipped + b_int) ** 2 + c_int)
    acc = x * (erf_int + c_int)
    return _finish(acc, step * poly_scale / 2.0, bits, q, alpha)


def gelu_ivit(q: QTensor, bits: int = 8, alpha: float | None = None) -> KernelOutput:
    """``x * sigmoid(1.6875 x)`` with the shift exponential inside the sigmoid."""
    x = q.ints()
    xf = to_fixed(x, q.scale.value)
    p = xf + (xf >> 1) + (xf >> 3) + (xf >> 4)
    e = exp_shift_fixed(-np.abs(p))                     # e**-|p|, Q24
    one = np.int64(1) << EXP_FRAC_BITS
    num = np.where(p >= 0, one, e)
    den = one + e
    sig = ((num << (SIGMOID_FRAC_BITS + 1)) + den) // (2 * den)
    acc = x * sig
    return _finish(acc, q.scale.value * 2.0**-SIGMOID_FRAC_BITS, bits, q, alpha)
