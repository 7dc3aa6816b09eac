"""Integer LayerNorm kernels."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError, InvalidStateError
from ..quant import QTensor, Scale, compute_scale, quantize, requantize, rescale_ints, round_shift
from .intops import IBERT_ISQRT_ITERS, IVIT_ISQRT_ITERS, isqrt_newton
from .types import AffineParams, CalibStats, KernelOutput

EPS_INT = 1
NORM_SHIFT = 30        # normalized value y / std is carried as Q30
GAMMA_BITS = 8


def narrow(q: QTensor, bits: int) -> QTensor:
    """Requantize ``q`` to ``bits`` with a clip bound at its own peak, if wider."""
    if q.scale.bits <= bits:
        return q
    peak = int(np.abs(q.ints()).max()) if q.values.size else 0
    return requantize(q, Scale.from_alpha(peak * q.scale.value, bits))


def _check(x: np.ndarray, p: AffineParams) -> None:
    if x.ndim == 0 or x.shape[-1] != p.dim:
        raise InvalidInputError(
            f"feature length {x.shape[-1] if x.ndim else 0} does not match affine params ({p.dim})")


def _normalize(x: np.ndarray, isqrt_iters: int, early_exit: bool) -> np.ndarray:
    """Integer ``(x - mean) / std`` along the last axis, as Q30 times sqrt(d)."""
    d = x.shape[-1]
    total = x.sum(axis=-1, keepdims=True)
    mean = np.floor_divide(2 * total + d, 2 * d)
    y = x - mean
    var = (y * y).sum(axis=-1, keepdims=True) + EPS_INT
    std = isqrt_newton(var, isqrt_iters, early_exit)
    factor = (np.int64(2**31 - 1)) // std
    return round_shift(y * factor, 1)


def _affine(n: np.ndarray, d: int, p: AffineParams, bits: int, alpha: float | None) -> QTensor:
    norm_scale = np.sqrt(d) * 2.0**-NORM_SHIFT
    g = quantize(p.gamma, compute_scale(p.gamma, GAMMA_BITS))
    prod_scale = norm_scale * g.scale.value
    b_int = np.round(p.beta / prod_scale).astype(np.int64)
    acc = n * g.ints() + b_int
    if alpha is None:
        alpha = float(np.abs(acc).max()) * prod_scale
    target = Scale.from_alpha(alpha, bits)
    vals = rescale_ints(acc, prod_scale / target.value)
    return QTensor(np.clip(vals, -target.qmax, target.qmax), target)


def _layernorm(q: QTensor, p: AffineParams, bits: int, isqrt_iters: int,
               early_exit: bool) -> KernelOutput:
    _check(q.values, p)
    q_in = narrow(q, bits)
    x = q_in.ints()
    n = _normalize(x, isqrt_iters, early_exit)
    return KernelOutput(_affine(n, x.shape[-1], p, bits, None), q_in=q_in)


def layernorm_ibert(q: QTensor, p: AffineParams, bits: int = 8) -> KernelOutput:
    """Newton isqrt iterated until the estimate stops decreasing."""
    return _layernorm(q, p, bits, IBERT_ISQRT_ITERS, early_exit=True)


def layernorm_ivit(q: QTensor, p: AffineParams, bits: int = 8) -> KernelOutput:
    """Shift-form Newton isqrt with a fixed iteration budget."""
    return _layernorm(q, p, bits, IVIT_ISQRT_ITERS, early_exit=False)


def calibrate_layernorm(x, p: AffineParams, lo: int = -3, eps: float = 1e-6) -> CalibStats:
    """Collect per-channel input ranges and the output range of a float LayerNorm."""
    x = np.asarray(x, dtype=np.float64)
    _check(x, p)
    flat = x.reshape(-1, x.shape[-1])
    channel_max = np.abs(flat).max(axis=0)
    mu = flat.mean(axis=-1, keepdims=True)
    var = flat.var(axis=-1, keepdims=True)
    y = (flat - mu) / np.sqrt(var + eps) * p.gamma + p.beta
    return CalibStats(channel_max, float(channel_max.max()), float(np.abs(y).max()), lo)


def layernorm_fqvit(q: QTensor, p: AffineParams, calib: CalibStats | None,
                    bits: int = 8) -> KernelOutput:
    """Power-of-two-factor LayerNorm with calibrated input and output scales.

    Channel ``c`` is quantized at ``S * 2**f_c`` where ``S`` comes from the
    calibrated global maximum; the codes are then aligned to the finest grid
    by a left shift before the shared integer normalization.
    """
    if calib is None:
        raise InvalidStateError("FQ-ViT LayerNorm requires calibration statistics")
    _check(q.values, p)
    if calib.channel_max.size != p.dim:
        raise InvalidInputError("calibration feature length does not match affine params")
    f = calib.factors()
    base = Scale.from_alpha(calib.global_max, bits)
    x = q.ints()
    codes = np.zeros_like(x)
    for fc in np.unique(f):
        cols = f == fc
        step = base.value * 2.0**fc
        codes[..., cols] = rescale_ints(x[..., cols], q.scale.value / step)
    codes = np.clip(codes, -base.qmax, base.qmax)
    aligned = codes << (f - calib.lo)
    n = _normalize(aligned, IBERT_ISQRT_ITERS, early_exit=True)
    out = _affine(n, x.shape[-1], p, bits, calib.out_alpha)
    # the consumed input, re-expressed on the finest grid for tracing
    fine = Scale(base.value * 2.0**calib.lo, base.alpha, min(16, bits - calib.lo))
    q_in = QTensor(np.clip(aligned, -fine.qmax, fine.qmax), fine)
    return KernelOutput(out, q_in=q_in)
