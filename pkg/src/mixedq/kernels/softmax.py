"""Integer softmax kernels."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from ..quant import QTensor, Scale
from .intops import exp_poly_fixed, exp_shift_fixed, log2_round_ratio, to_fixed
from .types import KernelOutput

SOFTMAX_OUT_BITS = 8


def _shifted_fixed(q: QTensor, axis: int) -> tuple[np.ndarray, int]:
    if not -q.values.ndim <= axis < q.values.ndim:
        raise InvalidInputError(f"axis {axis} out of range for rank {q.values.ndim}")
    x = q.ints()
    x = x - x.max(axis=axis, keepdims=True)
    return to_fixed(x, q.scale.value), axis


def _normalize(terms: np.ndarray, axis: int, out_bits: int) -> QTensor:
    """Rounded integer division of each term by its row sum."""
    total = terms.sum(axis=axis, keepdims=True)
    p = ((terms << (out_bits + 1)) + total) // (2 * total)
    # unsigned codes up to 2**out_bits; carried in a signed container one bit wider
    return QTensor(p, Scale(2.0**-out_bits, 1.0, out_bits + 1))


def softmax_ivit(q: QTensor, axis: int = -1, out_bits: int = SOFTMAX_OUT_BITS) -> KernelOutput:
    x, axis = _shifted_fixed(q, axis)
    return KernelOutput(_normalize(exp_shift_fixed(x), axis, out_bits), q_in=q)


def softmax_ibert(q: QTensor, axis: int = -1, out_bits: int = SOFTMAX_OUT_BITS) -> KernelOutput:
    x, axis = _shifted_fixed(q, axis)
    return KernelOutput(_normalize(exp_poly_fixed(x).values, axis, out_bits), q_in=q)


def softmax_fqvit(q: QTensor, axis: int = -1, out_bits: int = 4) -> KernelOutput:
    """Log2-quantized softmax: code ``k`` stands for ``2**-k``."""
    if out_bits not in (4, 8):
        raise InvalidInputError(f"out_bits must be 4 or 8, got {out_bits}")
    x, axis = _shifted_fixed(q, axis)
    terms = exp_poly_fixed(x).values
    total = np.broadcast_to(terms.sum(axis=axis, keepdims=True), terms.shape)
    top = 2**out_bits - 1
    codes = np.full(terms.shape, top, dtype=np.int64)
    live = terms > 0
    codes[live] = log2_round_ratio(total[live], terms[live])
    codes = np.clip(codes, 0, top)
    return KernelOutput(QTensor(codes, Scale(1.0, float(top), out_bits + 1)), log2=True, q_in=q)
