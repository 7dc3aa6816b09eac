"""Integer-only non-linear kernels: three softmax, two GELU, three LayerNorm."""

from __future__ import annotations

from ..errors import InvalidInputError
from ..quant import QTensor
from .gelu import gelu_ibert, gelu_ivit
from .intops import FixedPoint, isqrt_newton, poly_iexp, shift_exp
from .layernorm import calibrate_layernorm, layernorm_fqvit, layernorm_ibert, layernorm_ivit, narrow
from .softmax import softmax_fqvit, softmax_ibert, softmax_ivit
from .types import METHOD_ORDER, OPTIONS, AffineParams, CalibStats, KernelOutput, MethodId, OpKind

KERNELS = {
    (OpKind.SOFTMAX, MethodId.IBERT): softmax_ibert,
    (OpKind.SOFTMAX, MethodId.FQVIT): softmax_fqvit,
    (OpKind.SOFTMAX, MethodId.IVIT): softmax_ivit,
    (OpKind.GELU, MethodId.IBERT): gelu_ibert,
    (OpKind.GELU, MethodId.IVIT): gelu_ivit,
    (OpKind.LAYERNORM, MethodId.IBERT): layernorm_ibert,
    (OpKind.LAYERNORM, MethodId.FQVIT): layernorm_fqvit,
    (OpKind.LAYERNORM, MethodId.IVIT): layernorm_ivit,
}


def run_kernel(kind: OpKind, method: MethodId, q: QTensor, *, bits: int = 8,
               affine: AffineParams | None = None, calib: CalibStats | None = None,
               fqvit_softmax_bits: int = 4) -> KernelOutput:
    """Dispatch one non-linear op to the kernel of ``method``."""
    kind, method = OpKind(kind), MethodId(method)
    if method not in OPTIONS[kind]:
        raise InvalidInputError(f"{method.name} provides no {kind.value} kernel")
    fn = KERNELS[(kind, method)]
    if kind is OpKind.SOFTMAX:
        if method is MethodId.FQVIT:
            return fn(q, -1, fqvit_softmax_bits)
        return fn(q, -1)
    if kind is OpKind.GELU:
        return fn(q, bits)
    if affine is None:
        raise InvalidInputError("LayerNorm kernels need affine parameters")
    if method is MethodId.FQVIT:
        return fn(q, affine, calib, bits)
    return fn(q, affine, bits)


__all__ = [
    "AffineParams", "CalibStats", "FixedPoint", "KERNELS", "KernelOutput", "METHOD_ORDER",
    "MethodId", "OPTIONS", "OpKind", "calibrate_layernorm", "gelu_ibert", "gelu_ivit",
    "isqrt_newton", "layernorm_fqvit", "layernorm_ibert", "layernorm_ivit", "narrow",
    "poly_iexp", "run_kernel", "shift_exp", "softmax_fqvit", "softmax_ibert", "softmax_ivit",
]
