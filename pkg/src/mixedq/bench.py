"""Per-kernel SQNR and latency on random tensors."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .kernels import AffineParams, MethodId, OpKind, calibrate_layernorm, run_kernel
from .model import LN_EPS, gelu
from .quant import compute_scale, quantize
from .sensitivity import asqnr

DEFAULT_SIZES = ((1000, 1000), (100, 100), (10, 10))
WARMUP = 3

KERNEL_ORDER = (
    (OpKind.SOFTMAX, MethodId.IBERT), (OpKind.SOFTMAX, MethodId.FQVIT), (OpKind.SOFTMAX, MethodId.IVIT),
    (OpKind.GELU, MethodId.IBERT), (OpKind.GELU, MethodId.IVIT),
    (OpKind.LAYERNORM, MethodId.IBERT), (OpKind.LAYERNORM, MethodId.FQVIT), (OpKind.LAYERNORM, MethodId.IVIT),
)


@dataclass(frozen=True)
class BenchSpec:
    sizes: tuple = DEFAULT_SIZES
    value_range: tuple = (-4.0, 4.0)
    reps: int = 10
    seed: int = 0
    bits: int = 8
    kernels: tuple = field(default=KERNEL_ORDER)

    def __post_init__(self):
        lo, hi = self.value_range
        if not lo < hi:
            raise InvalidInputError("value_range needs lo < hi")
        if self.reps < 3:
            raise InvalidInputError("reps must be >= 3")
        if not self.sizes or any(r < 1 or c < 1 for r, c in self.sizes):
            raise InvalidInputError("sizes must be positive (rows, cols) pairs")


@dataclass(frozen=True)
class BenchRow:
    kind: OpKind
    method: MethodId
    size: tuple
    sqnr_db: float
    latency_mean_ms: float
    latency_sd_ms: float


def reference(kind: OpKind, x: np.ndarray) -> np.ndarray:
    """Float version of the non-linearity (identity affine for LayerNorm)."""
    if kind is OpKind.SOFTMAX:
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    if kind is OpKind.GELU:
        return gelu(x)
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)


def _bench_cell(kind, method, x, bits, reps):
    q = quantize(x, compute_scale(x, bits))
    affine = AffineParams.identity(x.shape[-1]) if kind is OpKind.LAYERNORM else None
    calib = calibrate_layernorm(x, affine) if (kind is OpKind.LAYERNORM and method is MethodId.FQVIT) else None

    def call():
        return run_kernel(kind, method, q, bits=bits, affine=affine, calib=calib)

    for _ in range(WARMUP):
        out = call()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        out = call()
        times.append((time.perf_counter() - t0) * 1e3)
    sqnr = asqnr([reference(kind, x)], [out.dequantize()])
    return sqnr, statistics.fmean(times), statistics.stdev(times)


def run_bench(spec: BenchSpec) -> list:
    """One row per kernel and size; SQNR compares against the float op on the unquantized input."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.value_range
    rows = []
    for size in spec.sizes:
        x = rng.uniform(lo, hi, size)
        for kind, method in spec.kernels:
            sqnr, mean, sd = _bench_cell(kind, method, x, spec.bits, spec.reps)
            rows.append(BenchRow(kind, method, tuple(size), sqnr, mean, sd))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["op_kind", "method", "rows", "cols", "sqnr_db", "latency_mean_ms", "latency_sd_ms"])
    for r in rows:
        w.writerow([r.kind.value, r.method.value, r.size[0], r.size[1], f"{r.sqnr_db:.4f}",
                    f"{r.latency_mean_ms:.4f}", f"{r.latency_sd_ms:.4f}"])
    return buf.getvalue()


def rows_to_table(rows) -> str:
    """Kernels down, sizes across; each cell is ``SQNR / mean (SD) ms``."""
    sizes = list(dict.fromkeys(r.size for r in rows))
    cells = {(r.kind, r.method, r.size): r for r in rows}
    kernels = list(dict.fromkeys((r.kind, r.method) for r in rows))
    head = ["kernel"] + [f"{a}x{b}" for a, b in sizes]
    body = []
    for kind, method in kernels:
        line = [f"{kind.value}/{method.value}"]
        for s in sizes:
            r = cells.get((kind, method, s))
            line.append("-" if r is None else
                        f"{r.sqnr_db:.2f} dB / {r.latency_mean_ms:.3f} ({r.latency_sd_ms:.3f}) ms")
        body.append(line)
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*row) for row in body]
    return "\n".join(lines) + "\n"


def sqnr_by_kernel(rows, size) -> dict:
    return {(r.kind, r.method): r.sqnr_db for r in rows if tuple(r.size) == tuple(size)}


__all__ = ["BenchRow", "BenchSpec", "run_bench", "rows_to_csv", "rows_to_table", "reference",
           "sqnr_by_kernel"]
