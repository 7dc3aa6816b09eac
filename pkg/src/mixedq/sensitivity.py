"""Layer-wise sensitivity analysis and per-layer method selection."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidInputError, ParseError
from .kernels import METHOD_ORDER, OPTIONS, MethodId, OpKind
from .model import LayerId, Model, calibrate, enumerate_nonlinear_layers, forward_fp, forward_quant, uniform_assignment

SQNR_CAP_DB = 300.0
CSV_COLUMNS = ["layer_id", "op_kind", "method", "asqnr_in_db", "asqnr_out_db", "sqnr_diff_db"]


class DecisionRule(str, Enum):
    SQNR_DIFF = "sqnr-diff"
    SQNR_OUTPUT = "sqnr-output"


def asqnr(x_batch, q_batch) -> float:
    """Batch-averaged SQNR in dB: ``20 log10(mean_i E[x_i^2] / E[(x_i - q_i)^2])``.

    Both arguments are sequences of per-sample tensors (or arrays whose first
    axis indexes samples).  The result is capped at +/-``SQNR_CAP_DB``; a
    noiseless comparison returns the positive cap.
    """
    if len(x_batch) != len(q_batch) or len(x_batch) == 0:
        raise InvalidInputError(f"batch lengths differ or are empty: {len(x_batch)} vs {len(q_batch)}")
    ratios = []
    for x, q in zip(x_batch, q_batch):
        x = np.asarray(x, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        if x.shape != q.shape:
            raise InvalidInputError(f"sample shape mismatch: {x.shape} vs {q.shape}")
        # Rescale by a power of two near the peak (exact) so squares cannot overflow.
        peak = max(float(np.max(np.abs(x), initial=0.0)), float(np.max(np.abs(q), initial=0.0)))
        if math.isfinite(peak) and peak > 0.0:
            shift = -math.frexp(peak)[1]
            x, q = np.ldexp(x, shift), np.ldexp(q, shift)
        noise = np.mean((x - q) ** 2)
        signal = np.mean(x**2)
        if noise == 0.0:
            ratios.append(math.inf)
        else:
            with np.errstate(over="ignore"):     # subnormal noise: inf, capped below
                ratios.append(signal / noise)
    mean_ratio = math.fsum(ratios) / len(ratios) if all(map(math.isfinite, ratios)) else math.inf
    if mean_ratio == math.inf:
        return SQNR_CAP_DB
    if mean_ratio <= 0.0:
        return -SQNR_CAP_DB
    return float(min(SQNR_CAP_DB, max(-SQNR_CAP_DB, 20.0 * math.log10(mean_ratio))))


def sqnr_diff(asqnr_out: float, asqnr_in: float) -> float:
    return float(asqnr_out) - float(asqnr_in)


@dataclass(frozen=True)
class SensitivityRecord:
    layer: LayerId
    method: MethodId
    asqnr_in: float
    asqnr_out: float
    sqnr_diff: float

    @classmethod
    def make(cls, layer: LayerId, method: MethodId, asqnr_in: float, asqnr_out: float):
        return cls(layer, MethodId(method), asqnr_in, asqnr_out, sqnr_diff(asqnr_out, asqnr_in))


@dataclass(frozen=True)
class SensitivityTable:
    records: tuple

    def layers(self) -> list:
        return sorted({r.layer for r in self.records})

    def by_layer(self) -> dict:
        out = {}
        for r in self.records:
            out.setdefault(r.layer, {})[r.method] = r
        return out

    def expected_size(self) -> int:
        return sum(len(OPTIONS[lid.kind]) for lid in self.layers())


def _batch_trace(m: Model, batches, run) -> dict:
    """Run ``run`` on every batch and concatenate traces along the sample axis."""
    merged = {}
    for x in batches:
        _, trace = run(x)
        for lid, t in trace.items():
            merged.setdefault(lid, ([], []))
            merged[lid][0].append(t.input)
            merged[lid][1].append(t.output)
    return {lid: (np.concatenate(i), np.concatenate(o)) for lid, (i, o) in merged.items()}


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MIXEDQ_THREADS", "3")))
    except ValueError:
        return 1


def analyze(m: Model, data, bits: int | None = None, threads: int | None = None) -> SensitivityTable:
    """Compare every uniform-method run against the float run, layer by layer.

    The first batch doubles as calibration data for FQ-ViT LayerNorm.
    """
    data = list(data)
    if not data:
        raise InvalidInputError("analysis needs at least one batch")
    calib = calibrate(m, data[0])
    ref = _batch_trace(m, data, lambda x: forward_fp(m, x))

    def run_method(method):
        a = uniform_assignment(m, method)
        return method, _batch_trace(m, data, lambda x: forward_quant(m, x, a, bits, calib))

    workers = min(threads or _threads(), len(METHOD_ORDER))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = dict(pool.map(run_method, METHOD_ORDER))
    else:
        runs = dict(map(run_method, METHOD_ORDER))

    records = []
    for lid in enumerate_nonlinear_layers(m):
        x_in, x_out = ref[lid]
        for method in OPTIONS[lid.kind]:
            q_in, q_out = runs[method][lid]
            records.append(SensitivityRecord.make(lid, method, asqnr(x_in, q_in), asqnr(x_out, q_out)))
    return SensitivityTable(tuple(records))


def select_assignment(t: SensitivityTable, rule: DecisionRule) -> dict:
    """Pick one method per layer.

    ``SQNR_DIFF`` takes the smallest ``asqnr_out - asqnr_in``;
    ``SQNR_OUTPUT`` the largest ``asqnr_out``.  Ties go to the earlier method
    in I-BERT, FQ-ViT, I-ViT order.
    """
    rule = DecisionRule(rule)
    out = {}
    for lid, recs in sorted(t.by_layer().items()):
        options = OPTIONS[lid.kind]
        if set(recs) != set(options):
            raise InvalidInputError(f"sensitivity table incomplete for layer {lid}")
        best = None
        for method in METHOD_ORDER:
            if method not in options:
                continue
            r = recs[method]
            key = r.sqnr_diff if rule is DecisionRule.SQNR_DIFF else -r.asqnr_out
            if best is None or key < best[0]:
                best = (key, method)
        out[lid] = best[1]
    return out


# ---------------------------------------------------------------------------
# counting

def _counts(counts) -> dict:
    if isinstance(counts, dict):
        c = {OpKind(k): int(v) for k, v in counts.items()}
    else:
        s, g, ln = counts
        c = {OpKind.SOFTMAX: int(s), OpKind.GELU: int(g), OpKind.LAYERNORM: int(ln)}
    if any(v < 0 for v in c.values()):
        raise InvalidInputError("layer counts must be nonnegative")
    return c


def search_space_size(counts) -> int:
    """Number of distinct assignments: product of option counts over layers."""
    c = _counts(counts)
    total = 1
    for kind, n in c.items():
        total *= len(OPTIONS[kind]) ** n
    return total


def evaluation_count(counts) -> int:
    """Number of per-layer evaluations a layer-wise analysis needs."""
    c = _counts(counts)
    return sum(len(OPTIONS[kind]) * n for kind, n in c.items())


# ---------------------------------------------------------------------------
# serialization

def _fmt(v: float) -> str:
    return repr(float(v))


def table_to_csv(t: SensitivityTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in t.records:
        w.writerow([str(r.layer), r.layer.kind.value, r.method.value,
                    _fmt(r.asqnr_in), _fmt(r.asqnr_out), _fmt(r.sqnr_diff)])
    return buf.getvalue()


def table_from_csv(text: str) -> SensitivityTable:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows and not text.strip():
        raise ParseError("empty sensitivity CSV")
    records = []
    for i, row in enumerate(rows, start=2):
        try:
            lid = LayerId.parse(row["layer_id"])
            if lid.kind.value != row["op_kind"]:
                raise ValueError(f"op_kind {row['op_kind']!r} disagrees with {row['layer_id']!r}")
            rec = SensitivityRecord(lid, MethodId(row["method"]), float(row["asqnr_in_db"]),
                                    float(row["asqnr_out_db"]), float(row["sqnr_diff_db"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"sensitivity CSV line {i}: {exc}") from exc
        records.append(rec)
    return SensitivityTable(tuple(records))


def table_to_json(t: SensitivityTable) -> str:
    doc = [{"layer_id": str(r.layer), "op_kind": r.layer.kind.value, "method": r.method.value,
            "asqnr_in_db": r.asqnr_in, "asqnr_out_db": r.asqnr_out, "sqnr_diff_db": r.sqnr_diff}
           for r in t.records]
    return json.dumps(doc, indent=2) + "\n"


def assignment_to_json(a: dict) -> str:
    doc = {str(lid): MethodId(method).value for lid, method in sorted(a.items())}
    return json.dumps(doc, indent=2) + "\n"


def assignment_from_json(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"assignment is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("assignment JSON must be an object")
    try:
        return {LayerId.parse(k): MethodId(v) for k, v in doc.items()}
    except (InvalidInputError, ValueError) as exc:
        raise ParseError(f"bad assignment entry: {exc}") from exc
