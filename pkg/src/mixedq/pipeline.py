"""Run configuration and the analyze / eval pipelines behind the CLI."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, rawio
from .errors import InvalidInputError, ParseError
from .kernels import METHOD_ORDER, OPTIONS, MethodId, OpKind
from .model import (LayerId, Model, ModelConfig, build_model, calibrate, check_assignment, config_to_dict,
                    enumerate_nonlinear_layers, forward_fp, forward_quant, load_weights, synthetic_batches,
                    uniform_assignment, weights_digest)
from .sensitivity import (DecisionRule, SensitivityTable, analyze, asqnr, assignment_to_json, evaluation_count,
                          search_space_size, select_assignment, table_to_csv, table_to_json)

# figures quoted in the literature for a 12-block ViT, kept for comparison in reports
PUBLISHED_SEARCH_SPACE = "9.47e18"
PUBLISHED_EVALUATION_COUNT = 122
REFERENCE_COUNTS = (12, 12, 25)


@dataclass(frozen=True)
class DataSource:
    kind: str = "synthetic"            # "synthetic" or "files"
    distribution: str = "gaussian"
    batches: int = 2
    batch_size: int = 8
    seed: int = 0
    files: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSource = field(default_factory=DataSource)
    rule: DecisionRule = DecisionRule.SQNR_DIFF
    output_dir: str = "out"
    weights: str | None = None

    @property
    def bits(self) -> int:
        return self.model.bits


_MODEL_INT = ("depth", "embed_dim", "heads", "seq_len", "input_dim", "bits", "seed", "num_classes")


def _get(section, key, conv, default):
    if section is None or key not in section:
        return default
    raw = section[key].strip()
    try:
        return conv(raw)
    except ValueError as exc:
        raise InvalidInputError(f"config [{section.name}] {key} = {raw!r}: {exc}") from exc


def parse_config(text: str, base_dir: Path = Path(".")) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidInputError(f"config file: {exc}") from exc
    msec = cp["model"] if cp.has_section("model") else None
    rsec = cp["run"] if cp.has_section("run") else None
    dsec = cp["data"] if cp.has_section("data") else None
    defaults = ModelConfig()
    kw = {k: _get(msec, k, int, getattr(defaults, k)) for k in _MODEL_INT}
    kw["mlp_ratio"] = _get(msec, "mlp_ratio", float, defaults.mlp_ratio)
    kw["bits"] = _get(rsec, "bits", int, kw["bits"])
    model = ModelConfig(**kw)
    files = tuple(str((base_dir / f.strip()).resolve()) if not Path(f.strip()).is_absolute() else f.strip()
                  for f in _get(dsec, "files", str, "").split(",") if f.strip())
    data = DataSource(
        kind=_get(dsec, "source", str, "files" if files else "synthetic"),
        distribution=_get(dsec, "distribution", str, "gaussian"),
        batches=_get(dsec, "batches", int, 2),
        batch_size=_get(dsec, "batch_size", int, 8),
        seed=_get(dsec, "seed", int, model.seed),
        files=files,
    )
    if data.kind not in ("synthetic", "files"):
        raise InvalidInputError(f"[data] source must be synthetic or files, got {data.kind!r}")
    if data.kind == "synthetic" and data.distribution not in ("gaussian", "uniform"):
        raise InvalidInputError(f"[data] distribution must be gaussian or uniform, got {data.distribution!r}")
    if data.batches < 1 or data.batch_size < 1:
        raise InvalidInputError("[data] batches and batch_size must be >= 1")
    if data.kind == "files" and not files:
        raise InvalidInputError("[data] source = files needs a files = ... list")
    try:
        rule = DecisionRule(_get(rsec, "rule", str, DecisionRule.SQNR_DIFF.value))
    except ValueError as exc:
        raise InvalidInputError(f"[run] rule: {exc}") from exc
    weights = _get(msec, "weights", str, None)
    if weights and not Path(weights).is_absolute():
        weights = str((base_dir / weights).resolve())
    return RunConfig(model, data, rule, _get(rsec, "output_dir", str, "out"), weights)


def with_overrides(cfg: RunConfig, bits=None, rule=None, seed=None, out=None) -> RunConfig:
    if bits is not None:
        cfg = replace(cfg, model=replace(cfg.model, bits=bits))
    if seed is not None:
        cfg = replace(cfg, model=replace(cfg.model, seed=seed), data=replace(cfg.data, seed=seed))
    if rule is not None:
        cfg = replace(cfg, rule=DecisionRule(rule))
    if out is not None:
        cfg = replace(cfg, output_dir=str(out))
    return cfg


def render_config(cfg: RunConfig) -> str:
    """Canonical config text; re-running with it reproduces a report."""
    cp = configparser.ConfigParser()
    m = config_to_dict(cfg.model)
    cp["model"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in m.items() if k != "bits"}
    if cfg.weights:
        cp["model"]["weights"] = cfg.weights
    cp["run"] = {"bits": str(cfg.bits), "rule": cfg.rule.value}
    d = cfg.data
    cp["data"] = {"source": d.kind, "distribution": d.distribution, "batches": str(d.batches),
                  "batch_size": str(d.batch_size), "seed": str(d.seed)}
    if d.files:
        cp["data"]["files"] = ", ".join(d.files)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_model(cfg: RunConfig) -> Model:
    if cfg.weights:
        m = load_weights(cfg.weights)
        if m.cfg != replace(cfg.model, bits=m.cfg.bits):
            raise InvalidInputError(f"{cfg.weights}: stored model config differs from the run config")
        return Model(replace(m.cfg, bits=cfg.bits), m.weights)
    return build_model(cfg.model)


def load_data(cfg: RunConfig) -> list:
    d = cfg.data
    if d.kind == "synthetic":
        return synthetic_batches(cfg.model, d.distribution, d.batches, d.batch_size, d.seed)
    batches = []
    for f in d.files:
        arr = rawio.read_tensor(f).astype(np.float64)
        want = (cfg.model.seq_len, cfg.model.input_dim)
        if arr.ndim != 3 or arr.shape[1:] != want:
            raise InvalidInputError(f"{f}: expected shape (batch, {want[0]}, {want[1]}), got {arr.shape}")
        batches.append(arr)
    return batches


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def histogram(m: Model, a: dict) -> dict:
    out = {k.value: {meth.value: 0 for meth in OPTIONS[k]} for k in OpKind}
    for lid, meth in a.items():
        out[lid.kind.value][MethodId(meth).value] += 1
    return out


def search_figures(m: Model) -> dict:
    c = m.cfg.layer_counts()
    counts = (c[OpKind.SOFTMAX], c[OpKind.GELU], c[OpKind.LAYERNORM])
    ref = search_space_size(REFERENCE_COUNTS)
    return {
        "counts": {"softmax": counts[0], "gelu": counts[1], "layernorm": counts[2]},
        "search_space": str(search_space_size(counts)),
        "evaluation_count": evaluation_count(counts),
        "reference_12_block": {
            "counts": {"softmax": 12, "gelu": 12, "layernorm": 25},
            "search_space_exact": str(ref),
            "search_space_exact_sci": f"{ref:.6e}",
            "search_space_published": PUBLISHED_SEARCH_SPACE,
            "evaluation_count_exact": evaluation_count(REFERENCE_COUNTS),
            "evaluation_count_published": PUBLISHED_EVALUATION_COUNT,
            "note": ("published figures do not equal the exact product 3^37 * 2^12 "
                     "or the option-weighted sum 3*12 + 2*12 + 3*25; exact values are reported"),
        },
    }


def provenance(cfg: RunConfig, m: Model, config_text: str) -> dict:
    return {
        "tool": "mixedq",
        "version": __version__,
        "model_seed": cfg.model.seed,
        "data_seed": cfg.data.seed,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "weights_sha256": weights_digest(m),
    }


def series_csv(t: SensitivityTable, a: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_id", "op_kind", "method", "asqnr_out_db", "sqnr_diff_db", "selected"])
    for r in t.records:
        w.writerow([str(r.layer), r.layer.kind.value, r.method.value, repr(r.asqnr_out),
                    repr(r.sqnr_diff), int(a[r.layer] is r.method)])
    return buf.getvalue()


def run_analyze(cfg: RunConfig) -> dict:
    """Run the layer-wise analysis and write all report files; returns the report."""
    out = Path(cfg.output_dir)
    m = load_model(cfg)
    data = load_data(cfg)
    table = analyze(m, data, cfg.bits)
    a = select_assignment(table, cfg.rule)
    other = DecisionRule.SQNR_OUTPUT if cfg.rule is DecisionRule.SQNR_DIFF else DecisionRule.SQNR_DIFF
    a_other = select_assignment(table, other)
    config_text = render_config(cfg)
    hist = histogram(m, a)
    report = {
        "provenance": provenance(cfg, m, config_text),
        "config": config_text,
        "bits": cfg.bits,
        "rule": cfg.rule.value,
        "records": len(table.records),
        "assignment": json.loads(assignment_to_json(a)),
        "alternate_rule": {"rule": other.value, "assignment": json.loads(assignment_to_json(a_other)),
                           "differs_at": [str(l) for l in a if a[l] is not a_other[l]]},
        "histogram": hist,
        "search": search_figures(m),
        "series": [{"layer_id": str(r.layer), "method": r.method.value, "asqnr_out_db": r.asqnr_out,
                    "sqnr_diff_db": r.sqnr_diff} for r in table.records],
    }
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "sensitivity.csv": table_to_csv(table),
        "sensitivity.json": table_to_json(table),
        "assignment.json": assignment_to_json(a),
        "histogram.json": _dumps(hist),
        "series.csv": series_csv(table, a),
        "config.ini": config_text,
        "report.json": _dumps(report),
    }
    for name, text in files.items():
        (out / name).write_text(text)
    return report


def logit_sqnr(ref_logits, q_logits) -> float:
    return asqnr(list(ref_logits), list(q_logits))


def run_eval(cfg: RunConfig, assignment: dict) -> dict:
    """Fresh integer run under ``assignment`` next to the three uniform baselines."""
    m = load_model(cfg)
    a = check_assignment(m, assignment)
    data = load_data(cfg)
    calib = calibrate(m, data[0])
    ids = enumerate_nonlinear_layers(m)
    ref_logits, ref_trace = [], {lid: [] for lid in ids}
    for x in data:
        logits, tr = forward_fp(m, x)
        ref_logits.append(logits)
        for lid in ids:
            ref_trace[lid].append(tr[lid].output)
    ref_logits = np.concatenate(ref_logits)
    ref_out = {lid: np.concatenate(v) for lid, v in ref_trace.items()}

    runs = {"mixed": a}
    runs.update({f"uniform-{meth.value}": uniform_assignment(m, meth) for meth in METHOD_ORDER})
    results = {}
    for name, amap in runs.items():
        logits, outs = [], {lid: [] for lid in ids}
        for x in data:
            lq, tr = forward_quant(m, x, amap, cfg.bits, calib)
            logits.append(lq)
            for lid in ids:
                outs[lid].append(tr[lid].output)
        results[name] = {
            "logit_sqnr_db": logit_sqnr(ref_logits, np.concatenate(logits)),
            "layers": {str(lid): asqnr(ref_out[lid], np.concatenate(outs[lid])) for lid in ids},
        }
    baseline = min(v["logit_sqnr_db"] for k, v in results.items() if k != "mixed")
    threshold = baseline - 1.0
    status = "pass" if results["mixed"]["logit_sqnr_db"] >= threshold else "warn"
    config_text = render_config(cfg)
    return {
        "provenance": provenance(cfg, m, config_text),
        "assignment": json.loads(assignment_to_json(a)),
        "runs": results,
        "threshold_db": threshold,
        "status": status,
    }


def eval_series_csv(report: dict) -> str:
    names = list(report["runs"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_id", "assigned"] + [f"{n}_asqnr_out_db" for n in names])
    for lid in report["runs"]["mixed"]["layers"]:
        w.writerow([lid, report["assignment"][lid]] + [repr(report["runs"][n]["layers"][lid]) for n in names])
    return buf.getvalue()


def eval_diff_csv(report: dict) -> str:
    """Per-layer gap between the mixed run and the best uniform run."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_id", "mixed_asqnr_out_db", "best_uniform", "best_uniform_asqnr_out_db", "gap_db"])
    runs = report["runs"]
    for lid, mixed in runs["mixed"]["layers"].items():
        best = max((n for n in runs if n != "mixed"), key=lambda n: runs[n]["layers"][lid])
        b = runs[best]["layers"][lid]
        w.writerow([lid, repr(mixed), best, repr(b), repr(mixed - b)])
    return buf.getvalue()


def write_eval(cfg: RunConfig, report: dict) -> list:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"eval.json": _dumps(report), "eval_series.csv": eval_series_csv(report)}
    if report["status"] == "warn":
        files["eval_diff.csv"] = eval_diff_csv(report)
    for name, text in files.items():
        (out / name).write_text(text)
    return sorted(files)

