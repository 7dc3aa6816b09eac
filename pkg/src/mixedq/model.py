"""A small pre-norm ViT encoder with a float path and an integer path.

The integer path keeps activations as :class:`~mixedq.quant.QTensor` values;
linear layers accumulate in int64 and requantize with dyadic multipliers,
and every non-linear layer is dispatched to the kernel named by an
assignment map.  Both paths record each non-linear layer's input and output.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import rawio
from .errors import InvalidInputError, ParseError
from .kernels import OPTIONS, AffineParams, CalibStats, MethodId, OpKind, calibrate_layernorm, run_kernel
from .quant import QTensor, Scale, compute_scale, dequantize, quantize, requantize, requantize_acc, round_half_away

RESIDUAL_BITS = 16
LN_EPS = 1e-6
WEIGHT_FORMAT = "mixedq-weights"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    embed_dim: int = 32
    heads: int = 4
    mlp_ratio: float = 2.0
    seq_len: int = 16
    input_dim: int = 16
    bits: int = 8
    seed: int = 0
    num_classes: int = 10

    def __post_init__(self):
        checks = [
            (self.depth >= 1, "depth must be >= 1"),
            (self.heads >= 1, "heads must be >= 1"),
            (self.embed_dim >= 1 and self.heads >= 1 and self.embed_dim % self.heads == 0,
             "embed_dim must be a positive multiple of heads"),
            (self.mlp_ratio > 0, "mlp_ratio must be positive"),
            (self.seq_len >= 2, "seq_len must be >= 2"),
            (self.input_dim >= 1, "input_dim must be >= 1"),
            (self.bits in (6, 8), "bits must be 6 or 8"),
            (0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer"),
            (self.num_classes >= 1, "num_classes must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidInputError(msg)

    @property
    def hidden_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def layer_counts(self) -> dict:
        return {OpKind.SOFTMAX: self.depth, OpKind.GELU: self.depth,
                OpKind.LAYERNORM: 2 * self.depth + 1}


@dataclass(frozen=True, order=True)
class LayerId:
    index: int
    kind: OpKind = field(compare=False)

    def __str__(self) -> str:
        return f"{self.index}.{self.kind.value}"

    @classmethod
    def parse(cls, text: str) -> "LayerId":
        idx, _, kind = str(text).partition(".")
        try:
            return cls(int(idx), OpKind(kind))
        except ValueError as exc:
            raise InvalidInputError(f"bad layer id {text!r}") from exc


AssignmentMap = dict  # LayerId -> MethodId


@dataclass
class LayerTrace:
    input: np.ndarray
    output: np.ndarray


ActivationTrace = dict  # LayerId -> LayerTrace


@dataclass(frozen=True)
class Model:
    cfg: ModelConfig
    weights: dict

    def replace_weights(self, **updates) -> "Model":
        w = dict(self.weights)
        for name, value in updates.items():
            key = name.replace("__", ".")
            if key not in w:
                raise InvalidInputError(f"unknown weight {key!r}")
            w[key] = np.asarray(value, dtype=np.float32).reshape(w[key].shape)
        return Model(self.cfg, w)


def _weight_shapes(cfg: ModelConfig) -> dict:
    d, h = cfg.embed_dim, cfg.hidden_dim
    shapes = {"embed.w": (cfg.input_dim, d), "embed.b": (d,)}
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.gamma": (d,), p + "ln1.beta": (d,),
            p + "qkv.w": (d, 3 * d), p + "qkv.b": (3 * d,),
            p + "proj.w": (d, d), p + "proj.b": (d,),
            p + "ln2.gamma": (d,), p + "ln2.beta": (d,),
            p + "fc1.w": (d, h), p + "fc1.b": (h,),
            p + "fc2.w": (h, d), p + "fc2.b": (d,),
        })
    shapes.update({"norm.gamma": (d,), "norm.beta": (d,),
                   "head.w": (d, cfg.num_classes), "head.b": (cfg.num_classes,)})
    return shapes


def build_model(cfg: ModelConfig) -> Model:
    """Seeded weights: normal init scaled by ``1/sqrt(fan_in)``, zero biases.

    LayerNorm affine parameters are perturbed around (1, 0) so that the
    quantized gamma/beta paths are exercised.
    """
    rng = np.random.default_rng(cfg.seed)
    weights = {}
    for name, shape in _weight_shapes(cfg).items():
        if name.endswith(".w"):
            w = rng.standard_normal(shape) / math.sqrt(shape[0])
        elif name.endswith(".gamma"):
            w = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith(".beta"):
            w = 0.1 * rng.standard_normal(shape)
        else:
            w = np.zeros(shape)
        weights[name] = w.astype(np.float32)
    return Model(cfg, weights)


def enumerate_nonlinear_layers(m: Model) -> list:
    """Forward-order layer ids.

    Index 0 is the input embedding; each block then contributes LayerNorm,
    Softmax, LayerNorm, GELU; the final LayerNorm closes the list.  This
    puts the softmax of block ``b`` at index ``4b + 2``.
    """
    ids = []
    for b in range(m.cfg.depth):
        base = 4 * b
        ids += [LayerId(base + 1, OpKind.LAYERNORM), LayerId(base + 2, OpKind.SOFTMAX),
                LayerId(base + 3, OpKind.LAYERNORM), LayerId(base + 4, OpKind.GELU)]
    ids.append(LayerId(4 * m.cfg.depth + 1, OpKind.LAYERNORM))
    return ids


def _block_ids(b: int):
    base = 4 * b
    return (LayerId(base + 1, OpKind.LAYERNORM), LayerId(base + 2, OpKind.SOFTMAX),
            LayerId(base + 3, OpKind.LAYERNORM), LayerId(base + 4, OpKind.GELU))


def _affine(m: Model, prefix: str) -> AffineParams:
    return AffineParams(m.weights[prefix + ".gamma"], m.weights[prefix + ".beta"])


def uniform_assignment(m: Model, method: MethodId) -> AssignmentMap:
    """Assign ``method`` everywhere it exists; GELU falls back to I-BERT."""
    method = MethodId(method)
    return {lid: (method if method in OPTIONS[lid.kind] else MethodId.IBERT)
            for lid in enumerate_nonlinear_layers(m)}


def _check_input(m: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = (m.cfg.seq_len, m.cfg.input_dim)
    if x.ndim != 3 or x.shape[1:] != want:
        raise InvalidInputError(f"input must have shape (batch, {want[0]}, {want[1]}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("input contains NaN or Inf")
    return x


# ---------------------------------------------------------------------------
# float path

def _ln(x, p: AffineParams):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * p.gamma + p.beta


def _softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _split_heads(t, heads):
    b, n, d = t.shape
    return t.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(t):
    b, h, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def forward_fp(m: Model, x) -> tuple:
    """Real-arithmetic forward pass; returns logits and the activation trace."""
    x = _check_input(m, x)
    w = {k: v.astype(np.float64) for k, v in m.weights.items()}
    cfg = m.cfg
    trace = {}
    h = x @ w["embed.w"] + w["embed.b"]
    for b in range(cfg.depth):
        p = f"blocks.{b}."
        ln1, sm, ln2, ge = _block_ids(b)
        a = _ln(h, _affine(m, p + "ln1"))
        trace[ln1] = LayerTrace(h, a)
        qkv = a @ w[p + "qkv.w"] + w[p + "qkv.b"]
        q, k, v = (_split_heads(t, cfg.heads) for t in np.split(qkv, 3, axis=-1))
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(cfg.head_dim)
        probs = _softmax(scores)
        trace[sm] = LayerTrace(scores, probs)
        h = h + _merge_heads(probs @ v) @ w[p + "proj.w"] + w[p + "proj.b"]
        a = _ln(h, _affine(m, p + "ln2"))
        trace[ln2] = LayerTrace(h, a)
        u = a @ w[p + "fc1.w"] + w[p + "fc1.b"]
        g = gelu(u)
        trace[ge] = LayerTrace(u, g)
        h = h + g @ w[p + "fc2.w"] + w[p + "fc2.b"]
    fin = LayerId(4 * cfg.depth + 1, OpKind.LAYERNORM)
    a = _ln(h, _affine(m, "norm"))
    trace[fin] = LayerTrace(h, a)
    logits = a.mean(axis=1) @ w["head.w"] + w["head.b"]
    return logits, trace


# ---------------------------------------------------------------------------
# integer path

def _qweight(w: np.ndarray, bits: int) -> QTensor:
    return quantize(w, compute_scale(w, bits))


def _linear_acc(xq: QTensor, w: np.ndarray, b: np.ndarray, bits: int) -> tuple:
    wq = _qweight(w, bits)
    acc_scale = xq.scale.value * wq.scale.value
    acc = xq.ints() @ wq.ints()
    acc = acc + round_half_away(np.asarray(b, dtype=np.float64) / acc_scale).astype(np.int64)
    return acc, acc_scale


def _linear(xq: QTensor, w, b, bits: int, out_bits: int | None = None) -> QTensor:
    acc, acc_scale = _linear_acc(xq, w, b, bits)
    return requantize_acc(acc, acc_scale, out_bits or bits)


def _peak(q: QTensor) -> float:
    return float(np.abs(q.ints()).max()) * q.scale.value if q.values.size else 0.0


def _residual_add(h: QTensor, o: QTensor) -> QTensor:
    """Add two tensors on a common scale covering the sum's bound."""
    target = Scale.from_alpha(_peak(h) + _peak(o), RESIDUAL_BITS)
    total = requantize(h, target).ints() + requantize(o, target).ints()
    return QTensor(np.clip(total, -target.qmax, target.qmax), target)


def calibrate(m: Model, x) -> dict:
    """Per-LayerNorm calibration statistics from a float pass over ``x``."""
    _, trace = forward_fp(m, x)
    stats = {}
    for b in range(m.cfg.depth):
        ln1, _, ln2, _ = _block_ids(b)
        stats[ln1] = calibrate_layernorm(trace[ln1].input, _affine(m, f"blocks.{b}.ln1"))
        stats[ln2] = calibrate_layernorm(trace[ln2].input, _affine(m, f"blocks.{b}.ln2"))
    fin = LayerId(4 * m.cfg.depth + 1, OpKind.LAYERNORM)
    stats[fin] = calibrate_layernorm(trace[fin].input, _affine(m, "norm"))
    return stats


def check_assignment(m: Model, a: AssignmentMap) -> dict:
    """Validate that ``a`` covers exactly the model's layers; returns it normalized."""
    ids = enumerate_nonlinear_layers(m)
    norm = {}
    for lid, method in a.items():
        lid = lid if isinstance(lid, LayerId) else LayerId.parse(lid)
        norm[lid.index] = (lid, MethodId(method))
    out = {}
    for lid in ids:
        got = norm.pop(lid.index, None)
        if got is None or got[0].kind is not lid.kind:
            raise InvalidInputError(f"assignment has no entry for layer {lid}")
        if got[1] not in OPTIONS[lid.kind]:
            raise InvalidInputError(f"{got[1].name} is not a valid method for {lid}")
        out[lid] = got[1]
    if norm:
        extra = ", ".join(str(v[0]) for v in norm.values())
        raise InvalidInputError(f"assignment names layers not in the model: {extra}")
    return out


def forward_quant(m: Model, x, a: AssignmentMap, bits: int | None = None,
                  calib: dict | None = None) -> tuple:
    """Integer forward pass with per-layer kernel dispatch.

    ``calib`` supplies FQ-ViT LayerNorm statistics; when omitted and an
    FQ-ViT LayerNorm is assigned, ``x`` itself is used as calibration data.
    Trace tensors are dequantized.
    """
    x = _check_input(m, x)
    cfg = m.cfg
    bits = bits or cfg.bits
    a = check_assignment(m, a)
    needs_calib = any(k.kind is OpKind.LAYERNORM and v is MethodId.FQVIT for k, v in a.items())
    if needs_calib and calib is None:
        calib = calibrate(m, x)
    calib = calib or {}
    w = m.weights
    trace = {}

    def nonlinear(lid, q, affine=None):
        out = run_kernel(lid.kind, a[lid], q, bits=bits, affine=affine, calib=calib.get(lid))
        trace[lid] = LayerTrace(dequantize(out.q_in), out.dequantize())
        return out

    xq = quantize(x, compute_scale(x, bits))
    h = _linear(xq, w["embed.w"], w["embed.b"], bits, RESIDUAL_BITS)
    for b in range(cfg.depth):
        p = f"blocks.{b}."
        ln1, sm, ln2, ge = _block_ids(b)
        a1 = nonlinear(ln1, h, _affine(m, p + "ln1")).q
        qkv = _linear(a1, w[p + "qkv.w"], w[p + "qkv.b"], bits)
        vals = qkv.ints()
        q, k, v = (_split_heads(t, cfg.heads) for t in np.split(vals, 3, axis=-1))
        scores = q @ k.transpose(0, 1, 3, 2)
        s_scale = qkv.scale.value ** 2 / math.sqrt(cfg.head_dim)
        probs = nonlinear(sm, requantize_acc(scores, s_scale, bits))
        p_int, p_scale = probs.linear_ints()
        ctx = requantize_acc(_merge_heads(p_int @ v), p_scale * qkv.scale.value, bits)
        o = _linear(ctx, w[p + "proj.w"], w[p + "proj.b"], bits, RESIDUAL_BITS)
        h = _residual_add(h, o)
        a2 = nonlinear(ln2, h, _affine(m, p + "ln2")).q
        u = _linear(a2, w[p + "fc1.w"], w[p + "fc1.b"], bits)
        g = nonlinear(ge, u).q
        o = _linear(g, w[p + "fc2.w"], w[p + "fc2.b"], bits, RESIDUAL_BITS)
        h = _residual_add(h, o)
    fin = LayerId(4 * cfg.depth + 1, OpKind.LAYERNORM)
    af = nonlinear(fin, h, _affine(m, "norm")).q
    wq = _qweight(w["head.w"], bits)
    acc_scale = af.scale.value * wq.scale.value / cfg.seq_len
    acc = af.ints().sum(axis=1) @ wq.ints()
    acc = acc + round_half_away(w["head.b"].astype(np.float64) / acc_scale).astype(np.int64)
    return acc.astype(np.float64) * acc_scale, trace


# ---------------------------------------------------------------------------
# data and persistence

def synthetic_batches(cfg: ModelConfig, distribution: str = "gaussian", batches: int = 2,
                      batch_size: int = 8, seed: int | None = None) -> list:
    """Seeded synthetic token embeddings of shape ``(batch_size, seq_len, input_dim)``."""
    if batches < 1 or batch_size < 1:
        raise InvalidInputError("batches and batch_size must be >= 1")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    shape = (batch_size, cfg.seq_len, cfg.input_dim)
    if distribution == "gaussian":
        return [rng.standard_normal(shape) for _ in range(batches)]
    if distribution == "uniform":
        return [rng.uniform(-1.0, 1.0, shape) for _ in range(batches)]
    raise InvalidInputError(f"unknown distribution {distribution!r}")


def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def save_weights(m: Model, path) -> None:
    """Write a JSON manifest at ``path`` and the tensors to ``<path>.bin``."""
    path = Path(path)
    blob = path.with_name(path.name + ".bin")
    names = sorted(m.weights)
    with open(blob, "wb") as fh:
        spans = rawio.write_tensors(fh, [m.weights[n] for n in names])
    manifest = {
        "format": WEIGHT_FORMAT,
        "version": WEIGHT_VERSION,
        "config": config_to_dict(m.cfg),
        "blob": blob.name,
        "tensors": [{"name": n, "shape": list(m.weights[n].shape), "offset": off, "length": ln}
                    for n, (off, ln) in zip(names, spans)],
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_weights(path) -> Model:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != WEIGHT_FORMAT or manifest.get("version") != WEIGHT_VERSION:
        raise ParseError(f"{path}: not a {WEIGHT_FORMAT} v{WEIGHT_VERSION} manifest")
    try:
        cfg = ModelConfig(**manifest["config"])
    except (TypeError, InvalidInputError) as exc:
        raise ParseError(f"{path}: bad config in manifest: {exc}") from exc
    data = (path.parent / manifest["blob"]).read_bytes()
    expected = _weight_shapes(cfg)
    weights = {}
    for entry in manifest["tensors"]:
        name, off, length = entry["name"], entry["offset"], entry["length"]
        arr, end = rawio.decode_tensor(data, off)
        if end - off != length or list(arr.shape) != list(entry["shape"]):
            raise ParseError(f"{path}: tensor {name!r} does not match its manifest entry")
        if tuple(arr.shape) != expected.get(name):
            raise ParseError(f"{path}: tensor {name!r} has shape {arr.shape}, "
                             f"config expects {expected.get(name)}")
        weights[name] = arr
    missing = set(expected) - set(weights)
    if missing:
        raise ParseError(f"{path}: manifest lacks tensors {sorted(missing)}")
    return Model(cfg, weights)


def weights_digest(m: Model) -> str:
    h = hashlib.sha256()
    for name in sorted(m.weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(m.weights[name], dtype="<f4").tobytes())
    return h.hexdigest()
