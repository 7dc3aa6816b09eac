import json

import numpy as np
import pytest

from mixedq.errors import InvalidInputError, ParseError
from mixedq.kernels import MethodId, OpKind
from mixedq.model import (LayerId, ModelConfig, build_model, calibrate, enumerate_nonlinear_layers, forward_fp,
                          forward_quant, load_weights, save_weights, synthetic_batches, uniform_assignment)


@pytest.fixture(scope="module")
def small():
    cfg = ModelConfig(depth=2, embed_dim=32, heads=4, seq_len=16, input_dim=16, seed=3)
    m = build_model(cfg)
    xs = synthetic_batches(cfg, "gaussian", 2, 8)
    return m, xs


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(depth=0), dict(embed_dim=30, heads=4), dict(heads=0), dict(mlp_ratio=0),
        dict(seq_len=1), dict(bits=4), dict(seed=-1), dict(input_dim=0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(InvalidInputError):
            ModelConfig(**kw)

    @pytest.mark.parametrize("depth, counts", [(1, (1, 1, 3)), (2, (2, 2, 5)), (12, (12, 12, 25))])
    def test_layer_counts(self, depth, counts):
        m = build_model(ModelConfig(depth=depth, embed_dim=8, heads=2))
        ids = enumerate_nonlinear_layers(m)
        got = tuple(sum(1 for i in ids if i.kind is k) for k in (OpKind.SOFTMAX, OpKind.GELU, OpKind.LAYERNORM))
        assert got == counts


class TestLayerIds:
    def test_depth_one(self):
        ids = enumerate_nonlinear_layers(build_model(ModelConfig(depth=1)))
        assert [str(i) for i in ids] == ["1.layernorm", "2.softmax", "3.layernorm", "4.gelu", "5.layernorm"]

    def test_strictly_increasing_and_unique(self):
        ids = enumerate_nonlinear_layers(build_model(ModelConfig(depth=12, embed_dim=8, heads=2)))
        idx = [i.index for i in ids]
        assert idx == sorted(set(idx))

    def test_softmax_labels_follow_block_stride(self):
        ids = enumerate_nonlinear_layers(build_model(ModelConfig(depth=12, embed_dim=8, heads=2)))
        sm = [str(i) for i in ids if i.kind is OpKind.SOFTMAX]
        assert sm[:3] == ["2.softmax", "6.softmax", "10.softmax"]
        assert sm[5] == "22.softmax" and sm[-1] == "46.softmax"

    def test_parse(self):
        assert LayerId.parse("6.softmax") == LayerId(6, OpKind.SOFTMAX)
        with pytest.raises(InvalidInputError):
            LayerId.parse("x.softmax")
        with pytest.raises(InvalidInputError):
            LayerId.parse("3.relu")


class TestForwardFp:
    def test_deterministic_weights(self):
        a = build_model(ModelConfig(seed=5))
        b = build_model(ModelConfig(seed=5))
        assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
        c = build_model(ModelConfig(seed=6))
        assert not np.array_equal(a.weights["embed.w"], c.weights["embed.w"])

    def test_zero_input_zero_head(self, small):
        m, _ = small
        m0 = m.replace_weights(head__w=np.zeros_like(m.weights["head.w"]))
        logits, _ = forward_fp(m0, np.zeros((2, 16, 16)))
        np.testing.assert_array_equal(logits, 0.0)

    def test_trace(self, small):
        m, xs = small
        logits, trace = forward_fp(m, xs[0])
        assert logits.shape == (8, m.cfg.num_classes)
        assert list(trace) == enumerate_nonlinear_layers(m)
        for lid, t in trace.items():
            if lid.kind is OpKind.SOFTMAX:
                np.testing.assert_allclose(t.output.sum(-1), 1.0, atol=1e-6)

    def test_shape_mismatch(self, small):
        m, _ = small
        with pytest.raises(InvalidInputError):
            forward_fp(m, np.zeros((2, 16, 15)))
        with pytest.raises(InvalidInputError):
            forward_fp(m, np.zeros((16, 16)))


class TestForwardQuant:
    @pytest.mark.parametrize("method", list(MethodId))
    def test_uniform_runs_and_tracks_float(self, small, method):
        m, xs = small
        calib = calibrate(m, xs[0])
        ref, _ = forward_fp(m, xs[1])
        logits, trace = forward_quant(m, xs[1], uniform_assignment(m, method), calib=calib)
        assert list(trace) == enumerate_nonlinear_layers(m)
        rel = np.mean(np.abs(logits - ref)) / np.mean(np.abs(ref))
        assert rel <= 0.10

    def test_fqvit_uniform_keeps_gelu_on_ibert(self, small):
        m, _ = small
        a = uniform_assignment(m, MethodId.FQVIT)
        assert all(v is MethodId.IBERT for k, v in a.items() if k.kind is OpKind.GELU)
        assert all(v is MethodId.FQVIT for k, v in a.items() if k.kind is not OpKind.GELU)

    def test_deterministic(self, small):
        m, xs = small
        a = uniform_assignment(m, MethodId.IVIT)
        l1, _ = forward_quant(m, xs[0], a)
        l2, _ = forward_quant(m, xs[0], a)
        np.testing.assert_array_equal(l1, l2)

    def test_softmax_rows_sum(self, small):
        m, xs = small
        _, trace = forward_quant(m, xs[0], uniform_assignment(m, MethodId.IBERT))
        for lid, t in trace.items():
            if lid.kind is OpKind.SOFTMAX:
                s = t.output.sum(-1)
                assert s.min() >= 0.95 and s.max() <= 1.05

    def test_missing_entry(self, small):
        m, xs = small
        a = uniform_assignment(m, MethodId.IBERT)
        del a[enumerate_nonlinear_layers(m)[2]]
        with pytest.raises(InvalidInputError, match="no entry"):
            forward_quant(m, xs[0], a)

    def test_invalid_gelu_method(self, small):
        m, xs = small
        a = uniform_assignment(m, MethodId.IBERT)
        gelu_id = next(i for i in a if i.kind is OpKind.GELU)
        a[gelu_id] = MethodId.FQVIT
        with pytest.raises(InvalidInputError):
            forward_quant(m, xs[0], a)

    def test_change_one_layer_only_affects_downstream(self, small):
        m, xs = small
        ids = enumerate_nonlinear_layers(m)
        base = uniform_assignment(m, MethodId.IBERT)
        changed = dict(base)
        target = ids[5]  # second block's softmax
        changed[target] = MethodId.IVIT
        _, t1 = forward_quant(m, xs[0], base)
        _, t2 = forward_quant(m, xs[0], changed)
        for lid in ids[:5]:
            np.testing.assert_array_equal(t1[lid].output, t2[lid].output)
        np.testing.assert_array_equal(t1[target].input, t2[target].input)
        assert not np.array_equal(t1[target].output, t2[target].output)

    def test_six_bit(self, small):
        m, xs = small
        logits, _ = forward_quant(m, xs[0], uniform_assignment(m, MethodId.IBERT), bits=6)
        assert np.all(np.isfinite(logits))


class TestWeightsIO:
    def test_round_trip(self, small, tmp_path):
        m, xs = small
        save_weights(m, tmp_path / "a.json")
        m2 = load_weights(tmp_path / "a.json")
        save_weights(m2, tmp_path / "b.json")
        assert (tmp_path / "a.json.bin").read_bytes() == (tmp_path / "b.json.bin").read_bytes()
        a = json.loads((tmp_path / "a.json").read_text())
        b = json.loads((tmp_path / "b.json").read_text())
        a.pop("blob"), b.pop("blob")
        assert a == b
        np.testing.assert_array_equal(forward_fp(m, xs[0])[0], forward_fp(m2, xs[0])[0])

    def test_dims_mismatch(self, small, tmp_path):
        m, _ = small
        save_weights(m, tmp_path / "w.json")
        doc = json.loads((tmp_path / "w.json").read_text())
        doc["config"]["embed_dim"] = 16
        (tmp_path / "w.json").write_text(json.dumps(doc))
        with pytest.raises(ParseError, match="shape"):
            load_weights(tmp_path / "w.json")

    def test_corrupt_blob(self, small, tmp_path):
        m, _ = small
        save_weights(m, tmp_path / "w.json")
        blob = tmp_path / "w.json.bin"
        blob.write_bytes(b"JUNK" + blob.read_bytes()[4:])
        with pytest.raises(ParseError):
            load_weights(tmp_path / "w.json")

    def test_not_json(self, tmp_path):
        (tmp_path / "w.json").write_text("{")
        with pytest.raises(ParseError):
            load_weights(tmp_path / "w.json")


def test_synthetic_batches():
    cfg = ModelConfig()
    a = synthetic_batches(cfg, "uniform", 3, 4, seed=1)
    b = synthetic_batches(cfg, "uniform", 3, 4, seed=1)
    assert len(a) == 3 and a[0].shape == (4, cfg.seq_len, cfg.input_dim)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(InvalidInputError):
        synthetic_batches(cfg, "cauchy")
