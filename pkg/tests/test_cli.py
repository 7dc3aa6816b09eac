import json

import numpy as np
import pytest

from mixedq import rawio
from mixedq.cli import main

CONFIG = """
[model]
depth = 2
embed_dim = 32
heads = 4
seq_len = 8
input_dim = 8
seed = 11

[run]
bits = 8
rule = sqnr-diff

[data]
distribution = gaussian
batches = 2
batch_size = 4
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(CONFIG)
    return p


def test_analyze_outputs_and_determinism(config, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["analyze", "--config", str(config), "--out", str(a)]) == 0
    assert main(["analyze", "--config", str(config), "--out", str(b)]) == 0
    names = ["sensitivity.csv", "sensitivity.json", "assignment.json", "histogram.json", "series.csv",
             "report.json", "config.ini"]
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    hist = json.loads((a / "histogram.json").read_text())
    assert {k: sum(v.values()) for k, v in hist.items()} == {"softmax": 2, "gelu": 2, "layernorm": 5}
    report = json.loads((a / "report.json").read_text())
    ref = report["search"]["reference_12_block"]
    assert int(ref["search_space_exact"]) == 3**37 * 2**12
    assert ref["search_space_published"] == "9.47e18"
    assert ref["evaluation_count_exact"] == 135


def test_embedded_config_reproduces(config, tmp_path):
    a = tmp_path / "a"
    main(["analyze", "--config", str(config), "--out", str(a)])
    b = tmp_path / "b"
    assert main(["analyze", "--config", str(a / "config.ini"), "--out", str(b)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_rule_and_seed_overrides(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["analyze", "--config", str(config), "--out", str(a)])
    main(["analyze", "--config", str(config), "--out", str(b), "--rule", "sqnr-output", "--seed", "3"])
    ra = json.loads((a / "report.json").read_text())
    rb = json.loads((b / "report.json").read_text())
    assert rb["rule"] == "sqnr-output"
    assert rb["provenance"]["model_seed"] == 3 and rb["provenance"]["data_seed"] == 3
    assert ra["provenance"]["config_sha256"] != rb["provenance"]["config_sha256"]


def test_select(config, tmp_path, capsys):
    out = tmp_path / "a"
    main(["analyze", "--config", str(config), "--out", str(out)])
    capsys.readouterr()
    assert main(["select", str(out / "sensitivity.csv"), "--rule", "sqnr-diff"]) == 0
    assert json.loads(capsys.readouterr().out) == json.loads((out / "assignment.json").read_text())
    assert main(["select", str(out / "sensitivity.csv"), "--rule", "sqnr-output", "--out", str(tmp_path / "s")]) == 0
    report = json.loads((out / "report.json").read_text())
    assert json.loads((tmp_path / "s" / "assignment.json").read_text()) == report["alternate_rule"]["assignment"]


def test_eval(config, tmp_path, capsys):
    out = tmp_path / "a"
    main(["analyze", "--config", str(config), "--out", str(out)])
    assert main(["eval", str(out / "assignment.json"), "--config", str(config), "--out", str(out)]) == 0
    ev = json.loads((out / "eval.json").read_text())
    assert set(ev["runs"]) == {"mixed", "uniform-ibert", "uniform-fqvit", "uniform-ivit"}
    assert ev["status"] in ("pass", "warn")
    assert (out / "eval_series.csv").exists()


def test_eval_stale_assignment(config, tmp_path, capsys):
    p = tmp_path / "a.json"
    p.write_text(json.dumps({"1.layernorm": "ibert"}))
    assert main(["eval", str(p), "--config", str(config), "--out", str(tmp_path)]) == 1
    assert "no entry" in capsys.readouterr().err


def test_uniform_eval_map(config, tmp_path):
    out = tmp_path / "a"
    main(["analyze", "--config", str(config), "--out", str(out)])
    a = json.loads((out / "assignment.json").read_text())
    uniform = {k: "ivit" for k in a}
    (tmp_path / "u.json").write_text(json.dumps(uniform))
    assert main(["eval", str(tmp_path / "u.json"), "--config", str(config), "--out", str(out)]) == 0
    ev = json.loads((out / "eval.json").read_text())
    assert ev["runs"]["mixed"] == ev["runs"]["uniform-ivit"]


def test_searchspace(capsys):
    assert main(["searchspace", "1", "1", "1"]) == 0
    assert capsys.readouterr().out.split() == ["search", "space:", "18", "evaluations:", "8"]
    assert main(["searchspace", "12", "12", "25"]) == 0
    out = capsys.readouterr().out
    assert str(3**37 * 2**12) in out and "135" in out
    assert main(["searchspace", "0", "0", "0"]) == 0
    assert capsys.readouterr().out.split()[-1] == "0"
    assert main(["searchspace", "-1", "0", "0"]) == 1


def test_kernels_isqrt(capsys):
    assert main(["kernels", "isqrt", "--grid", "0", "1048575"]) == 0
    assert "exact for all inputs" in capsys.readouterr().out


def test_kernels_shift_exp(capsys):
    assert main(["kernels", "shift_exp", "--grid", "-8", "0", "100000"]) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if "max rel error" in l)
    assert float(line.split()[-1]) <= 0.035


def test_kernels_gelu_zero_input(tmp_path, capsys):
    rawio.write_tensor(tmp_path / "z.mxqt", np.zeros(16))
    out = tmp_path / "o.mxqt"
    assert main(["kernels", "gelu_ivit", "--input", str(tmp_path / "z.mxqt"), "--out", str(out)]) == 0
    np.testing.assert_array_equal(rawio.read_tensor(out), 0.0)


def test_kernels_errors(tmp_path, capsys):
    assert main(["kernels", "tanh", "--grid", "0", "1"]) == 1
    assert "valid names" in capsys.readouterr().err
    assert main(["kernels", "gelu_ivit"]) == 1
    assert main(["kernels", "gelu_ivit", "--input", str(tmp_path / "missing.mxqt")]) == 2
    (tmp_path / "bad.mxqt").write_bytes(b"nope")
    assert main(["kernels", "gelu_ivit", "--input", str(tmp_path / "bad.mxqt")]) == 1


def test_bench(tmp_path, capsys):
    assert main(["bench", "--sizes", "10x10", "--reps", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "bench.csv").read_text().startswith("op_kind,method,rows,cols")
    assert main(["bench", "--sizes", "10by10"]) == 1


def test_usage_errors(capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--bits", "7"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\ndepth = two\n")
    assert main(["analyze", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["analyze", "--config", str(tmp_path / "none.ini")]) == 2


def test_unwritable_output(config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["analyze", "--config", str(config), "--out", str(blocker / "sub")]) == 2


def test_file_data_source(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(2):
        rawio.write_tensor(tmp_path / f"b{i}.mxqt", rng.normal(size=(4, 8, 8)))
    cfg = tmp_path / "f.ini"
    cfg.write_text(CONFIG + "files = b0.mxqt, b1.mxqt\n")
    assert main(["analyze", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rawio.write_tensor(tmp_path / "b1.mxqt", rng.normal(size=(4, 8, 7)))
    assert main(["analyze", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
