"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, rawio
from .bench import BenchSpec, reference, rows_to_csv, rows_to_table, run_bench
from .errors import MixedQError
from .kernels import (AffineParams, OpKind, calibrate_layernorm, gelu_ibert, gelu_ivit, isqrt_newton,
                      layernorm_fqvit, layernorm_ibert, layernorm_ivit, poly_iexp, shift_exp, softmax_fqvit,
                      softmax_ibert, softmax_ivit)
from .pipeline import RunConfig, parse_config, run_analyze, run_eval, with_overrides, write_eval
from .quant import compute_scale, quantize
from .sensitivity import (DecisionRule, assignment_from_json, assignment_to_json, evaluation_count,
                          search_space_size, select_assignment, table_from_csv)

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 1, 2


class UsageError(MixedQError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# kernels subcommand

def _elementwise(fn, kind):
    def run(x, bits):
        q = quantize(x, compute_scale(x, bits))
        return fn(q).dequantize(), reference(kind, x)
    return run


def _rowwise(fn, kind):
    def run(x, bits):
        x2 = np.atleast_2d(x)
        q = quantize(x2, compute_scale(x2, bits))
        if kind is OpKind.LAYERNORM:
            p = AffineParams.identity(x2.shape[-1])
            out = fn(q, p, calibrate_layernorm(x2, p)) if fn is layernorm_fqvit else fn(q, p)
        else:
            out = fn(q)
        return out.dequantize().reshape(x.shape), reference(kind, x2).reshape(x.shape)
    return run


def _exp_primitive(fn):
    def run(x, bits):
        if np.any(x > 0) and fn is poly_iexp:
            raise UsageError("poly_iexp takes nonpositive inputs")
        q = quantize(x, compute_scale(x, bits))
        return fn(q).dequantize(), np.exp(x)
    return run


KERNEL_RUNNERS = {
    "shift_exp": (_exp_primitive(shift_exp), 16),
    "poly_iexp": (_exp_primitive(poly_iexp), 16),
    "softmax_ibert": (_rowwise(softmax_ibert, OpKind.SOFTMAX), 8),
    "softmax_fqvit": (_rowwise(softmax_fqvit, OpKind.SOFTMAX), 8),
    "softmax_ivit": (_rowwise(softmax_ivit, OpKind.SOFTMAX), 8),
    "gelu_ibert": (_elementwise(gelu_ibert, OpKind.GELU), 8),
    "gelu_ivit": (_elementwise(gelu_ivit, OpKind.GELU), 8),
    "layernorm_ibert": (_rowwise(layernorm_ibert, OpKind.LAYERNORM), 8),
    "layernorm_fqvit": (_rowwise(layernorm_fqvit, OpKind.LAYERNORM), 8),
    "layernorm_ivit": (_rowwise(layernorm_ivit, OpKind.LAYERNORM), 8),
}
KERNEL_NAMES = ("isqrt",) + tuple(KERNEL_RUNNERS)


def _grid(values):
    if len(values) == 2:
        return float(values[0]), float(values[1]), None
    if len(values) == 3:
        n = int(values[2])
        if n < 1:
            raise UsageError("--grid point count must be >= 1")
        return float(values[0]), float(values[1]), n
    raise UsageError("--grid takes LO HI [N]")


def cmd_kernels(args) -> int:
    if args.name not in KERNEL_NAMES:
        raise UsageError(f"unknown kernel {args.name!r}; valid names: {', '.join(KERNEL_NAMES)}")
    if (args.grid is None) == (args.input is None):
        raise UsageError("give exactly one of --grid or --input")
    if args.name == "isqrt":
        if args.input is not None:
            n = rawio.read_tensor(args.input).astype(np.int64).reshape(-1)
        else:
            lo, hi, _ = _grid(args.grid)
            if lo < 0 or hi < lo:
                raise UsageError("isqrt grid needs 0 <= LO <= HI")
            n = np.arange(int(lo), int(hi) + 1, dtype=np.int64)
        got = isqrt_newton(n)
        # brute-force floor sqrt via float estimate plus integer correction
        want = np.floor(np.sqrt(n.astype(np.float64))).astype(np.int64)
        want -= want * want > n
        want += (want + 1) * (want + 1) <= n
        bad = np.flatnonzero(got != want)
        if bad.size:
            print(f"isqrt: {bad.size} mismatches, first at n = {int(n[bad[0]])}")
            return EXIT_USAGE
        print(f"isqrt: exact for all inputs ({n.size} values)")
        return EXIT_OK
    runner, default_bits = KERNEL_RUNNERS[args.name]
    bits = args.bits or default_bits
    if args.input is not None:
        x = rawio.read_tensor(args.input).astype(np.float64)
    else:
        lo, hi, n = _grid(args.grid)
        x = np.linspace(lo, hi, n or 1001)
    out, ref = runner(x, bits)
    err = np.abs(out - ref)
    nz = np.abs(ref) > 0
    rel = float((err[nz] / np.abs(ref[nz])).max()) if nz.any() else 0.0
    print(f"{args.name}: {x.size} values at {bits}-bit input")
    print(f"  max abs error  {float(err.max()):.6g}")
    print(f"  mean abs error {float(err.mean()):.6g}")
    print(f"  max rel error  {rel:.6g}")
    print(f"  max |output|   {float(np.abs(out).max()):.6g}")
    if args.out:
        rawio.write_tensor(args.out, out)
        print(f"  wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# other subcommands

def _run_config(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        cfg = parse_config(path.read_text(), path.parent)
    else:
        cfg = RunConfig()
    return with_overrides(cfg, bits=args.bits, rule=args.rule, seed=args.seed, out=args.out)


def cmd_analyze(args) -> int:
    cfg = _run_config(args)
    report = run_analyze(cfg)
    hist = report["histogram"]
    print(f"analyzed {report['records']} (layer, method) pairs; rule {report['rule']}")
    for kind, counts in hist.items():
        print(f"  {kind:<9} " + "  ".join(f"{m}={n}" for m, n in counts.items()))
    print(f"wrote reports to {cfg.output_dir}")
    return EXIT_OK


def cmd_select(args) -> int:
    table = table_from_csv(Path(args.table).read_text())
    rule = DecisionRule(args.rule or DecisionRule.SQNR_DIFF.value)
    text = assignment_to_json(select_assignment(table, rule))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "assignment.json").write_text(text)
        print(f"wrote {out / 'assignment.json'}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    assignment = assignment_from_json(Path(args.assignment).read_text())
    report = run_eval(cfg, assignment)
    files = write_eval(cfg, report)
    for name, run in report["runs"].items():
        print(f"  {name:<16} logit SQNR {run['logit_sqnr_db']:8.3f} dB")
    print(f"threshold {report['threshold_db']:.3f} dB -> {report['status']}")
    if report["status"] == "warn":
        print("warning: mixed assignment is below the weakest uniform baseline minus 1 dB; "
              "see eval_diff.csv", file=sys.stderr)
    print(f"wrote {', '.join(files)} to {cfg.output_dir}")
    return EXIT_OK


def _size(text: str) -> tuple:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError as exc:
        raise UsageError(f"bad size {text!r}; expected ROWSxCOLS") from exc


def cmd_bench(args) -> int:
    sizes = tuple(_size(s) for s in args.sizes.split(",")) if args.sizes else BenchSpec().sizes
    spec = BenchSpec(sizes=sizes, value_range=tuple(args.range), reps=args.reps,
                     seed=args.seed or 0, bits=args.bits or 8)
    rows = run_bench(spec)
    table = rows_to_table(rows)
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(rows_to_csv(rows))
        (out / "bench.txt").write_text(table)
        print(f"wrote bench.csv, bench.txt to {out}")
    return EXIT_OK


def cmd_searchspace(args) -> int:
    counts = (args.softmax, args.gelu, args.layernorm)
    if min(counts) < 0:
        raise UsageError("layer counts must be nonnegative")
    print(f"search space: {search_space_size(counts)}")
    print(f"evaluations: {evaluation_count(counts)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mixedq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mixedq {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, rule=True):
        sp.add_argument("--config", help="INI file with [model], [run] and [data] sections")
        sp.add_argument("--bits", type=int, choices=(6, 8))
        if rule:
            sp.add_argument("--rule", choices=[r.value for r in DecisionRule])
        sp.add_argument("--seed", type=int, help="overrides both model and data seeds")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("analyze", help="layer-wise sensitivity analysis and selection")
    common(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("select", help="re-run selection on an existing sensitivity.csv")
    sp.add_argument("table", help="sensitivity.csv from analyze")
    sp.add_argument("--rule", choices=[r.value for r in DecisionRule])
    sp.add_argument("--out", help="output directory (default: print to stdout)")
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("eval", help="evaluate an assignment against uniform baselines")
    sp.add_argument("assignment", help="assignment.json")
    common(sp, rule=False)
    sp.set_defaults(func=cmd_eval, rule=None)

    sp = sub.add_parser("bench", help="per-kernel SQNR and latency on random tensors")
    sp.add_argument("--sizes", help="comma-separated ROWSxCOLS list (default 1000x1000,100x100,10x10)")
    sp.add_argument("--range", nargs=2, type=float, default=(-4.0, 4.0), metavar=("LO", "HI"))
    sp.add_argument("--reps", type=int, default=10)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--bits", type=int, choices=(6, 8))
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("kernels", help="run one kernel and report error against float")
    sp.add_argument("name", help=f"one of: {', '.join(KERNEL_NAMES)}")
    sp.add_argument("--grid", nargs="+", metavar="V", help="LO HI [N]: evenly spaced inputs")
    sp.add_argument("--input", help="raw tensor file")
    sp.add_argument("--bits", type=int, help="input quantization bits (default 16 for exp, else 8)")
    sp.add_argument("--out", help="write the dequantized output as a raw tensor file")
    sp.set_defaults(func=cmd_kernels)

    sp = sub.add_parser("searchspace", help="exact search-space size and evaluation count")
    sp.add_argument("softmax", type=int)
    sp.add_argument("gelu", type=int)
    sp.add_argument("layernorm", type=int)
    sp.set_defaults(func=cmd_searchspace)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"mixedq: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MixedQError, ValueError) as exc:
        print(f"mixedq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
