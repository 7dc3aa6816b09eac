"""Least-squares fits for the polynomial constants used by the integer kernels.

Run ``python -m mixedq.fit`` to regenerate ``constants.txt``.  Only
the standard library is used so the printed digits do not depend on the
installed BLAS.

Fits (all continuous L2 on the stated interval):

* ``exp``:  ``a*(r + b)**2 + c ~= exp(r)`` on ``[-ln 2, 0]``.
* ``erf``:  ``a*(min(x, -b) + b)**2 + 1 ~= erf(x)`` on ``[0, ERF_FIT_RANGE]``,
  weighted by ``x**2``.  GELU multiplies the erf error by ``x``, so this is the
  L2 fit of the resulting GELU rather than of erf alone.
* ``pow2``: ``1 - f/2 + k*(f*f - f) ~= 2**-f`` on ``[0, 1]``; the endpoints are
  pinned so the shift-based exponential is exact at integers and monotone.
"""

from __future__ import annotations

import math
import sys
from pathlib import Path

CONSTANTS_PATH = Path(__file__).parent / "kernels" / "constants.txt"
ERF_FIT_RANGE = 4.0
SIMPSON_PANELS = 4096
GOLDEN_TOL = 1e-12


def _simpson(f, lo: float, hi: float, panels: int = SIMPSON_PANELS) -> float:
    h = (hi - lo) / panels
    terms = [f(lo), f(hi)]
    terms += [(4.0 if i % 2 else 2.0) * f(lo + i * h) for i in range(1, panels)]
    return math.fsum(terms) * h / 3.0


def _solve3(m, v):
    """Gaussian elimination with partial pivoting on a 3x3 system."""
    a = [row[:] + [rhs] for row, rhs in zip(m, v)]
    n = 3
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(a[r][col]))
        a[col], a[piv] = a[piv], a[col]
        for r in range(col + 1, n):
            f = a[r][col] / a[col][col]
            for k in range(col, n + 1):
                a[r][k] -= f * a[col][k]
    x = [0.0] * n
    for r in reversed(range(n)):
        x[r] = (a[r][n] - sum(a[r][k] * x[k] for k in range(r + 1, n))) / a[r][r]
    return x


def fit_exp() -> dict:
    lo = -math.log(2.0)
    # moments of the monomials and of r^j * e^r on [lo, 0], in closed form
    mono = [-(lo ** (n + 1)) / (n + 1) for n in range(5)]
    expm = [1.0 - math.exp(lo)]
    for n in range(1, 3):
        expm.append(-(lo**n) * math.exp(lo) - n * expm[n - 1])
    gram = [[mono[j + k] for k in range(3)] for j in range(3)]
    p0, p1, p2 = _solve3(gram, expm)
    b = p1 / (2.0 * p2)
    return {"exp_a": p2, "exp_b": b, "exp_c": p0 - p2 * b * b}


def _erf_fit_for(beta: float) -> tuple[float, float]:
    """Best ``a`` for the clip point ``beta = -b`` and the resulting weighted L2 error."""
    num = _simpson(lambda x: x * x * (math.erf(x) - 1.0) * (x - beta) ** 2, 0.0, beta)
    a = num / (beta**7 / 105.0)  # int_0^beta x^2 (x - beta)^4 dx
    inner = _simpson(lambda x: x * x * (math.erf(x) - 1.0 - a * (x - beta) ** 2) ** 2, 0.0, beta)
    tail = _simpson(lambda x: x * x * (math.erf(x) - 1.0) ** 2, beta, ERF_FIT_RANGE)
    return a, inner + tail


def fit_erf() -> dict:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = 1.0, 3.0
    x1 = hi - inv_phi * (hi - lo)
    x2 = lo + inv_phi * (hi - lo)
    f1 = _erf_fit_for(x1)[1]
    f2 = _erf_fit_for(x2)[1]
    while hi - lo > GOLDEN_TOL:
        if f1 < f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - inv_phi * (hi - lo)
            f1 = _erf_fit_for(x1)[1]
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + inv_phi * (hi - lo)
            f2 = _erf_fit_for(x2)[1]
    beta = (lo + hi) / 2.0
    a, _ = _erf_fit_for(beta)
    return {"erf_a": a, "erf_b": -beta}


def fit_pow2() -> dict:
    ln2 = math.log(2.0)
    # J_n = int_0^1 f^n 2^-f df
    j = [0.5 / ln2]
    for n in range(1, 3):
        j.append(-0.5 / ln2 + n * j[n - 1] / ln2)
    # residual g = 2^-f - 1 + f/2 against basis phi = f^2 - f
    g_phi = (j[2] - j[1]) - (1.0 / 3.0 - 1.0 / 2.0) + 0.5 * (1.0 / 4.0 - 1.0 / 3.0)
    return {"pow2_k": g_phi / (1.0 / 30.0)}


def fit_all() -> dict:
    out = {}
    out.update(fit_exp())
    out.update(fit_erf())
    out.update(fit_pow2())
    return out


def render(constants: dict) -> str:
    lines = ["# generated by `python -m mixedq.fit`; do not edit by hand"]
    lines += [f"{name} = {value!r}" for name, value in constants.items()]
    return "\n".join(lines) + "\n"


def parse(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, _, value = line.partition("=")
        out[name.strip()] = float(value)
    return out


def load_constants(path: Path = CONSTANTS_PATH) -> dict:
    return parse(path.read_text())


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    text = render(fit_all())
    if argv and argv[0] == "--check":
        return 0 if CONSTANTS_PATH.read_text() == text else 1
    CONSTANTS_PATH.write_text(text)
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
