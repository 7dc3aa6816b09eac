import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import erf

from mixedq.errors import InvalidInputError, InvalidStateError
from mixedq.kernels import (OPTIONS, AffineParams, CalibStats, MethodId, OpKind, calibrate_layernorm, gelu_ibert,
                            gelu_ivit, layernorm_fqvit, layernorm_ibert, layernorm_ivit, run_kernel, softmax_fqvit,
                            softmax_ibert, softmax_ivit)
from mixedq.quant import QTensor, Scale, compute_scale, dequantize, quantize

SOFTMAXES = [softmax_ivit, softmax_ibert, softmax_fqvit]
LINEAR_SOFTMAXES = [softmax_ivit, softmax_ibert]
GELUS = [gelu_ibert, gelu_ivit]


def q8(x, alpha=None):
    x = np.asarray(x, dtype=np.float64)
    s = compute_scale(x, 8) if alpha is None else Scale.from_alpha(alpha, 8)
    return quantize(x, s)


def float_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def float_gelu(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def test_option_counts():
    assert {k: len(v) for k, v in OPTIONS.items()} == {OpKind.SOFTMAX: 3, OpKind.GELU: 2, OpKind.LAYERNORM: 3}
    assert MethodId.FQVIT not in OPTIONS[OpKind.GELU]


def test_dispatch_rejects_fqvit_gelu():
    with pytest.raises(InvalidInputError):
        run_kernel(OpKind.GELU, MethodId.FQVIT, q8([1.0]))


class TestSoftmax:
    @pytest.mark.parametrize("fn", LINEAR_SOFTMAXES)
    @pytest.mark.parametrize("d", [1, 4, 7, 64])
    def test_constant_row(self, fn, d):
        out = fn(q8(np.full((3, d), 0.7))).dequantize()
        np.testing.assert_allclose(out, 1.0 / d, atol=2.0**-8)

    def test_fqvit_constant_row_of_four(self):
        out = softmax_fqvit(q8(np.full((2, 4), -1.3)))
        np.testing.assert_array_equal(out.q.values, 2)
        np.testing.assert_array_equal(out.dequantize(), 0.25)

    def test_fqvit_one_hot(self):
        out = softmax_fqvit(q8([[4.0, -4.0, -4.0, -4.0]]), out_bits=8)
        assert out.q.values[0, 0] == 0 and out.dequantize()[0, 0] == 1.0

    @pytest.mark.parametrize("fn", SOFTMAXES)
    def test_one_hot_argmax(self, fn):
        x = np.full((5, 10), -3.0)
        x[np.arange(5), [0, 3, 9, 2, 5]] = 3.0
        out = fn(q8(x)).dequantize()
        np.testing.assert_array_equal(out.argmax(-1), [0, 3, 9, 2, 5])

    @pytest.mark.parametrize("fn", SOFTMAXES)
    def test_nonnegative_and_bounded(self, fn):
        rng = np.random.default_rng(1)
        out = fn(q8(rng.uniform(-4, 4, (200, 33)))).dequantize()
        assert out.min() >= 0 and out.max() <= 1.0

    @pytest.mark.parametrize("fn", LINEAR_SOFTMAXES)
    def test_row_sums(self, fn):
        rng = np.random.default_rng(2)
        s = fn(q8(rng.uniform(-4, 4, (2000, 64)))).dequantize().sum(-1)
        assert s.min() >= 0.95 and s.max() <= 1.05

    def test_fqvit_powers_of_two(self):
        rng = np.random.default_rng(3)
        for bits in (4, 8):
            out = softmax_fqvit(q8(rng.uniform(-4, 4, (100, 20))), out_bits=bits)
            codes = out.q.values
            assert codes.min() >= 0 and codes.max() <= 2**bits - 1
            np.testing.assert_array_equal(out.dequantize(), 2.0 ** -codes.astype(float))

    def test_fqvit_log_domain_factor(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-4, 4, (300, 16))
        q = q8(x)
        ref = float_softmax(dequantize(q))
        out = softmax_fqvit(q, out_bits=8)
        live = out.q.values < 255
        ratio = out.dequantize()[live] / ref[live]
        # half a log step, plus slack for the exp polynomial
        assert np.all(np.abs(np.log2(ratio)) <= 0.5 + 0.01)

    def test_fqvit_bits_validation(self):
        with pytest.raises(InvalidInputError):
            softmax_fqvit(q8([[1.0, 2.0]]), out_bits=6)

    def test_axis(self):
        x = np.random.default_rng(5).uniform(-2, 2, (6, 5))
        a = softmax_ivit(q8(x), axis=0).dequantize()
        b = softmax_ivit(q8(x.T), axis=1).dequantize()
        np.testing.assert_array_equal(a, b.T)
        with pytest.raises(InvalidInputError):
            softmax_ivit(q8(x), axis=2)

    def test_linear_ints_of_log2_output(self):
        out = softmax_fqvit(q8(np.full((1, 4), 1.0)))
        vals, scale = out.linear_ints()
        np.testing.assert_allclose(vals * scale, 0.25)


class TestGelu:
    @pytest.mark.parametrize("fn", GELUS)
    def test_zero(self, fn):
        out = fn(q8(np.zeros(8)))
        np.testing.assert_array_equal(out.dequantize(), 0.0)
        out = fn(q8(np.array([0.0, 1.0, -1.0])))
        assert out.dequantize()[0] == 0.0

    @pytest.mark.parametrize("fn", GELUS)
    def test_saturation(self, fn):
        out = fn(q8(np.array([4.0, -4.0, 0.0]), alpha=4.0)).dequantize()
        assert out[0] == pytest.approx(4.0, rel=0.02)
        assert abs(out[1]) < 0.02

    @pytest.mark.parametrize("fn", GELUS)
    def test_sign_and_lower_bound(self, fn):
        x = np.linspace(-6, 6, 4001)
        out = fn(q8(x)).dequantize()
        assert out.min() >= -0.2
        big = np.abs(x) >= 1
        assert np.all((np.sign(out[big]) == 0) | (np.sign(out[big]) == np.sign(x[big])))

    def test_ibert_grid_error(self):
        x = np.linspace(-4, 4, 20001)
        ref = float_gelu(x)
        out = gelu_ibert(q8(x)).dequantize()
        assert np.abs(out - ref).max() <= 0.02 * np.abs(ref).max()

    @pytest.mark.parametrize("fn", GELUS)
    def test_fixed_alpha(self, fn):
        out = fn(q8(np.linspace(-3, 3, 50)), alpha=2.0)
        assert out.scale.alpha == 2.0
        assert out.dequantize().max() <= 2.0 + out.scale.value

    @given(st.lists(st.floats(-6, 6, allow_nan=False), min_size=1, max_size=30))
    def test_deterministic(self, xs):
        q = q8(np.array(xs))
        for fn in GELUS:
            np.testing.assert_array_equal(fn(q).q.values, fn(q).q.values)


class TestLayerNorm:
    def row_stats(self, out):
        return np.abs(out.mean(-1)).max(), np.abs(out.var(-1) - 1).max()

    @pytest.mark.parametrize("fn", [layernorm_ibert, layernorm_ivit, "fqvit"])
    def test_identity_affine_moments(self, fn):
        rng = np.random.default_rng(6)
        x = rng.normal(0.5, 2.0, (300, 48))
        p = AffineParams.identity(48)
        q = q8(x)
        out = layernorm_fqvit(q, p, calibrate_layernorm(x, p)) if fn == "fqvit" else fn(q, p)
        mean_err, var_err = self.row_stats(out.dequantize())
        assert mean_err <= 0.05 and var_err <= 0.1

    @pytest.mark.parametrize("fn", [layernorm_ibert, layernorm_ivit])
    def test_constant_row_gives_beta(self, fn):
        beta = np.linspace(-1, 1, 8)
        p = AffineParams(np.ones(8), beta)
        out = fn(q8(np.full((2, 8), 1.5)), p)
        np.testing.assert_allclose(out.dequantize(), np.broadcast_to(beta, (2, 8)), atol=out.scale.value)

    def test_fqvit_constant_row_gives_beta(self):
        beta = np.linspace(-1, 1, 8)
        p = AffineParams(np.ones(8), beta)
        x = np.full((2, 8), 1.5)
        out = layernorm_fqvit(q8(x), p, calibrate_layernorm(x, p))
        np.testing.assert_allclose(out.dequantize(), np.broadcast_to(beta, (2, 8)), atol=out.scale.value)

    def test_ivit_agrees_with_ibert(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-4, 4, (500, 64))
        p = AffineParams(1 + 0.1 * rng.standard_normal(64), 0.1 * rng.standard_normal(64))
        a = layernorm_ibert(q8(x), p).q.ints()
        b = layernorm_ivit(q8(x), p).q.ints()
        assert np.abs(a - b).max() <= 1

    def test_feature_mismatch(self):
        with pytest.raises(InvalidInputError):
            layernorm_ibert(q8(np.ones((2, 5))), AffineParams.identity(4))

    def test_fqvit_needs_calibration(self):
        with pytest.raises(InvalidStateError):
            layernorm_fqvit(q8(np.ones((2, 4))), AffineParams.identity(4), None)

    def test_ptf_factors(self):
        c = CalibStats(np.array([4.0, 1.0, 2.0, 0.01, 4.0 * 2**-0.4]), 4.0, 1.0, lo=-3)
        np.testing.assert_array_equal(c.factors(), [0, -2, -1, -3, 0])

    def test_identical_channels_reduce_to_ibert(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(-4, 4, (50, 16))
        x[0, :] = 4.0  # every channel reaches the global max
        x[1, :] = -4.0
        p = AffineParams.identity(16)
        calib = calibrate_layernorm(x, p)
        np.testing.assert_array_equal(calib.factors(), 0)
        q = q8(x)
        a = layernorm_fqvit(q, p, calib).dequantize()
        b = layernorm_ibert(q, p).dequantize()
        np.testing.assert_allclose(a, b, atol=3 * 2 * calib.out_alpha / 255)

    def test_wide_input_is_narrowed(self):
        x = np.random.default_rng(9).normal(size=(4, 32))
        q16 = quantize(x, compute_scale(x, 16))
        out = layernorm_ibert(q16, AffineParams.identity(32))
        assert out.q_in.scale.bits == 8 and out.scale.bits == 8

    def test_six_bit_mode(self):
        x = np.random.default_rng(10).normal(size=(64, 32))
        q = quantize(x, compute_scale(x, 6))
        for fn in (layernorm_ibert, layernorm_ivit):
            out = fn(q, AffineParams.identity(32), bits=6)
            assert out.scale.bits == 6
            assert np.abs(out.dequantize().mean(-1)).max() < 0.2


def test_kernels_deterministic():
    x = np.random.default_rng(11).uniform(-4, 4, (64, 64))
    q = q8(x)
    p = AffineParams.identity(64)
    cal = calibrate_layernorm(x, p)
    for (kind, method) in [(k, m) for k in OpKind for m in OPTIONS[k]]:
        a = run_kernel(kind, method, q, affine=p, calib=cal).q.values
        b = run_kernel(kind, method, q, affine=p, calib=cal).q.values
        np.testing.assert_array_equal(a, b)
