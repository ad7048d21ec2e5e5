import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asrq.int_runtime import (
    EXP_A, EXP_B, EXP_C, LN2, CompileError, ContractError, DyadicScale, ExpPlan, HeadroomError,
    IntegerPurityError, QLayer, add_int, compile, conv1d_int, forward_int, forward_sim, iexp, integer_region,
    isigmoid, isoftmax, iswish, load_quantized, lsb_errors, poly_exp, relu_int, requantize, save_quantized,
)
from asrq.model import Layer, ModelGraph, ToyConfig, forward_f
from asrq.numerics import ConvSpec, conv1d_f
from asrq.quantizer import QuantParams, dequantize, fake_quantize, fold_model, make_config, quantize
from conftest import trained
from oracles import round_half_away


def _sigmoid(x):
    return 1 / (1 + np.exp(-x))


# -- dyadic requantization ----------------------------------------------------

def test_dyadic_exact_for_powers_of_two():
    d = DyadicScale.from_real(0.5)
    assert d.multiplier * 2.0**-d.shift == 0.5


@given(st.floats(1e-9, 1e3))
def test_dyadic_normalized_and_accurate(m):
    d = DyadicScale.from_real(m)
    assert 2**30 <= d.multiplier < 2**31
    assert abs(d.value - m) <= m * 2**-30


def test_dyadic_rejects_bad_scales():
    for m in (0.0, -1.0, float("inf"), 1e300):
        with pytest.raises(CompileError):
            DyadicScale.from_real(m)


@given(st.lists(st.integers(-(2**31) + 1, 2**31 - 1), min_size=1, max_size=20), st.floats(1e-6, 4.0))
def test_requantize_matches_exact_rational_rounding(vals, m):
    d = DyadicScale.from_real(m)
    out = requantize(np.array(vals, dtype=np.int64), d)
    expect = [round_half_away(v * d.multiplier, 2**d.shift) for v in vals]
    assert out.tolist() == expect


def test_requantize_ties_go_away_from_zero():
    d = DyadicScale.from_real(0.5)
    assert requantize(np.array([1, -1, 3, -3]), d).tolist() == [1, -1, 2, -2]


def test_requantize_rejects_accumulator_overflow():
    with pytest.raises(HeadroomError):
        requantize(np.array([2**31]), DyadicScale.from_real(0.5))


# -- integer nonlinearities ---------------------------------------------------

def test_polynomial_anchor_points():
    assert abs(EXP_A * EXP_B**2 + EXP_C - 1) < 1e-3
    assert abs(poly_exp(-LN2) - 0.5) < 0.005
    p = np.linspace(-LN2, 0, 10001)
    assert np.max(np.abs(poly_exp(p) / np.exp(p) - 1)) < 0.0032


def test_iexp_sweep():
    s = 10 / 127
    q = np.arange(-127, 1)
    val, s_out = iexp(q, s)
    rel = np.abs(val * s_out / np.exp(q * s) - 1)
    assert rel.max() <= 0.02
    with pytest.raises(ContractError):
        iexp(np.array([1]), s)


@given(st.floats(1e-4, 2.0))
def test_iexp_any_grid(s):
    q = -np.arange(0, int(10 / s) + 1)
    val, s_out = iexp(q, s)
    assert np.max(np.abs(val * s_out / np.exp(q * s) - 1)) <= 0.02


def test_isigmoid_examples_and_sweep():
    s = 8 / 127
    out, so = isigmoid(np.array([0]), s)
    assert abs(out[0] * so - 0.5) <= 1 / 255
    out, so = isigmoid(np.array([-10 * 127 // 8]), s)
    assert out[0] * so <= 1 / 255
    q = np.arange(-127, 128)
    out, so = isigmoid(q, s)
    assert np.max(np.abs(out * so - _sigmoid(q * s))) <= 2 / 255


def test_iswish_relative_error():
    s = 8 / 127
    q = np.arange(-127, 128)
    out, so = iswish(q, s)
    x = q * s
    big = np.abs(x) >= 0.5
    rel = np.abs(out * so - x * _sigmoid(x))[big] / np.abs(x * _sigmoid(x))[big]
    assert rel.max() <= 0.03


def test_isoftmax_examples():
    s = 0.05
    out, so = isoftmax(np.array([[7, 7, 7, 7]]), s)
    assert np.all(np.abs(out * so - 0.25) <= 2 / 255)
    out, so = isoftmax(np.array([[20, 0, 0]]), 1.0)
    assert out.max() * so >= 0.99 - 2 / 255


@settings(max_examples=50)
@given(st.integers(1, 64), st.integers(0, 10_000), st.sampled_from([4, 8, 16]))
def test_isoftmax_random_rows(n, seed, bits):
    r = np.random.default_rng(seed)
    p = QuantParams(bits, float(r.uniform(0.5, 10)))
    q = r.integers(-p.qmax, p.qmax + 1, size=(3, n))
    out, so = isoftmax(q, p.scale)
    x = q * p.scale
    ref = np.exp(x - x.max(-1, keepdims=True))
    ref /= ref.sum(-1, keepdims=True)
    assert np.max(np.abs(out * so - ref)) <= 2 / 255
    if n <= 4:
        assert np.all(np.abs((out * so).sum(-1) - 1) <= 8 / 255)


# -- kernels ------------------------------------------------------------------

def _identity_conv(bits=8):
    spec = ConvSpec(1, 1, 1)
    p = QuantParams(bits, 1.0)
    return QLayer("conv1d", "c", p, spec, {"weight": np.ones((1, 1, 1), np.int8), "bias": np.zeros(1, np.int32)},
                  {"out": DyadicScale.from_real(1.0)})


def test_identity_conv_and_zero_input():
    layer = _identity_conv()
    q = np.arange(-127, 128, dtype=np.int8).reshape(1, 1, -1)
    with integer_region() as c:
        np.testing.assert_array_equal(conv1d_int(q, layer), q)
    assert c.violations == 0 and c.checked > 0
    layer.tensors["bias"] = np.array([37], np.int32)
    layer.scales["out"] = DyadicScale.from_real(0.5)
    assert np.all(conv1d_int(np.zeros((1, 1, 4), np.int8), layer) == requantize(np.array([37]), layer.scales["out"]))


def test_relu_and_add():
    assert relu_int(np.array([-5, 5], np.int8)).tolist() == [0, 5]
    one = DyadicScale.from_real(1.0)
    out = add_int(np.array([100, -3], np.int8), one, np.array([100, 4], np.int8), one, QuantParams(8, 1.0))
    assert out.tolist() == [127, 1]


def test_purity_violation_is_caught():
    layer = _identity_conv()
    with pytest.raises(IntegerPurityError):
        with integer_region(strict=True):
            conv1d_int(np.zeros((1, 1, 3)), layer)
    with integer_region(strict=False) as c:
        relu_int(np.zeros(3))
    assert c.violations == 1


def test_linearity_exactness():
    r = np.random.default_rng(0)
    spec = ConvSpec(3, 2, 3, padding=1)
    wp, xp = QuantParams(8, 0.7), QuantParams(8, 2.0)
    qw = quantize(r.uniform(-0.7, 0.7, spec.weight_shape), wp)
    qx = quantize(r.uniform(-2, 2, (1, 3, 10)), xp)
    acc = conv1d_f(qx.astype(np.int64), qw.astype(np.int64), None, spec)
    ref = conv1d_f(dequantize(qx, xp), dequantize(qw, wp), None, spec)
    np.testing.assert_allclose(acc * wp.scale * xp.scale, ref, atol=1e-9)


# -- compiled models ----------------------------------------------------------

@pytest.fixture(scope="module")
def compiled(rich_toy):
    folded = fold_model(rich_toy)
    calib = [np.random.default_rng(5).standard_normal((8, 16, 32))]
    out = {}
    for wb in (8, 6):
        cfg = make_config(folded, calib, "minmax", wb, 8)
        out[wb] = (folded, cfg, compile(folded, cfg))
    return out


def test_compiled_weights_equal_fake_quantized(compiled):
    folded, cfg, qm = compiled[8]
    for ql in qm.layers:
        if ql.kind == "conv1d":
            w = folded.layer(ql.name).params["weight"]
            np.testing.assert_array_equal(dequantize(ql.tensors["weight"], ql.wparams["weight"]),
                                          fake_quantize(w, cfg[ql.name].w))


@pytest.mark.parametrize("wb", [8, 6])
def test_int_and_sim_agree_everywhere(compiled, wb):
    folded, cfg, qm = compiled[wb]
    x = np.random.default_rng(9).standard_normal((3, 16, 32))
    errs, trace = lsb_errors(folded, cfg, qm, x)
    assert trace.violations == 0
    assert max(errs.values()) <= 1
    logits, _ = forward_int(qm, x)
    sim = forward_sim(folded, cfg, x)
    assert np.max(np.abs(logits - sim)) <= qm.output_params.scale * (1 + 1e-9)


def test_int8_matches_float_argmax(compiled, rich_toy):
    _, _, qm = compiled[8]
    x = np.random.default_rng(11).standard_normal((4, 16, 32))
    agree = (forward_int(qm, x)[0].argmax(-2) == forward_f(rich_toy, x)[0].argmax(-2)).mean()
    assert agree >= 0.95


def test_sim_with_fine_grids_tracks_float():
    folded = fold_model(trained(ToyConfig(residual=True, separable=True), seed=4))
    x = np.random.default_rng(3).standard_normal((2, 16, 32))
    cfg = make_config(folded, [x * 4], "minmax", 16, 16)
    sim = forward_sim(folded, cfg, x)
    assert np.max(np.abs(sim - forward_f(folded, x)[0])) <= 1e-2


def test_headroom_checked_at_compile(plain_toy):
    folded = fold_model(plain_toy)
    cfg = make_config(folded, [np.ones((1, 16, 32))], "minmax", 16, 16)
    with pytest.raises(HeadroomError):
        compile(folded, cfg)
    with pytest.raises(CompileError):
        compile(plain_toy, cfg)  # unfolded


def test_missing_entry(plain_toy):
    folded = fold_model(plain_toy)
    cfg = make_config(folded, [np.ones((1, 16, 32))])
    del cfg.entries["head"]
    with pytest.raises(CompileError):
        compile(folded, cfg)


def test_quantized_roundtrip(compiled, tmp_path):
    _, _, qm = compiled[6]
    save_quantized(qm, tmp_path / "q.aqm")
    back = load_quantized(tmp_path / "q.aqm")
    x = np.random.default_rng(0).standard_normal((2, 16, 32))
    np.testing.assert_array_equal(forward_int(back, x)[0], forward_int(qm, x)[0])
    assert back.weight_bits == 6 and back.layers[1].tensors["weight"].dtype == np.int8


def test_separable_toy_sweep():
    m = fold_model(trained(ToyConfig(separable=True, residual=True, channels=(16, 24), kernel_sizes=(3, 5))))
    x = np.random.default_rng(0).standard_normal((4, 16, 32))
    cfg = make_config(m, [x], "percentile:99.9", 8, 8)
    errs, trace = lsb_errors(m, cfg, compile(m, cfg), x)
    assert max(errs.values()) <= 1 and trace.violations == 0
