import json

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from asrq.model import Layer, ModelGraph, forward_f
from asrq.numerics import ConvSpec, batchnorm_f, conv1d_f
from asrq.quantizer import (
    HIST_BINS, MIN_ALPHA, PROB_PARAMS, DegenerateRangeError, FoldError, MinMaxObserver, PercentileObserver,
    QuantConfig, QuantParams, QuantRangeError, dequantize, fold_bn, fold_model, make_config, make_observer,
    quantize,
)

bits_st = st.sampled_from([4, 6, 8, 16])
alpha_st = st.floats(1e-3, 1e3)


def test_eq1_examples():
    p = QuantParams(8, 1.0)
    assert p.scale == 1 / 127
    assert quantize(0.0, p) == 0
    assert quantize(2.0, p) == 127 and quantize(-2.0, p) == -127
    assert quantize(0.5, p) == 64  # 63.5 rounds to even
    assert dequantize(np.int8(127), p) == 1.0 and dequantize(np.int8(0), p) == 0.0
    assert quantize(np.array([1.5, 2.5]) / 127, p).tolist() == [2, 2]


def test_dtypes_and_errors():
    assert quantize(0.3, QuantParams(8, 1.0)).dtype == np.int8
    assert quantize(0.3, QuantParams(12, 1.0)).dtype == np.int16
    with pytest.raises(DegenerateRangeError):
        quantize(1.0, QuantParams(8, 0.0))
    with pytest.raises(QuantRangeError):
        dequantize(np.array([-129], np.int16), QuantParams(8, 1.0))
    with pytest.raises(ValueError):
        QuantParams(1, 1.0)
    with pytest.raises(ValueError):
        QuantParams(8, float("nan"))


@given(bits_st, alpha_st, st.lists(st.floats(-1, 1), min_size=1, max_size=50))
def test_roundtrip_bound(bits, alpha, u):
    p = QuantParams(bits, alpha)
    x = np.array(u) * alpha
    err = np.abs(x - dequantize(quantize(x, p), p))
    assert np.all(err <= p.scale / 2 * (1 + 1e-9))


@given(bits_st, alpha_st, st.floats(-3, 3), st.floats(-3, 3))
def test_monotone(bits, alpha, a, b):
    p = QuantParams(bits, alpha)
    lo, hi = sorted([a * alpha, b * alpha])
    assert quantize(lo, p) <= quantize(hi, p)


@given(bits_st, alpha_st, st.floats(-0.999, 0.999))
def test_symmetric(bits, alpha, u):
    p = QuantParams(bits, alpha)
    x = u * alpha
    frac = abs(x / p.scale) % 1
    assume(abs(frac - 0.5) > 1e-6)
    assert quantize(-x, p) == -quantize(x, p)


def test_observers():
    x = np.linspace(-2, 3, 11)
    assert MinMaxObserver().observe(x).alpha() == 3
    assert PercentileObserver(100).observe(x).alpha() == 3


def test_percentile_with_outlier():
    r = np.random.default_rng(0)
    x = np.concatenate([r.uniform(-1, 1, 999), [100.0]])
    assert PercentileObserver(99).observe(x).alpha() <= 1.1


@given(st.integers(0, 10_000), st.floats(50, 99.9))
def test_percentile_matches_sorted_quantile(seed, p):
    """Histogram quantile agrees with the exact sort-based one within one bin."""
    r = np.random.default_rng(seed)
    x = r.standard_normal(3000) * r.uniform(0.1, 5)
    obs = PercentileObserver(p).observe(x)
    a = np.sort(np.abs(x))
    exact = a[int(np.ceil(p / 100 * len(a))) - 1]
    assert abs(obs.alpha() - exact) <= obs.top / HIST_BINS + 1e-12


def test_percentile_merge_and_rebinning():
    r = np.random.default_rng(1)
    a, b = r.standard_normal(2000), 3 * r.standard_normal(2000)
    merged = PercentileObserver(99).observe(a).merge(PercentileObserver(99).observe(b))
    assert merged.counts.sum() == 4000
    exact = np.quantile(np.abs(np.concatenate([a, b])), 0.99)
    assert abs(merged.alpha() - exact) < 4 * merged.top / HIST_BINS
    assert make_observer("percentile:99.9").p == 99.9
    with pytest.raises(ValueError):
        make_observer("entropy")


def _conv_bn(r, cin=3, cout=4, k=3, groups=1, gamma=None):
    spec = ConvSpec(cin, cout, k, padding=1, groups=groups)
    conv = Layer("conv1d", "c", {"weight": r.standard_normal(spec.weight_shape),
                                 "bias": r.standard_normal(cout)}, spec)
    bn = Layer("batchnorm", "bn", {
        "gamma": r.uniform(0.5, 2, cout) if gamma is None else gamma, "beta": r.standard_normal(cout),
        "running_mean": r.standard_normal(cout), "running_var": r.uniform(0.1, 3, cout)}, eps=1e-5)
    return conv, bn


def test_fold_identity_and_pure_scale():
    r = np.random.default_rng(0)
    conv, bn = _conv_bn(r)
    ident = dict(gamma=np.ones(4), beta=np.zeros(4), running_mean=np.zeros(4), running_var=np.ones(4) - 1e-5)
    f = fold_bn(conv, Layer("batchnorm", "bn", ident, eps=1e-5))
    np.testing.assert_allclose(f.params["weight"], conv.params["weight"], rtol=1e-12)
    np.testing.assert_allclose(f.params["bias"], conv.params["bias"], rtol=1e-12)
    f2 = fold_bn(conv, Layer("batchnorm", "bn", dict(ident, gamma=2 * np.ones(4)), eps=1e-5))
    np.testing.assert_allclose(f2.params["weight"], 2 * conv.params["weight"], rtol=1e-12)
    np.testing.assert_allclose(f2.params["bias"], 2 * conv.params["bias"], rtol=1e-12)


@given(st.integers(0, 10_000), st.sampled_from([1, 2]))
def test_fold_preserves_function(seed, groups):
    r = np.random.default_rng(seed)
    conv, bn = _conv_bn(r, cin=4, cout=4, groups=groups)
    x = r.standard_normal((2, 4, 10))
    p = bn.params
    ref = batchnorm_f(conv1d_f(x, conv.params["weight"], conv.params["bias"], conv.spec), p["gamma"], p["beta"],
                      p["running_mean"], p["running_var"], bn.eps)[0]
    f = fold_bn(conv, bn)
    out = conv1d_f(x, f.params["weight"], f.params["bias"], f.spec)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5 * np.abs(ref).max())


def test_fold_errors(rich_toy):
    r = np.random.default_rng(0)
    conv, bn = _conv_bn(r)
    with pytest.raises(FoldError):
        fold_bn(conv, Layer("batchnorm", "bn", {k: v[:3] for k, v in bn.params.items()}))
    with pytest.raises(FoldError):
        fold_bn(bn, conv)
    folded = fold_model(rich_toy)
    assert not folded.bn_layers and folded.metadata["folded"] == "true"
    x = r.standard_normal((2, 16, 32))
    np.testing.assert_allclose(forward_f(folded, x)[0], forward_f(rich_toy, x)[0], rtol=1e-4, atol=1e-5)


def _single_conv(w):
    spec = ConvSpec(1, 1, 3, padding=1)
    return ModelGraph([Layer("conv1d", "c", {"weight": w.reshape(1, 1, 3), "bias": np.zeros(1)}, spec)], (1, 8))


def test_make_config_examples():
    m = _single_conv(np.array([-0.5, 0.2, 0.4]))
    cfg = make_config(m, [np.ones((1, 1, 8))], "minmax", 8, 8)
    assert cfg["c"].w.alpha == 0.5
    cfg0 = make_config(m, [np.zeros((2, 1, 8))], "minmax", 8, 8)
    assert cfg0["@input"].a.alpha == MIN_ALPHA
    assert any("@input" in w for w in cfg0.meta["warnings"])
    with pytest.raises(FoldError):
        make_config(_with_bn(), [np.zeros((1, 1, 8))])


def _with_bn():
    m = _single_conv(np.ones(3))
    bn = Layer("batchnorm", "bn", {k: np.ones(1) for k in ("gamma", "beta", "running_mean", "running_var")})
    return ModelGraph(m.layers + [bn], (1, 8))


def test_split_batches_equal_concatenated(rich_toy):
    folded = fold_model(rich_toy)
    r = np.random.default_rng(2)
    a, b = r.standard_normal((4, 16, 32)), r.standard_normal((4, 16, 32))
    split = make_config(folded, [a, b])
    joined = make_config(folded, [np.concatenate([a, b])])
    assert split.to_json() == joined.to_json()


def test_conv_feeding_relu_takes_relu_range(plain_toy):
    folded = fold_model(plain_toy)
    x = np.random.default_rng(0).standard_normal((4, 16, 32))
    cfg = make_config(folded, [x])
    relu_out = forward_f(folded, x, taps="all")[1]["b1_relu"]
    assert cfg["b1_conv"].a == cfg["b1_relu"].a
    assert cfg["b1_relu"].a.alpha == np.abs(relu_out).max()


def test_config_structure(rich_toy):
    folded = fold_model(rich_toy)
    cfg = make_config(folded, [np.random.default_rng(0).standard_normal((4, 16, 32))], "percentile:99", 6, 8)
    # ReLU reuses its producer's grid
    assert cfg["b0_relu"].a == cfg["b0_add"].a
    assert cfg["b1_relu"].a == cfg["b1_add"].a
    assert cfg["attn_res"].a == cfg["b1_relu"].a
    assert cfg["attn/ctx"].w is None and cfg["attn/q"].w.bits == 6
    assert cfg["mlp_swish"].w is None and cfg["head"].w.bits == 6
    assert PROB_PARAMS.scale == 1 / 255
    back = QuantConfig.from_json(cfg.to_json())
    assert back.to_json() == cfg.to_json()
    assert json.loads(cfg.to_json())["meta"]["observer"] == "percentile:99"
