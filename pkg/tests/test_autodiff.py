import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asrq import autodiff as ad
from asrq.model import Layer, ModelGraph, ToyConfig, build_toy
from asrq.numerics import ConvSpec
from asrq.zeroshot import kl_loss
from asrq.model import running_stats
from conftest import trained
from oracles import central_diff


def _scalar_grad(fn, x):
    tape = ad.Tape()
    leaf = tape.leaf(x)
    out = fn(leaf)
    tape.backward(out)
    return out.value, leaf.grad


@pytest.mark.parametrize("fn", [
    lambda v: ad.total(v * v + 3.0 * v),
    lambda v: ad.total(ad.log(v) / (v + 2.0)),
    lambda v: ad.total((1.0 - v) ** 2 - v.sqrt()),
    lambda v: ad.total(ad.maximum(v, 0.7) * np.arange(1, 6)),
    lambda v: ad.total(2.0 / v - v.sum() * v),
])
def test_node_ops_against_finite_differences(fn):
    x = np.array([0.3, 0.9, 1.4, 2.2, 3.1])
    _, g = _scalar_grad(fn, x)
    f = lambda z: float(fn(ad.Tape().leaf(z)).value)
    for i in range(len(x)):
        assert abs(g[i] - central_diff(f, x, i)) < 1e-6


def test_tape_is_single_use():
    tape = ad.Tape()
    out = ad.total(tape.leaf(np.ones(3)) * 2.0)
    tape.backward(out)
    with pytest.raises(RuntimeError):
        tape.backward(out)


def test_broadcast_gradients_are_summed():
    tape = ad.Tape()
    a = tape.leaf(np.ones((1, 3)))
    out = ad.total(a * np.ones((4, 3)))
    tape.backward(out)
    np.testing.assert_array_equal(a.grad, np.full((1, 3), 4.0))


@st.composite
def models(draw):
    n = draw(st.integers(1, 2))
    cfg = ToyConfig(mel_bins=4, frames=8, channels=tuple(draw(st.integers(2, 5)) for _ in range(n)),
                    kernel_sizes=tuple(draw(st.sampled_from([1, 3])) for _ in range(n)),
                    separable=draw(st.booleans()), residual=draw(st.booleans()), vocab=None)
    return trained(cfg, draw(st.integers(0, 50)))


@settings(max_examples=15)
@given(models(), st.integers(0, 1000))
def test_kl_gradient_matches_finite_differences(model, seed):
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, (3, 4, 8))
    running = running_stats(model)
    loss_fn = lambda s: kl_loss(s, running)
    value, grad = ad.grad_input(model, x, loss_fn)
    f = lambda z: ad.grad_input(model, z, loss_fn)[0]
    for _ in range(6):
        idx = tuple(r.integers(0, n) for n in x.shape)
        fd = central_diff(f, x, idx, h=1e-5)
        assert abs(grad[idx] - fd) <= 1e-4 * max(1.0, abs(fd))


def test_grad_input_accepts_single_example(plain_toy):
    x = np.random.default_rng(0).standard_normal((16, 32))
    v, g = ad.grad_input(plain_toy, x, lambda s: ad.total(s.mean["b0_bn"] ** 2))
    assert g.shape == x.shape and v > 0


def test_constant_loss_has_zero_gradient(plain_toy):
    v, g = ad.grad_input(plain_toy, np.zeros((2, 16, 32)), lambda s: 5.0)
    assert v == 5.0 and not g.any()


def test_no_batchnorm_raises():
    m = build_toy(ToyConfig(channels=(), kernel_sizes=(), vocab=4))
    with pytest.raises(ad.NoStatisticsError):
        ad.grad_input(m, np.zeros((1, 16, 4)), lambda s: 0.0)


def test_unsupported_layer_before_bn_raises():
    spec = ConvSpec(2, 2, 1)
    conv = Layer("conv1d", "c", {"weight": np.ones(spec.weight_shape), "bias": np.zeros(2)}, spec)
    bn = Layer("batchnorm", "bn", {"gamma": np.ones(2), "beta": np.zeros(2), "running_mean": np.zeros(2),
                                   "running_var": np.ones(2)})
    m = ModelGraph([Layer("sigmoid", "s"), conv, bn], (2, 4))
    with pytest.raises(ad.UnsupportedLayerError):
        ad.grad_input(m, np.zeros((1, 2, 4)), lambda s: 0.0)


def test_non_finite_loss_names_the_layer(plain_toy):
    x = np.zeros((1, 16, 32))
    x[0, 3, 5] = np.inf
    with pytest.raises(ad.NumericError) as err:
        ad.grad_input(plain_toy, x, lambda s: ad.total(s.mean["b1_bn"]))
    assert err.value.layer == "b0_conv"
