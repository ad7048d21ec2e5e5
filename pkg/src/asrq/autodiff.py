"""Reverse-mode differentiation of BN-statistic losses with respect to the input.

Only the input is ever a leaf; weights are constants. A :class:`Tape` records
each primitive together with a closure that maps the output gradient to the
parents' gradients, and :meth:`Tape.backward` replays those closures once in
reverse order.
"""

from __future__ import annotations

import numpy as np

from .model import ModelGraph, BatchStats, _check_input
from .numerics import ConvSpec, bn_affine, conv1d_core

STD_FLOOR = 1e-8  # added to the batch variance before the square root


class NoStatisticsError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


class UnsupportedLayerError(ValueError):
    pass


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Node:
    __slots__ = ("value", "tape", "parents", "backward_fn", "grad")
    __array_priority__ = 100  # make ndarray <op> Node defer to Node

    def __init__(self, value, tape, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        return other if isinstance(other, Node) else self.tape.constant(other)

    def __add__(self, other):
        other = self._lift(other)
        a, b = self.shape, other.shape
        return self.tape.record(self.value + other.value, (self, other),
                                lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return self.tape.record(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        x, y = self.value, other.value
        return self.tape.record(x * y, (self, other),
                                lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        x, y = self.value, other.value
        return self.tape.record(
            x / y, (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
        )

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, k):
        if k != 2:
            raise NotImplementedError("only squaring is supported")
        return self * self

    def log(self):
        x = self.value
        return self.tape.record(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        r = np.sqrt(self.value)
        return self.tape.record(r, (self,), lambda g: (g / (2 * r),))

    def maximum(self, floor):
        x = self.value
        keep = x >= floor
        return self.tape.record(np.maximum(x, floor), (self,), lambda g: (np.where(keep, g, 0.0),))

    def sum(self):
        shape = self.shape
        return self.tape.record(self.value.sum(), (self,), lambda g: (np.broadcast_to(g, shape).copy(),))


# helpers usable on either nodes or plain arrays, so one loss definition
# serves both evaluation and differentiation


def log(x):
    return x.log() if isinstance(x, Node) else np.log(x)


def maximum(x, floor):
    return x.maximum(floor) if isinstance(x, Node) else np.maximum(x, floor)


def total(x):
    return x.sum() if isinstance(x, Node) else np.sum(x)


class Tape:
    def __init__(self):
        self.nodes = []
        self._consumed = False

    def leaf(self, value):
        node = Node(value, self)
        self.nodes.append(node)
        return node

    def constant(self, value):
        return Node(value, self)

    def record(self, value, parents, backward_fn):
        node = Node(value, self, parents, backward_fn)
        self.nodes.append(node)
        return node

    def backward(self, out: Node):
        if self._consumed:
            raise RuntimeError("tape has already been consumed")
        self._consumed = True
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                g = np.asarray(g, dtype=node.grad.dtype)
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- primitives -----------------------------------------------------------

    def conv1d(self, x: Node, weight, bias, spec: ConvSpec):
        """Batched (N, C, T) convolution; gradient flows to ``x`` only."""
        xv = x.value
        w = np.asarray(weight, dtype=xv.dtype)
        y = conv1d_core(xv, w, spec)
        if bias is not None:
            y = y + np.asarray(bias, dtype=xv.dtype)[:, None]
        n, c, t = xv.shape
        t_out = y.shape[-1]
        g_, k_ = spec.groups, spec.kernel_size
        wg = w.reshape(g_, spec.out_channels // g_, c // g_, k_)
        span = spec.stride * (t_out - 1) + 1

        def back(gy):
            gyg = gy.reshape(n, g_, spec.out_channels // g_, t_out)
            gxp = np.zeros((n, g_, c // g_, t + 2 * spec.padding), dtype=gy.dtype)
            for k in range(k_):
                s = k * spec.dilation
                gxp[..., s : s + span : spec.stride] += np.einsum("goc,ngot->ngct", wg[..., k], gyg)
            gx = gxp.reshape(n, c, -1)
            return (gx[..., spec.padding : spec.padding + t],)

        return self.record(y, (x,), back)

    def batchnorm_eval(self, x: Node, gamma, beta, mean, var, eps):
        scale, shift = bn_affine(gamma, beta, mean, var, eps)
        scale = scale.astype(x.value.dtype)[:, None]
        y = x.value * scale + shift.astype(x.value.dtype)[:, None]
        return self.record(y, (x,), lambda g: (g * scale,))

    def relu(self, x: Node):
        # subgradient 0 at exactly 0
        mask = x.value > 0
        return self.record(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))

    def dense(self, x: Node, weight, bias):
        w = np.asarray(weight, dtype=x.value.dtype)
        y = np.einsum("oc,nct->not", w, x.value)
        if bias is not None:
            y = y + np.asarray(bias, dtype=x.value.dtype)[:, None]
        return self.record(y, (x,), lambda g: (np.einsum("oc,not->nct", w, g),))

    def add(self, a: Node, b: Node):
        return a + b

    def batch_mean(self, x: Node):
        """Per-channel mean over batch and time of an (N, C, T) node."""
        n, c, t = x.shape
        return self.record(x.value.mean(axis=(0, 2)), (x,),
                           lambda g: (np.broadcast_to(g[None, :, None] / (n * t), x.shape).copy(),))

    def batch_std(self, x: Node):
        """Per-channel sqrt(biased variance + STD_FLOOR) over batch and time."""
        n, c, t = x.shape
        centred = x.value - x.value.mean(axis=(0, 2), keepdims=True)
        std = np.sqrt((centred**2).mean(axis=(0, 2)) + STD_FLOOR)
        return self.record(std, (x,), lambda g: ((g / std)[None, :, None] * centred / (n * t),))


def _trace_stats(model: ModelGraph, tape: Tape, x: Node):
    """Run the network on the tape up to the last BatchNorm, returning
    batch statistics of every BN input and the recorded activations."""
    bns = [i for i, l in enumerate(model.layers) if l.kind == "batchnorm"]
    if not bns:
        raise NoStatisticsError("model has no BatchNorm layers to take statistics from")
    mean, std, acts, stack = {}, {}, [], []
    for l in model.layers[: bns[-1] + 1]:
        p = l.params
        if l.kind == "conv1d":
            x = tape.conv1d(x, p["weight"], p["bias"], l.spec)
        elif l.kind == "batchnorm":
            mean[l.name] = tape.batch_mean(x)
            std[l.name] = tape.batch_std(x)
            acts.append((l.name + ":input", x.value))
            x = tape.batchnorm_eval(x, p["gamma"], p["beta"], p["running_mean"], p["running_var"], l.eps)
        elif l.kind == "relu":
            x = tape.relu(x)
        elif l.kind == "dense":
            x = tape.dense(x, p["weight"], p["bias"])
        elif l.kind == "residual_begin":
            stack.append(x)
        elif l.kind == "residual_add":
            x = tape.add(x, stack.pop())
        else:
            raise UnsupportedLayerError(
                f"layer {l.name!r} ({l.kind}) precedes a BatchNorm and is not differentiable here"
            )
        acts.append((l.name, x.value))
    return BatchStats(mean, std), acts


def grad_input(model: ModelGraph, x, loss_fn):
    """Loss value and its gradient with respect to the input batch.

    ``loss_fn`` receives a :class:`BatchStats` of tape nodes (per-channel
    batch mean and std at every BN input) and returns a scalar. BNs normalize
    with their running statistics.
    """
    x = _check_input(model, x)
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    if not np.issubdtype(xb.dtype, np.floating):
        xb = xb.astype(np.float64)
    tape = Tape()
    leaf = tape.leaf(xb)
    with np.errstate(all="ignore"):  # non-finite values are reported below
        stats, acts = _trace_stats(model, tape, leaf)
        loss = loss_fn(stats)
    value = float(loss.value) if isinstance(loss, Node) else float(loss)
    if not np.isfinite(value):
        layer = next((name for name, a in acts if not np.all(np.isfinite(a))), None)
        if layer is None:
            layer = next(
                (n for n in stats.names()
                 if not (np.all(np.isfinite(stats.mean[n].value)) and np.all(np.isfinite(stats.std[n].value)))),
                "loss",
            )
        raise NumericError(f"non-finite loss {value} (first offending layer: {layer})", layer=layer.split(":")[0])
    if isinstance(loss, Node):
        tape.backward(loss)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(xb)
    return value, grad[0] if squeeze else grad
