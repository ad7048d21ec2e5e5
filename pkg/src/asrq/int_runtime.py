"""Integer-only execution of BN-folded models.

``compile`` turns a float graph plus a :class:`~asrq.quantizer.QuantConfig`
into a :class:`QuantizedModel` holding integer weights, int32 biases and
dyadic (multiply-and-shift) requantization constants. ``forward_int`` runs it
with integer arithmetic only; ``forward_sim`` is the fake-quantized float
reference that rounds at exactly the same points.

Nonlinearities use the second-order polynomial exp approximation

    exp(p) ~= A * (p + B)**2 + C        for p in (-ln2, 0]

combined with exp(x) = 2**-z * exp(p), x = p - z*ln2. The constants are the
published least-squares fit used by integer-only transformer inference; their
max relative error on (-ln2, 0] is about 0.31%.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import container
from .model import INPUT_TAP, ModelGraph, _check_input
from .numerics import ConvSpec, conv1d_core, conv1d_f, dense_f
from .quantizer import PROB_PARAMS, QuantConfig, QuantParams, fold_model, quantize

EXP_A, EXP_B, EXP_C = 0.3585, 1.353, 0.344
LN2 = math.log(2.0)
EXP_FRAC_BITS = 20  # internal exp grid: ln2 spans 2**20 .. 2**21 steps
SIGMOID_FRAC_BITS = 20  # fixed-point fraction used inside iswish
INT32_LIMIT = 2**31


class CompileError(ValueError):
    pass


class HeadroomError(CompileError, OverflowError):
    pass


class ContractError(ValueError):
    pass


class IntegerPurityError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# integer-purity instrumentation


class PurityCounter:
    def __init__(self, strict):
        self.strict = strict
        self.violations = 0
        self.checked = 0


_region = threading.local()


@contextmanager
def integer_region(strict: bool = True):
    """Kernels run inside this context count (or, if strict, reject) any
    non-integer operand or result."""
    counter = PurityCounter(strict)
    prev = getattr(_region, "counter", None)
    _region.counter = counter
    try:
        yield counter
    finally:
        _region.counter = prev


def _int_only(*arrays, where=""):
    counter = getattr(_region, "counter", None)
    for a in arrays:
        if counter is not None:
            counter.checked += 1
        if not np.issubdtype(np.asarray(a).dtype, np.integer):
            if counter is None:
                raise IntegerPurityError(f"{where}: non-integer operand {np.asarray(a).dtype}")
            counter.violations += 1
            if counter.strict:
                raise IntegerPurityError(f"{where}: non-integer operand {np.asarray(a).dtype}")


# ---------------------------------------------------------------------------
# dyadic requantization


@dataclass(frozen=True)
class DyadicScale:
    """M ~= multiplier / 2**shift with multiplier in [2**30, 2**31)."""

    multiplier: int
    shift: int

    @classmethod
    def from_real(cls, m: float) -> "DyadicScale":
        if not m > 0 or not math.isfinite(m):
            raise CompileError(f"requantization scale must be positive and finite, got {m}")
        frac, exp = math.frexp(m)
        mult = round(frac * 2**31)
        if mult == 2**31:
            mult, exp = 2**30, exp + 1
        shift = 31 - exp
        if shift < 0:
            raise CompileError(f"requantization scale {m} too large for a 31-bit multiplier")
        if shift > 62:
            raise CompileError(f"requantization scale {m} too small to represent")
        return cls(mult, shift)

    @property
    def value(self) -> float:
        return self.multiplier / 2.0**self.shift


def _check_acc(v, where):
    if v.size and int(np.abs(v).max()) >= INT32_LIMIT:
        raise HeadroomError(f"{where}: accumulator exceeds int32 range")


def requantize(v, d: DyadicScale, where="requantize"):
    """round_half_away(v * multiplier / 2**shift) in 64-bit integer arithmetic."""
    v = np.asarray(v)
    _int_only(v, where=where)
    _check_acc(v, where)
    prod = v.astype(np.int64) * np.int64(d.multiplier)
    if d.shift == 0:
        return prod
    mag = (np.abs(prod) + (np.int64(1) << np.int64(d.shift - 1))) >> np.int64(d.shift)
    return np.where(prod < 0, -mag, mag)


def _clamp(q, p: QuantParams):
    return np.clip(q, -p.qmax, p.qmax).astype(p.int_dtype)


def _div_round(num, den):
    """Round-half-up integer division for num >= 0, den > 0."""
    return (2 * num + den) // (2 * den)


# ---------------------------------------------------------------------------
# polynomial nonlinearities


@dataclass(frozen=True)
class ExpPlan:
    """Integer constants for exp on an input grid of step ``scale``."""

    k: int  # input is rescaled by 2**k onto the internal grid
    q_ln2: int
    q_b: int
    q_c: int
    out_scale: float
    one: int  # round(1 / out_scale) >> down
    down: int

    @classmethod
    def for_scale(cls, scale: float) -> "ExpPlan":
        if not scale > 0:
            raise CompileError(f"exp input scale must be positive, got {scale}")
        target = LN2 / 2**EXP_FRAC_BITS
        k = math.ceil(math.log2(scale / target))
        fine = scale / 2.0**k
        out_scale = EXP_A * fine * fine
        one = round(1.0 / out_scale)
        down = max(0, one.bit_length() - 31)
        return cls(
            k=k,
            q_ln2=math.floor(LN2 / fine),
            q_b=math.floor(EXP_B / fine),
            q_c=math.floor(EXP_C / (EXP_A * fine * fine)),
            out_scale=out_scale,
            one=one >> down,
            down=down,
        )

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def iexp_apply(q, plan: ExpPlan):
    q = np.asarray(q)
    _int_only(q, where="iexp")
    q = q.astype(np.int64)
    if q.size and q.max() > 0:
        raise ContractError("iexp needs non-positive inputs")
    if plan.k >= 0:
        # anything below this saturates to exp ~ 0 and would overflow when shifted
        floor = -((1 << 62) >> plan.k)
        qf = np.maximum(q, floor) << np.int64(plan.k)
    else:
        s = -plan.k
        qf = -((-q + (np.int64(1) << np.int64(s - 1))) >> np.int64(s))
    z = (-qf) // plan.q_ln2
    qp = qf + z * plan.q_ln2
    poly = (qp + plan.q_b) ** 2 + plan.q_c
    return poly >> np.minimum(z, 62)


def iexp(q, scale: float):
    """Integer exp of non-positive grid values; returns (values, output scale)."""
    plan = ExpPlan.for_scale(scale)
    return iexp_apply(q, plan), plan.out_scale


def _neg_sigmoid_parts(q, plan: ExpPlan):
    """exp(-|x|) rescaled so it and the integer 1 fit in 31 bits."""
    e = iexp_apply(-np.abs(q.astype(np.int64)), plan) >> np.int64(plan.down)
    return e, plan.one + e


def isigmoid_apply(q, plan: ExpPlan):
    q = np.asarray(q)
    _int_only(q, where="isigmoid")
    e, den = _neg_sigmoid_parts(q, plan)
    s = _div_round(e * 255, den)
    return np.where(q > 0, 255 - s, s).astype(PROB_PARAMS.int_dtype)


def isigmoid(q, scale: float):
    """Sigmoid onto the fixed 1/255 probability grid."""
    return isigmoid_apply(q, ExpPlan.for_scale(scale)), PROB_PARAMS.scale


def iswish_apply(q, plan: ExpPlan, d: DyadicScale, out: QuantParams | None):
    q = np.asarray(q)
    _int_only(q, where="iswish")
    e, den = _neg_sigmoid_parts(q, plan)
    one = np.int64(1) << np.int64(SIGMOID_FRAC_BITS)
    s = _div_round(e << np.int64(SIGMOID_FRAC_BITS), den)
    sig = np.where(q > 0, one - s, s)
    y = requantize(q.astype(np.int64) * sig, d, where="iswish")
    return _clamp(y, out) if out is not None else y


def iswish(q, scale: float, out: QuantParams | float | None = None):
    """x * sigmoid(x). ``out`` is the output grid (params or a bare scale);
    by default a grid 2**12 times finer than the input's, unclamped."""
    if out is None:
        out_scale, params = scale / 2**12, None
    elif isinstance(out, QuantParams):
        out_scale, params = out.scale, out
    else:
        out_scale, params = float(out), None
    d = DyadicScale.from_real(scale / 2**SIGMOID_FRAC_BITS / out_scale)
    return iswish_apply(q, ExpPlan.for_scale(scale), d, params), out_scale


def isoftmax_apply(q, plan: ExpPlan):
    q = np.asarray(q)
    _int_only(q, where="isoftmax")
    q = q.astype(np.int64)
    e = iexp_apply(q - q.max(axis=-1, keepdims=True), plan)
    return _div_round(e * 255, e.sum(axis=-1, keepdims=True)).astype(PROB_PARAMS.int_dtype)


def isoftmax(q, scale: float):
    """Softmax over the last axis onto the fixed 1/255 probability grid."""
    return isoftmax_apply(q, ExpPlan.for_scale(scale)), PROB_PARAMS.scale


# real-arithmetic twins of the integer kernels, used by forward_sim


def poly_exp(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.floor(-x / LN2)
    p = x + z * LN2
    return (EXP_A * (p + EXP_B) ** 2 + EXP_C) * np.exp2(-z)


def poly_sigmoid_neg(x):
    """Polynomial sigmoid of -|x|."""
    e = poly_exp(-np.abs(x))
    return e / (1.0 + e)


def poly_sigmoid(x):
    s = poly_sigmoid_neg(x)
    return np.where(np.asarray(x) > 0, 1.0 - s, s)


def poly_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = poly_exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# compiled model


@dataclass
class QLayer:
    kind: str
    name: str
    out: QuantParams
    spec: ConvSpec | None = None
    tensors: dict = field(default_factory=dict)  # integer arrays
    scales: dict = field(default_factory=dict)  # name -> DyadicScale
    plan: ExpPlan | None = None
    points: dict = field(default_factory=dict)  # attention sub-point grids
    wparams: dict = field(default_factory=dict)  # weight grids, for reporting


@dataclass
class QuantizedModel:
    layers: list
    input_params: QuantParams
    input_shape: tuple
    weight_bits: int
    act_bits: int
    metadata: dict = field(default_factory=dict)

    @property
    def output_params(self) -> QuantParams:
        return self.layers[-1].out if self.layers else self.input_params

    def point_params(self) -> dict:
        """Grid of every traced point, keyed like the trace."""
        out = {INPUT_TAP: self.input_params}
        for l in self.layers:
            for part, p in l.points.items():
                out[f"{l.name}/{part}"] = p
            out[l.name] = l.out
        return out


def _quant_bias(b, scale, where):
    qb = np.rint(np.asarray(b, dtype=np.float64) / scale)
    if qb.size and np.abs(qb).max() >= INT32_LIMIT:
        raise HeadroomError(f"{where}: bias does not fit int32 at scale {scale:g}")
    return qb.astype(np.int32)


def _headroom(fan_in, wp: QuantParams, xp: QuantParams, qb, where):
    bound = fan_in * wp.qmax * xp.qmax + (int(np.abs(qb).max()) if qb.size else 0)
    if bound >= INT32_LIMIT:
        raise HeadroomError(f"{where}: worst-case accumulator {bound} exceeds int32")


def _entry(config, name):
    if name not in config:
        raise CompileError(f"quantization config has no entry for {name!r}")
    return config[name]


def _compile_linear(kind, name, w, b, wp, xp, out, spec=None):
    qw = quantize(w, wp)
    qb = _quant_bias(b, wp.scale * xp.scale, name)
    fan_in = int(np.prod(w.shape[1:]))
    _headroom(fan_in, wp, xp, qb, name)
    return QLayer(kind, name, out, spec, {"weight": qw, "bias": qb},
                  {"out": DyadicScale.from_real(wp.scale * xp.scale / out.scale)}, wparams={"weight": wp})


def compile(model: ModelGraph, config: QuantConfig) -> QuantizedModel:
    """Lower a BN-folded float graph to integer weights and dyadic scales."""
    cur = _entry(config, INPUT_TAP).a
    layers, stack = [], []
    for l in model.layers:
        p = l.params
        if l.kind == "batchnorm":
            raise CompileError(f"{l.name!r}: BatchNorm must be folded before compiling")
        if l.kind in ("conv1d", "dense"):
            e = _entry(config, l.name)
            if e.w is None:
                raise CompileError(f"{l.name!r}: config lacks weight parameters")
            ql = _compile_linear(l.kind, l.name, p["weight"], p["bias"], e.w, cur, e.a, l.spec)
        elif l.kind == "relu":
            out = _entry(config, l.name).a
            ql = QLayer("relu", l.name, out)
            if out != cur:
                ql.scales["out"] = DyadicScale.from_real(cur.scale / out.scale)
        elif l.kind == "residual_begin":
            stack.append(cur)
            ql = QLayer("residual_begin", l.name, cur)
        elif l.kind == "residual_add":
            out = _entry(config, l.name).a
            skip = stack.pop()
            ql = QLayer("residual_add", l.name, out, scales={
                "a": DyadicScale.from_real(cur.scale / out.scale),
                "b": DyadicScale.from_real(skip.scale / out.scale),
            })
        elif l.kind in ("sigmoid", "softmax"):
            ql = QLayer(l.kind, l.name, PROB_PARAMS, plan=ExpPlan.for_scale(cur.scale))
        elif l.kind == "swish":
            out = _entry(config, l.name).a
            d = DyadicScale.from_real(cur.scale / 2**SIGMOID_FRAC_BITS / out.scale)
            ql = QLayer("swish", l.name, out, scales={"out": d}, plan=ExpPlan.for_scale(cur.scale))
        elif l.kind == "attention":
            ql = _compile_attention(l, config, cur)
        else:  # pragma: no cover - Layer validates kinds
            raise CompileError(f"unsupported layer kind {l.kind!r}")
        layers.append(ql)
        cur = ql.out
    meta = {k: v for k, v in model.metadata.items()}
    meta["observer"] = str(config.meta.get("observer", ""))
    return QuantizedModel(layers, _entry(config, INPUT_TAP).a, model.input_shape,
                          config.weight_bits, config.act_bits, meta)


def _compile_attention(l, config, xp):
    p, name = l.params, l.name
    d = p["wq"].shape[0]
    ql = QLayer("attention", name, _entry(config, name).a)
    grids = {}
    for part in ("q", "k", "v"):
        e = _entry(config, f"{name}/{part}")
        sub = _compile_linear("dense", f"{name}/{part}", p[f"w{part}"], p[f"b{part}"], e.w, xp, e.a)
        ql.tensors[f"w{part}"], ql.tensors[f"b{part}"] = sub.tensors["weight"], sub.tensors["bias"]
        ql.scales[part] = sub.scales["out"]
        ql.wparams[f"w{part}"] = e.w
        grids[part] = e.a
    if d * grids["q"].qmax * grids["k"].qmax >= INT32_LIMIT:
        raise HeadroomError(f"{name}: attention scores may overflow int32")
    ql.plan = ExpPlan.for_scale(grids["q"].scale * grids["k"].scale / math.sqrt(d))
    grids["probs"] = PROB_PARAMS
    grids["ctx"] = ctx = _entry(config, f"{name}/ctx").a
    ql.scales["ctx"] = DyadicScale.from_real(grids["v"].scale * PROB_PARAMS.scale / ctx.scale)
    e = _entry(config, name)
    sub = _compile_linear("dense", name, p["wo"], p["bo"], e.w, ctx, e.a)
    ql.tensors["wo"], ql.tensors["bo"] = sub.tensors["weight"], sub.tensors["bias"]
    ql.scales["o"] = sub.scales["out"]
    ql.wparams["wo"] = e.w
    ql.points = {k: grids[k] for k in ("q", "k", "v", "probs", "ctx")}
    return ql


# ---------------------------------------------------------------------------
# integer kernels


def conv1d_int(q_x, layer: QLayer):
    _int_only(q_x, layer.tensors["weight"], layer.tensors["bias"], where=layer.name)
    acc = conv1d_core(q_x.astype(np.int64), layer.tensors["weight"].astype(np.int64), layer.spec)
    acc = acc + layer.tensors["bias"].astype(np.int64)[:, None]
    return _clamp(requantize(acc, layer.scales["out"], layer.name), layer.out)


def _matmul_acc(w, b, q_x):
    acc = np.einsum("oc,...ct->...ot", w.astype(np.int64), q_x.astype(np.int64))
    return acc + b.astype(np.int64)[:, None]


def matmul_int(q_x, layer: QLayer):
    _int_only(q_x, layer.tensors["weight"], layer.tensors["bias"], where=layer.name)
    acc = _matmul_acc(layer.tensors["weight"], layer.tensors["bias"], q_x)
    return _clamp(requantize(acc, layer.scales["out"], layer.name), layer.out)


def relu_int(q):
    _int_only(q, where="relu")
    return np.maximum(q, 0).astype(q.dtype)


def add_int(q_a, d_a: DyadicScale, q_b, d_b: DyadicScale, out: QuantParams):
    """Requantize both operands onto the output grid, add, saturate."""
    _int_only(q_a, q_b, where="add")
    return _clamp(requantize(q_a, d_a, "add") + requantize(q_b, d_b, "add"), out)


def _attention_int(q_x, l: QLayer, trace):
    t = l.tensors
    parts = {}
    for part in ("q", "k", "v"):
        acc = _matmul_acc(t[f"w{part}"], t[f"b{part}"], q_x)
        parts[part] = _clamp(requantize(acc, l.scales[part], f"{l.name}/{part}"), l.points[part])
    scores = np.einsum("...dt,...ds->...ts", parts["q"].astype(np.int64), parts["k"].astype(np.int64))
    _check_acc(scores, f"{l.name}/scores")
    probs = isoftmax_apply(scores, l.plan)
    ctx_acc = np.einsum("...ds,...ts->...dt", parts["v"].astype(np.int64), probs.astype(np.int64))
    parts["probs"] = probs
    parts["ctx"] = ctx = _clamp(requantize(ctx_acc, l.scales["ctx"], f"{l.name}/ctx"), l.points["ctx"])
    acc = _matmul_acc(t["wo"], t["bo"], ctx)
    for part, v in parts.items():
        trace[f"{l.name}/{part}"] = v
    return _clamp(requantize(acc, l.scales["o"], l.name), l.out)


@dataclass
class IntTrace:
    tensors: dict
    violations: int
    checked: int


def forward_int(qm: QuantizedModel, x, strict: bool = True):
    """Quantize once at the input, run integer kernels, dequantize the logits."""
    x = np.asarray(x)
    if x.ndim not in (2, 3) or x.shape[-2] != qm.input_shape[0]:
        raise ValueError(f"input shape {x.shape} does not match model input {qm.input_shape}")
    q = quantize(x, qm.input_params)
    trace = {INPUT_TAP: q}
    with integer_region(strict) as counter:
        stack = []
        for l in qm.layers:
            if l.kind == "conv1d":
                q = conv1d_int(q, l)
            elif l.kind == "dense":
                q = matmul_int(q, l)
            elif l.kind == "relu":
                q = relu_int(q)
                if "out" in l.scales:
                    q = _clamp(requantize(q, l.scales["out"], l.name), l.out)
            elif l.kind == "residual_begin":
                stack.append(q)
            elif l.kind == "residual_add":
                q = add_int(q, l.scales["a"], stack.pop(), l.scales["b"], l.out)
            elif l.kind == "sigmoid":
                q = isigmoid_apply(q, l.plan)
            elif l.kind == "softmax":
                q = isoftmax_apply(q, l.plan)
            elif l.kind == "swish":
                q = iswish_apply(q, l.plan, l.scales["out"], l.out)
            elif l.kind == "attention":
                q = _attention_int(q, l, trace)
            _int_only(q, where=l.name)
            trace[l.name] = q
    logits = q.astype(np.float64) * qm.output_params.scale
    return logits, IntTrace(trace, counter.violations, counter.checked)


# ---------------------------------------------------------------------------
# simulated quantization


def _round_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def fq_away(x, p: QuantParams):
    """Fake-quantize with the requantizer's rounding (half away from zero)."""
    return np.clip(_round_away(np.asarray(x, dtype=np.float64) / p.scale), -p.qmax, p.qmax) * p.scale


def _prob_grid(s_neg, x):
    """Mirror of the integer sigmoid: round the negative-side value, reflect."""
    s = np.floor(s_neg * 255 + 0.5)
    return np.where(x > 0, 255 - s, s) * PROB_PARAMS.scale


def _sim_linear(w, b, wp, xp):
    wq = quantize(w, wp).astype(np.float64) * wp.scale
    bq = np.rint(np.asarray(b, dtype=np.float64) / (wp.scale * xp.scale)) * (wp.scale * xp.scale)
    return wq, bq


def forward_sim(model: ModelGraph, config: QuantConfig, x, trace: bool = False, feed: dict | None = None):
    """Fake-quantized float forward pass mirroring ``forward_int``.

    ``feed`` optionally maps point names to replacement values that are
    propagated instead of the simulated ones (the simulated value is still
    recorded), which lets each layer be checked in isolation against the
    integer path.
    """
    if any(l.kind == "batchnorm" for l in model.layers):
        model = fold_model(model)
    x = _check_input(model, x)
    rec = {}

    def point(name, v):
        rec[name] = v
        return feed[name] if feed is not None and name in feed else v

    cur = config[INPUT_TAP].a
    v = point(INPUT_TAP, quantize(x, cur).astype(np.float64) * cur.scale)
    stack = []
    for l in model.layers:
        p, e = l.params, config[l.name] if l.name in config else None
        if l.kind == "conv1d":
            wq, bq = _sim_linear(p["weight"], p["bias"], e.w, cur)
            v, cur = fq_away(conv1d_f(v, wq, bq, l.spec), e.a), e.a
        elif l.kind == "dense":
            wq, bq = _sim_linear(p["weight"], p["bias"], e.w, cur)
            v, cur = fq_away(dense_f(v, wq, bq), e.a), e.a
        elif l.kind == "relu":
            v = np.maximum(v, 0.0)
            if e.a != cur:
                v, cur = fq_away(v, e.a), e.a
        elif l.kind == "residual_begin":
            stack.append((v, cur))
        elif l.kind == "residual_add":
            sv, _ = stack.pop()
            s = e.a.scale
            v = np.clip(_round_away(v / s) + _round_away(sv / s), -e.a.qmax, e.a.qmax) * s
            cur = e.a
        elif l.kind == "sigmoid":
            v, cur = _prob_grid(poly_sigmoid_neg(v), v), PROB_PARAMS
        elif l.kind == "softmax":
            v, cur = fq_away(poly_softmax(v), PROB_PARAMS), PROB_PARAMS
        elif l.kind == "swish":
            v, cur = fq_away(v * poly_sigmoid(v), e.a), e.a
        elif l.kind == "attention":
            v, cur = _sim_attention(l, config, v, cur, point)
        v = point(l.name, v)
    return (v, rec) if trace else v


def _sim_attention(l, config, x, xp, point):
    p, name = l.params, l.name
    parts = {}
    for part in ("q", "k", "v"):
        e = config[f"{name}/{part}"]
        wq, bq = _sim_linear(p[f"w{part}"], p[f"b{part}"], e.w, xp)
        parts[part] = point(f"{name}/{part}", fq_away(dense_f(x, wq, bq), e.a))
    d = p["wq"].shape[0]
    scores = np.einsum("...dt,...ds->...ts", parts["q"], parts["k"]) / math.sqrt(d)
    probs = point(f"{name}/probs", fq_away(poly_softmax(scores), PROB_PARAMS))
    ctx_p = config[f"{name}/ctx"].a
    ctx = point(f"{name}/ctx", fq_away(np.einsum("...ds,...ts->...dt", parts["v"], probs), ctx_p))
    e = config[name]
    wq, bq = _sim_linear(p["wo"], p["bo"], e.w, ctx_p)
    return fq_away(dense_f(ctx, wq, bq), e.a), e.a


def lsb_errors(model: ModelGraph, config: QuantConfig, qm: QuantizedModel, x):
    """Largest |integer - simulated| difference at every traced point, in grid
    steps of that point.

    Each simulated layer is fed the integer path's own input, so the numbers
    measure per-layer disagreement rather than compounded drift. Returns the
    per-point errors and the integer trace.
    """
    _, trace = forward_int(qm, x)
    grids = qm.point_params()
    feed = {k: v.astype(np.float64) * grids[k].scale for k, v in trace.tensors.items()}
    _, sim = forward_sim(model, config, x, trace=True, feed=feed)
    errs = {}
    for k, q in trace.tensors.items():
        if k in sim and q.size:
            # simulated values sit on the grid up to float error; compare indices
            idx = np.rint(sim[k] / grids[k].scale).astype(np.int64)
            errs[k] = int(np.abs(q.astype(np.int64) - idx).max())
    return errs, trace


# ---------------------------------------------------------------------------
# serialization


def _int_tag(arr):
    return {np.dtype(np.int8): "int8", np.dtype(np.int16): "int16", np.dtype(np.int32): "int32"}[arr.dtype]


def save_quantized(qm: QuantizedModel, path) -> None:
    layers, tensors = [], {}
    for l in qm.layers:
        layers.append({
            "name": l.name,
            "kind": l.kind,
            "spec": None if l.spec is None else {k: getattr(l.spec, k) for k in l.spec.__dataclass_fields__},
            "out": l.out.to_json(),
            "scales": {k: [d.multiplier, d.shift] for k, d in l.scales.items()},
            "plan": None if l.plan is None else l.plan.to_json(),
            "points": {k: p.to_json() for k, p in l.points.items()},
            "wparams": {k: p.to_json() for k, p in l.wparams.items()},
            "tensors": list(l.tensors),
        })
        for k, arr in l.tensors.items():
            tensors[f"{l.name}.{k}"] = (_int_tag(arr), arr)
    header = {
        "format": "quantized",
        "input_shape": list(qm.input_shape),
        "input_params": qm.input_params.to_json(),
        "weight_bits": qm.weight_bits,
        "act_bits": qm.act_bits,
        "metadata": qm.metadata,
        "layers": layers,
    }
    container.write(path, header, tensors)


def quantized_from_container(header, tensors) -> QuantizedModel:
    if header.get("format") != "quantized":
        raise container.FormatError(f"expected a quantized model, found format {header.get('format')!r}")
    try:
        layers = []
        for ent in header["layers"]:
            layers.append(QLayer(
                kind=ent["kind"],
                name=ent["name"],
                out=QuantParams.from_json(ent["out"]),
                spec=ConvSpec(**ent["spec"]) if ent["spec"] else None,
                tensors={k: tensors[f"{ent['name']}.{k}"] for k in ent["tensors"]},
                scales={k: DyadicScale(int(m), int(n)) for k, (m, n) in ent["scales"].items()},
                plan=ExpPlan(**ent["plan"]) if ent["plan"] else None,
                points={k: QuantParams.from_json(v) for k, v in ent["points"].items()},
                wparams={k: QuantParams.from_json(v) for k, v in ent["wparams"].items()},
            ))
        return QuantizedModel(layers, QuantParams.from_json(header["input_params"]), tuple(header["input_shape"]),
                              int(header["weight_bits"]), int(header["act_bits"]), dict(header["metadata"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise container.FormatError(f"inconsistent quantized-model header: {exc}") from exc


def load_quantized(path) -> QuantizedModel:
    return quantized_from_container(*container.read(path))
