"""Uniform symmetric quantization, range observers, BN folding and calibration."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import (
    ATTENTION_PARTS,
    INPUT_TAP,
    Layer,
    ModelGraph,
    forward_f,
)
from .numerics import bn_affine

MIN_ALPHA = 1e-5
HIST_BINS = 2048
# fixed output grid for sigmoid/softmax: the non-negative half of a 9-bit
# symmetric grid, i.e. an unsigned 8-bit grid with step 1/255
PROB_PARAMS_BITS = 9


class DegenerateRangeError(ValueError):
    pass


class QuantRangeError(ValueError):
    pass


class FoldError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    bits: int
    alpha: float

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bit-width must be in [2, 16], got {self.bits}")
        if not self.alpha >= 0 or not np.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def scale(self) -> float:
        return self.alpha / self.qmax

    @property
    def int_dtype(self):
        return np.int8 if self.bits <= 8 else np.int16

    def to_json(self):
        return {"bits": self.bits, "alpha": self.alpha}

    @classmethod
    def from_json(cls, d):
        return cls(int(d["bits"]), float(d["alpha"]))


PROB_PARAMS = QuantParams(PROB_PARAMS_BITS, 1.0)


def quantize(x, p: QuantParams) -> np.ndarray:
    """q = round_half_even(clip(x, -alpha, alpha) / S), clamped to [qmin, qmax]."""
    if p.alpha == 0:
        raise DegenerateRangeError("alpha = 0 gives a degenerate quantization grid")
    x = np.asarray(x, dtype=np.float64)
    q = np.rint(np.clip(x, -p.alpha, p.alpha) / p.alpha * p.qmax)
    return np.clip(q, p.qmin, p.qmax).astype(p.int_dtype)


def dequantize(q, p: QuantParams) -> np.ndarray:
    q = np.asarray(q)
    if q.size and (q.min() < p.qmin or q.max() > p.qmax):
        raise QuantRangeError(f"quantized values outside [{p.qmin}, {p.qmax}]")
    return q.astype(np.float64) * p.scale


def fake_quantize(x, p: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, p), p)


# ---------------------------------------------------------------------------
# observers


class MinMaxObserver:
    kind = "minmax"

    def __init__(self):
        self.lo = np.inf
        self.hi = -np.inf

    def observe(self, x):
        x = np.asarray(x)
        if x.size:
            self.lo = min(self.lo, float(x.min()))
            self.hi = max(self.hi, float(x.max()))
        return self

    def merge(self, other: "MinMaxObserver"):
        self.lo, self.hi = min(self.lo, other.lo), max(self.hi, other.hi)
        return self

    @property
    def seen(self):
        return self.hi >= self.lo

    def alpha(self) -> float:
        if not self.seen:
            raise ValueError("observer has seen no data")
        return max(abs(self.lo), abs(self.hi))


class PercentileObserver:
    """Histogram of |x| with HIST_BINS equal bins over [0, running max].

    When the running max grows, existing counts are moved to the bins that
    contain their old bin centres. Calling :meth:`widen` with the final max
    before filling (two passes) avoids any re-binning.
    """

    kind = "percentile"

    def __init__(self, p: float = 99.0, bins: int = HIST_BINS):
        if not 0 < p <= 100:
            raise ValueError(f"percentile must be in (0, 100], got {p}")
        self.p = p
        self.counts = np.zeros(bins, dtype=np.int64)
        self.top = 0.0

    def widen(self, top: float):
        top = float(top)
        if top <= self.top:
            return self
        if self.counts.any():
            bins = len(self.counts)
            centres = (np.arange(bins) + 0.5) * (self.top / bins)
            idx = np.minimum((centres / top * bins).astype(np.int64), bins - 1)
            moved = np.zeros_like(self.counts)
            np.add.at(moved, idx, self.counts)
            self.counts = moved
        self.top = top
        return self

    def observe(self, x):
        a = np.abs(np.asarray(x, dtype=np.float64)).ravel()
        if not a.size:
            return self
        self.widen(a.max())
        if self.top == 0:
            self.counts[0] += a.size
            return self
        bins = len(self.counts)
        idx = np.minimum((a / self.top * bins).astype(np.int64), bins - 1)
        self.counts += np.bincount(idx, minlength=bins)
        return self

    def merge(self, other: "PercentileObserver"):
        other_counts = other.counts
        if other.top != self.top:
            top = max(self.top, other.top)
            self.widen(top)
            other = PercentileObserver(other.p, len(other.counts)).widen(other.top)
            other.counts = other_counts.copy()
            other.widen(top)
            other_counts = other.counts
        self.counts = self.counts + other_counts
        return self

    @property
    def seen(self):
        return bool(self.counts.any())

    def alpha(self) -> float:
        total = int(self.counts.sum())
        if not total:
            raise ValueError("observer has seen no data")
        cum = np.cumsum(self.counts)
        i = int(np.searchsorted(cum, self.p / 100.0 * total, side="left"))
        i = min(i, len(self.counts) - 1)
        return self.top * (i + 1) / len(self.counts)


def make_observer(kind: str):
    """``"minmax"`` or ``"percentile:<p>"`` (bare ``"percentile"`` means 99)."""
    if kind == "minmax":
        return MinMaxObserver()
    if kind.startswith("percentile"):
        _, _, p = kind.partition(":")
        return PercentileObserver(float(p) if p else 99.0)
    raise ValueError(f"unknown observer kind {kind!r}")


# ---------------------------------------------------------------------------
# BatchNorm folding


def fold_bn(conv: Layer, bn: Layer) -> Layer:
    if conv.kind != "conv1d" or bn.kind != "batchnorm":
        raise FoldError(f"cannot fold {bn.kind} {bn.name!r} into {conv.kind} {conv.name!r}")
    c = conv.spec.out_channels
    if bn.params["gamma"].shape != (c,):
        raise FoldError(f"{bn.name!r} has {bn.params['gamma'].shape[0]} channels, {conv.name!r} has {c}")
    p = bn.params
    scale, shift = bn_affine(
        p["gamma"].astype(np.float64), p["beta"].astype(np.float64),
        p["running_mean"].astype(np.float64), p["running_var"].astype(np.float64), bn.eps,
    )
    w = conv.params["weight"].astype(np.float64) * scale[:, None, None]
    b = conv.params["bias"].astype(np.float64) * scale + shift
    dtype = conv.params["weight"].dtype
    return replace(conv, params={"weight": w.astype(dtype), "bias": b.astype(dtype)})


def fold_model(model: ModelGraph) -> ModelGraph:
    """Fold every BatchNorm into the convolution right before it."""
    out = []
    for l in model.layers:
        if l.kind == "batchnorm":
            if not out or out[-1].kind != "conv1d":
                raise FoldError(f"batchnorm {l.name!r} does not follow a convolution")
            out[-1] = fold_bn(out[-1], l)
        else:
            out.append(l)
    meta = dict(model.metadata, folded="true")
    return ModelGraph(out, model.input_shape, meta)


# ---------------------------------------------------------------------------
# calibration config


@dataclass
class LayerQuant:
    w: QuantParams | None
    a: QuantParams


@dataclass
class QuantConfig:
    """Per-point quantization parameters.

    Keys are layer names, ``"@input"`` for the model boundary and
    ``"<attention>/<part>"`` for the attention projections.
    """

    entries: dict
    weight_bits: int
    act_bits: int
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name) -> LayerQuant:
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def to_json(self) -> str:
        doc = {
            name: {"w": e.w.to_json() if e.w else None, "a": e.a.to_json()}
            for name, e in self.entries.items()
        }
        doc["meta"] = {**self.meta, "weight_bits": self.weight_bits, "act_bits": self.act_bits}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QuantConfig":
        doc = json.loads(text)
        meta = doc.pop("meta")
        entries = {
            name: LayerQuant(QuantParams.from_json(e["w"]) if e["w"] else None, QuantParams.from_json(e["a"]))
            for name, e in doc.items()
        }
        wb, ab = meta.pop("weight_bits"), meta.pop("act_bits")
        return cls(entries, wb, ab, meta)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def weight_tensors(layer: Layer) -> dict:
    """Quantizable weight tensors keyed by config point name."""
    if layer.kind in ("conv1d", "dense"):
        return {layer.name: layer.params["weight"]}
    if layer.kind == "attention":
        p = layer.params
        return {f"{layer.name}/q": p["wq"], f"{layer.name}/k": p["wk"], f"{layer.name}/v": p["wv"],
                layer.name: p["wo"]}
    return {}


def weight_alpha(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(max(abs(w.min()), abs(w.max()))) if w.size else 0.0


def make_config(
    model: ModelGraph,
    calib_data,
    observer_kind: str = "minmax",
    weight_bits: int = 8,
    act_bits: int = 8,
    boundary_weight_bits: int | None = None,
) -> QuantConfig:
    """Calibrate activation ranges on ``calib_data`` and fix weight ranges.

    Activation points are the model input and every layer output. A ReLU
    keeps its producer's grid, so a conv/dense/add feeding a ReLU takes the
    ReLU output range. Sigmoid/softmax outputs use the fixed probability grid.
    ``boundary_weight_bits`` optionally overrides the bit-width of the first
    and last weight layers (off by default).
    """
    if any(l.kind == "batchnorm" for l in model.layers):
        raise FoldError("make_config expects a BN-folded model; call fold_model first")
    calib_data = list(calib_data)
    if not calib_data:
        raise ValueError("calibration needs at least one batch")
    points = [INPUT_TAP]
    for l in model.layers:
        if l.kind == "attention":
            points += [f"{l.name}/{part}" for part in ATTENTION_PARTS]
        points.append(l.name)
    observers = {pt: make_observer(observer_kind) for pt in points}

    if observer_kind != "minmax":
        # first pass fixes histogram ranges so filling never re-bins
        tops = {}
        for batch in calib_data:
            _, taps = forward_f(model, batch, taps="all")
            for pt, v in taps.items():
                tops[pt] = max(tops.get(pt, 0.0), float(np.abs(v).max()) if v.size else 0.0)
        for pt, top in tops.items():
            observers[pt].widen(top)
    for batch in calib_data:
        _, taps = forward_f(model, batch, taps="all")
        for pt, v in taps.items():
            observers[pt].observe(v)

    warnings = []

    def act(pt):
        a = observers[pt].alpha()
        if not a > 0:
            warnings.append(f"{pt}: all-zero activation range widened to {MIN_ALPHA}")
            a = MIN_ALPHA
        return QuantParams(act_bits, a)

    weight_layers = [l.name for l in model.layers if weight_tensors(l)]
    boundary = {weight_layers[0], weight_layers[-1]} if weight_layers and boundary_weight_bits else set()

    def weight_params(pt, w, bits):
        wa = weight_alpha(w)
        if not wa > 0:
            warnings.append(f"{pt}: all-zero weights, alpha widened to {MIN_ALPHA}")
            wa = MIN_ALPHA
        return QuantParams(bits, wa)

    entries = {INPUT_TAP: LayerQuant(None, act(INPUT_TAP))}
    prev = INPUT_TAP
    for i, l in enumerate(model.layers):
        wb = boundary_weight_bits if l.name in boundary else weight_bits
        wq = None
        for pt, w in weight_tensors(l).items():
            if pt == l.name:
                wq = weight_params(pt, w, wb)
            else:
                entries[pt] = LayerQuant(weight_params(pt, w, wb), act(pt))
        if l.kind == "attention":
            ctx = f"{l.name}/ctx"
            entries[ctx] = LayerQuant(None, act(ctx))
        if l.kind in ("sigmoid", "softmax"):
            a = PROB_PARAMS
        elif l.kind in ("relu", "residual_begin"):
            a = entries[prev].a
        else:
            nxt = model.layers[i + 1] if i + 1 < len(model.layers) else None
            a = act(nxt.name if nxt is not None and nxt.kind == "relu" else l.name)
        entries[l.name] = LayerQuant(wq, a)
        prev = l.name
    meta = {"observer": observer_kind, "warnings": warnings}
    return QuantConfig(entries, weight_bits, act_bits, meta)
