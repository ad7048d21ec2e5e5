"""Float layer graphs: construction, BatchNorm statistics, forward passes and I/O."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import container
from .numerics import (
    ConvSpec,
    ShapeError,
    batchnorm_f,
    channel_stats,
    conv1d_f,
    dense_f,
    relu_f,
    sigmoid_f,
    softmax_f,
    swish_f,
)

KINDS = (
    "conv1d",
    "batchnorm",
    "relu",
    "dense",
    "residual_begin",
    "residual_add",
    "attention",
    "sigmoid",
    "swish",
    "softmax",
)
PARAM_NAMES = {
    "conv1d": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "running_mean", "running_var"),
    "dense": ("weight", "bias"),
    "attention": ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"),
}
ATTENTION_PARTS = ("q", "k", "v", "ctx")
INPUT_TAP = "@input"
RESERVED_NAMES = {"meta", INPUT_TAP}


class ConfigError(ValueError):
    pass


class GraphError(ValueError):
    pass


@dataclass
class Layer:
    kind: str
    name: str
    params: dict = field(default_factory=dict)
    spec: ConvSpec | None = None
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv1d" and self.spec is None:
            raise GraphError(f"conv1d layer {self.name!r} needs a ConvSpec")

    def __eq__(self, other):
        if not isinstance(other, Layer):
            return NotImplemented
        return (
            (self.kind, self.name, self.spec, self.eps) == (other.kind, other.name, other.spec, other.eps)
            and self.params.keys() == other.params.keys()
            and all(
                self.params[k].dtype == other.params[k].dtype and np.array_equal(self.params[k], other.params[k])
                for k in self.params
            )
        )


@dataclass
class ModelGraph:
    layers: list
    input_shape: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise GraphError("layer names must be unique")
        bad = RESERVED_NAMES.intersection(names)
        if bad or any("/" in n for n in names):
            raise GraphError(f"reserved or invalid layer names: {sorted(bad) or names}")
        infer_shapes(self, self.input_shape[1])

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        return (
            self.input_shape == other.input_shape
            and self.metadata == other.metadata
            and self.layers == other.layers
        )

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def bn_layers(self):
        return [l for l in self.layers if l.kind == "batchnorm"]


@dataclass
class BatchStats:
    """Per-BatchNorm, per-channel mean and standard deviation.

    Values are arrays, or autodiff nodes while a gradient is being traced.
    """

    mean: dict
    std: dict

    def names(self):
        return list(self.mean)


def running_stats(model: ModelGraph, sigma: str = "std") -> BatchStats:
    """Stored BN statistics; ``sigma="var"`` uses the running variance itself as sigma."""
    if sigma not in ("std", "var"):
        raise ValueError(f"sigma must be 'std' or 'var', got {sigma!r}")
    mean, std = {}, {}
    for l in model.bn_layers:
        var = l.params["running_var"].astype(np.float64)
        mean[l.name] = l.params["running_mean"].astype(np.float64)
        std[l.name] = np.sqrt(var) if sigma == "std" else var
    return BatchStats(mean, std)


def infer_shapes(model: ModelGraph, frames: int) -> list[tuple[int, int]]:
    """(channels, frames) after each layer; raises GraphError on incompatibility."""
    c, t = model.input_shape[0], frames
    stack, shapes = [], []
    for l in model.layers:
        p = l.params
        if l.kind == "conv1d":
            if l.spec.in_channels != c:
                raise GraphError(f"{l.name}: expects {l.spec.in_channels} channels, gets {c}")
            c, t = l.spec.out_channels, l.spec.out_length(t)
            if t < 1:
                raise GraphError(f"{l.name}: output length {t} < 1")
        elif l.kind == "batchnorm":
            for k in PARAM_NAMES["batchnorm"]:
                if p[k].shape != (c,):
                    raise GraphError(f"{l.name}: {k} has shape {p[k].shape}, expected ({c},)")
        elif l.kind == "dense":
            if p["weight"].shape[1] != c:
                raise GraphError(f"{l.name}: expects {p['weight'].shape[1]} channels, gets {c}")
            c = p["weight"].shape[0]
        elif l.kind == "attention":
            d = p["wq"].shape[0]
            if p["wq"].shape[1] != c or p["wk"].shape != (d, c) or p["wv"].shape != (d, c):
                raise GraphError(f"{l.name}: Q/K/V projections do not match {c} channels")
            if p["wo"].shape != (c, d):
                raise GraphError(f"{l.name}: output projection {p['wo'].shape} != ({c}, {d})")
        elif l.kind == "residual_begin":
            stack.append((c, t))
        elif l.kind == "residual_add":
            if not stack:
                raise GraphError(f"{l.name}: residual_add without residual_begin")
            if stack.pop() != (c, t):
                raise GraphError(f"{l.name}: residual branch shape mismatch")
        if l.kind == "conv1d" and p["weight"].shape != l.spec.weight_shape:
            raise GraphError(f"{l.name}: weight shape {p['weight'].shape} != {l.spec.weight_shape}")
        if l.kind in ("conv1d", "dense"):
            if p["bias"].shape != (c,):
                raise GraphError(f"{l.name}: bias shape {p['bias'].shape} != ({c},)")
        shapes.append((c, t))
    if stack:
        raise GraphError("unclosed residual_begin")
    return shapes


# ---------------------------------------------------------------------------
# toy architecture


@dataclass(frozen=True)
class ToyConfig:
    """MiniQuartz: conv-BN-ReLU blocks, optional attention block, per-frame head."""

    mel_bins: int = 16
    frames: int = 32
    channels: tuple = (16, 16)
    kernel_sizes: tuple = (5, 5)
    separable: bool = False
    residual: bool = False
    attention: bool = False
    mlp_hidden: int | None = None
    vocab: int | None = 8
    eps: float = 1e-5

    def validate(self):
        if len(self.channels) != len(self.kernel_sizes):
            raise ConfigError("channels and kernel_sizes must have equal length")
        if self.mel_bins < 1 or self.frames < 1:
            raise ConfigError("mel_bins and frames must be positive")
        if any(c < 1 for c in self.channels):
            raise ConfigError(f"channel widths must be positive, got {self.channels}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"same-padding needs odd kernel sizes, got {self.kernel_sizes}")
        if self.vocab is not None and self.vocab < 2:
            raise ConfigError("vocab needs at least a blank and one token")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ConfigError("mlp_hidden must be positive")


def _gauss(rng, shape, fan_in):
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)


def _bn(name, c, eps):
    return Layer(
        "batchnorm",
        name,
        {
            "gamma": np.ones(c, np.float32),
            "beta": np.zeros(c, np.float32),
            "running_mean": np.zeros(c, np.float32),
            "running_var": np.ones(c, np.float32),
        },
        eps=eps,
    )


def _conv(rng, name, cin, cout, k, groups=1):
    spec = ConvSpec(cin, cout, k, padding=k // 2, groups=groups)
    w = _gauss(rng, spec.weight_shape, (cin // groups) * k)
    return Layer("conv1d", name, {"weight": w, "bias": np.zeros(cout, np.float32)}, spec)


def _dense(rng, name, cin, cout):
    return Layer("dense", name, {"weight": _gauss(rng, (cout, cin), cin), "bias": np.zeros(cout, np.float32)})


def build_toy(config: ToyConfig = ToyConfig(), seed: int = 0) -> ModelGraph:
    config.validate()
    rng = np.random.default_rng(seed)
    layers, cin = [], config.mel_bins
    for i, (c, k) in enumerate(zip(config.channels, config.kernel_sizes)):
        res = config.residual and cin == c
        if res:
            layers.append(Layer("residual_begin", f"b{i}_res"))
        if config.separable:
            layers.append(_conv(rng, f"b{i}_dw", cin, cin, k, groups=cin))
            layers.append(_conv(rng, f"b{i}_pw", cin, c, 1))
        else:
            layers.append(_conv(rng, f"b{i}_conv", cin, c, k))
        layers.append(_bn(f"b{i}_bn", c, config.eps))
        if res:
            layers.append(Layer("residual_add", f"b{i}_add"))
        layers.append(Layer("relu", f"b{i}_relu"))
        cin = c
    if config.attention:
        hidden = config.mlp_hidden or 2 * cin
        p = {}
        for part in ("q", "k", "v", "o"):
            p[f"w{part}"] = _gauss(rng, (cin, cin), cin)
            p[f"b{part}"] = np.zeros(cin, np.float32)
        layers += [
            Layer("residual_begin", "attn_res"),
            Layer("attention", "attn", p),
            Layer("residual_add", "attn_add"),
            _dense(rng, "mlp_up", cin, hidden),
            Layer("swish", "mlp_swish"),
            _dense(rng, "mlp_down", hidden, cin),
        ]
    if config.vocab is not None:
        layers.append(_dense(rng, "head", cin, config.vocab))
    meta = {"arch": "MiniQuartz", "seed": str(seed)}
    return ModelGraph(layers, (config.mel_bins, config.frames), meta)


# ---------------------------------------------------------------------------
# forward


def attention_f(x, p):
    """Single-head scaled dot-product self-attention over frames.

    Returns the output and the intermediate projections keyed by part name.
    """
    q = dense_f(x, p["wq"], p["bq"])
    k = dense_f(x, p["wk"], p["bk"])
    v = dense_f(x, p["wv"], p["bv"])
    scores = np.einsum("...dt,...ds->...ts", q, k) / np.sqrt(q.shape[-2]).astype(q.dtype)
    probs = softmax_f(scores)
    ctx = np.einsum("...ds,...ts->...dt", v, probs)
    out = dense_f(ctx, p["wo"], p["bo"])
    return out, {"q": q, "k": k, "v": v, "ctx": ctx}


def _check_input(model, x):
    x = np.asarray(x)
    if x.ndim not in (2, 3) or x.shape[-2] != model.input_shape[0]:
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x


def _run(model, x, bn_mode="eval", tap=None, bn_hook=None):
    """Shared layer interpreter. ``bn_mode="train"`` normalizes with batch
    statistics and reports them to ``bn_hook(name, mean, var)``."""
    stack = []
    for l in model.layers:
        p = l.params
        if l.kind == "conv1d":
            x = conv1d_f(x, p["weight"], p["bias"], l.spec)
        elif l.kind == "batchnorm":
            if bn_mode == "train":
                mean, var = channel_stats(x)
                bn_hook(l.name, mean, var)
                x, _ = batchnorm_f(x, p["gamma"], p["beta"], mean, var, l.eps)
            else:
                if tap is not None:
                    tap(("bn_in", l.name), x)
                x, _ = batchnorm_f(x, p["gamma"], p["beta"], p["running_mean"], p["running_var"], l.eps)
        elif l.kind == "relu":
            x = relu_f(x)
        elif l.kind == "dense":
            x = dense_f(x, p["weight"], p["bias"])
        elif l.kind == "residual_begin":
            stack.append(x)
        elif l.kind == "residual_add":
            x = x + stack.pop()
        elif l.kind == "attention":
            x, parts = attention_f(x, p)
            if tap is not None:
                for part in ATTENTION_PARTS:
                    tap(("out", f"{l.name}/{part}"), parts[part])
        elif l.kind == "sigmoid":
            x = sigmoid_f(x)
        elif l.kind == "swish":
            x = swish_f(x)
        elif l.kind == "softmax":
            x = softmax_f(x)
        if tap is not None:
            tap(("out", l.name), x)
    return x


def forward_f(model: ModelGraph, x, taps: str = "none"):
    """Float forward pass with BN in eval mode.

    ``taps="bn_inputs"`` returns the input of every BatchNorm; ``taps="all"``
    returns the model input (key ``"@input"``), every layer output and the
    attention projections (keys ``"<layer>/q"`` etc.).
    """
    if taps not in ("none", "bn_inputs", "all"):
        raise ValueError(f"unknown taps mode {taps!r}")
    x = _check_input(model, x)
    if taps == "none":
        return _run(model, x), None
    found = {INPUT_TAP: x} if taps == "all" else {}

    def tap(key, val):
        kind, name = key
        if (kind == "bn_in") == (taps == "bn_inputs"):
            found[name] = val

    return _run(model, x, tap=tap), found


def populate_stats(model: ModelGraph, data, momentum: float = 0.1) -> ModelGraph:
    """Return a copy whose BN running statistics are an EMA of batch statistics.

    BatchNorms normalize with the current batch's statistics during the pass,
    as they would in training.
    """
    data = list(data)
    if not data:
        raise ValueError("populate_stats needs at least one batch")
    if not 0 < momentum <= 1:
        raise ValueError(f"momentum must be in (0, 1], got {momentum}")
    run = {l.name: [l.params["running_mean"].astype(np.float64), l.params["running_var"].astype(np.float64)]
           for l in model.bn_layers}
    for batch in data:
        batch = _check_input(model, np.asarray(batch, dtype=np.float64))

        def hook(name, mean, var):
            r = run[name]
            r[0] = (1 - momentum) * r[0] + momentum * mean
            r[1] = (1 - momentum) * r[1] + momentum * var

        _run(model, batch, bn_mode="train", bn_hook=hook)
    layers = []
    for l in model.layers:
        if l.kind == "batchnorm":
            mean, var = run[l.name]
            params = dict(l.params, running_mean=mean.astype(np.float32), running_var=var.astype(np.float32))
            l = replace(l, params=params)
        layers.append(l)
    return ModelGraph(layers, model.input_shape, dict(model.metadata))


# ---------------------------------------------------------------------------
# serialization


def _spec_dict(spec):
    return None if spec is None else {k: getattr(spec, k) for k in spec.__dataclass_fields__}


def save_model(model: ModelGraph, path) -> None:
    layers, tensors = [], {}
    for l in model.layers:
        layers.append({"name": l.name, "kind": l.kind, "spec": _spec_dict(l.spec), "eps": l.eps,
                       "params": list(l.params)})
        for k, v in l.params.items():
            tensors[f"{l.name}.{k}"] = ("real32", v)
    header = {"format": "float", "input_shape": list(model.input_shape),
              "metadata": model.metadata, "layers": layers}
    container.write(path, header, tensors)


def model_from_container(header, tensors) -> ModelGraph:
    if header.get("format") != "float":
        raise container.FormatError(f"expected a float model, found format {header.get('format')!r}")
    try:
        layers = []
        for ent in header["layers"]:
            spec = ConvSpec(**ent["spec"]) if ent["spec"] is not None else None
            params = {k: tensors[f"{ent['name']}.{k}"] for k in ent["params"]}
            expected = PARAM_NAMES.get(ent["kind"], ())
            if tuple(params) != expected:
                raise container.FormatError(f"layer {ent['name']!r} has params {list(params)}, expected {expected}")
            layers.append(Layer(ent["kind"], ent["name"], params, spec, float(ent["eps"])))
        return ModelGraph(layers, tuple(header["input_shape"]), dict(header["metadata"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise container.FormatError(f"inconsistent model header: {exc}") from exc


def load_model(path) -> ModelGraph:
    return model_from_container(*container.read(path))
