"""Data-free calibration: synthesize inputs whose BatchNorm-input statistics
match the stored running statistics, then calibrate and compile on them."""

from __future__ import annotations

import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .int_runtime import QuantizedModel, compile
from .model import BatchStats, ModelGraph, running_stats
from .quantizer import fold_model, make_config

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4
AMEL_MAGIC = b"AMEL"


class GenerationError(RuntimeError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def kl_loss(stats: BatchStats, running: BatchStats):
    """Sum over BN layers and channels of

        log(s/s_hat) - 1/2 * (1 - (s_hat**2 + (m_hat - m)**2) / s**2)

    where (m, s) are the batch statistics and (m_hat, s_hat) the running ones.
    Both standard deviations are floored at SIGMA_FLOOR. Works on arrays and on
    autodiff nodes alike.
    """
    if set(stats.mean) != set(running.mean):
        raise ValueError(f"BN layers differ: {sorted(stats.mean)} vs {sorted(running.mean)}")
    loss = 0.0
    for name in running.mean:
        mu, sd = stats.mean[name], ad.maximum(stats.std[name], SIGMA_FLOOR)
        mu_hat, sd_hat = running.mean[name], np.maximum(running.std[name], SIGMA_FLOOR)
        if np.shape(mu.value if isinstance(mu, ad.Node) else mu) != np.shape(mu_hat):
            raise ValueError(f"{name}: channel count differs from running statistics")
        term = ad.log(sd / sd_hat) - 0.5 * (1.0 - (sd_hat**2 + (mu_hat - mu) ** 2) / sd**2)
        loss = loss + ad.total(term)
    return loss


def batch_stats(model: ModelGraph, x) -> BatchStats:
    """Batch statistics at every BN input, with the same std floor as the gradient path."""
    tape = ad.Tape()
    stats, _ = ad._trace_stats(model, tape, tape.leaf(np.asarray(x, dtype=np.float64)))
    return BatchStats({k: v.value for k, v in stats.mean.items()}, {k: v.value for k, v in stats.std.items()})


@dataclass
class GenConfig:
    batch_size: int = 8
    num_batches: int = 20
    iters: int = 250
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_range: tuple = (-0.3, 0.3)
    seed: int = 0
    frames: int | None = None  # defaults to the model's input length
    running_sigma: str = "std"  # "var" reads the running variance as sigma

    def __post_init__(self):
        self.init_range = tuple(float(v) for v in self.init_range)
        for f in ("batch_size", "num_batches", "iters"):
            if int(getattr(self, f)) < 1:
                raise ValueError(f"{f} must be positive")
        if not 0 < self.lr < 1:
            raise ValueError(f"lr must be in (0, 1), got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid Adam hyperparameters")
        lo, hi = self.init_range
        if not lo < hi:
            raise ValueError(f"init_range must be increasing, got {self.init_range}")
        if self.running_sigma not in ("std", "var"):
            raise ValueError("running_sigma must be 'std' or 'var'")


@dataclass
class SynthBatch:
    data: np.ndarray
    loss_history: list
    index: int = 0
    error: str | None = None

    @property
    def ok(self):
        return self.error is None

    @property
    def initial_loss(self):
        return self.loss_history[0]

    @property
    def final_loss(self):
        """Loss of ``data``, the lowest-loss iterate visited."""
        return min(self.loss_history)


def _generate_one(model, running, cfg: GenConfig, index: int) -> SynthBatch:
    rng = np.random.default_rng([cfg.seed, index])
    mel = model.input_shape[0]
    frames = cfg.frames or model.input_shape[1]
    x = rng.uniform(*cfg.init_range, size=(cfg.batch_size, mel, frames))
    m, v = np.zeros_like(x), np.zeros_like(x)
    history, best, best_loss = [], x.copy(), np.inf

    def loss_fn(stats):
        return kl_loss(stats, running)

    for step in range(cfg.iters + 1):
        try:
            loss, g = ad.grad_input(model, x, loss_fn)
        except ad.NumericError as exc:
            log.warning("batch %d aborted at step %d: %s", index, step, exc)
            return SynthBatch(best, history or [np.nan], index, error=f"step {step}: {exc}")
        history.append(loss)
        if loss < best_loss:
            best, best_loss = x.copy(), loss
        if step == cfg.iters:
            break
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** (step + 1))
        vhat = v / (1 - cfg.beta2 ** (step + 1))
        x = x - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return SynthBatch(best, history, index)


def thread_count() -> int:
    env = os.environ.get("ASRQ_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def generate(model: ModelGraph, cfg: GenConfig = GenConfig(), threads: int | None = None) -> list[SynthBatch]:
    """Optimize ``cfg.num_batches`` independent batches with Adam on the KL loss.

    Batch ``i`` draws its initialization from the generator seeded with
    ``(cfg.seed, i)``, so results do not depend on the thread count.
    """
    if not model.bn_layers:
        raise ad.NoStatisticsError("zero-shot generation needs at least one BatchNorm layer")
    running = running_stats(model, cfg.running_sigma)
    threads = threads or thread_count()
    if threads == 1:
        batches = [_generate_one(model, running, cfg, i) for i in range(cfg.num_batches)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batches = list(pool.map(lambda i: _generate_one(model, running, cfg, i), range(cfg.num_batches)))
    if not any(b.ok for b in batches):
        raise GenerationError(f"all {len(batches)} batches failed; first: {batches[0].error}")
    return batches


def random_baseline(shape, low=-3.0, high=3.0, seed=0, num_batches=20, model: ModelGraph | None = None):
    """Uniform random calibration batches; with a model, each records its KL loss."""
    running = running_stats(model) if model is not None else None
    out = []
    for i in range(num_batches):
        x = np.random.default_rng([seed, i]).uniform(low, high, size=tuple(shape))
        loss = float(kl_loss(batch_stats(model, x), running)) if model is not None else float("nan")
        out.append(SynthBatch(x, [loss], i))
    return out


@dataclass
class ZeroShotReport:
    num_batches: int
    iters: int
    lr: float
    weight_bits: int
    act_bits: int
    initial_losses: list = field(default_factory=list)
    final_losses: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), indent=2)


def calibrate_and_compile(model, batches, weight_bits=8, act_bits=8, observer="minmax"):
    """Fold BNs, calibrate on the given batches and compile."""
    try:
        folded = fold_model(model)
    except Exception as exc:
        raise PipelineError("fold", exc) from exc
    try:
        config = make_config(folded, [b.data if isinstance(b, SynthBatch) else b for b in batches],
                             observer, weight_bits, act_bits)
    except Exception as exc:
        raise PipelineError("calibrate", exc) from exc
    try:
        return compile(folded, config), config
    except Exception as exc:
        raise PipelineError("compile", exc) from exc


def zero_shot_quantize(model: ModelGraph, cfg: GenConfig = GenConfig(), weight_bits=8, act_bits=8,
                       observer="minmax", batches=None) -> tuple[QuantizedModel, ZeroShotReport]:
    """Generate synthetic data, then fold, calibrate and compile with it.

    Pre-generated ``batches`` may be passed to skip generation.
    """
    if batches is None:
        try:
            batches = generate(model, cfg)
        except Exception as exc:
            raise PipelineError("generate", exc) from exc
    good = [b for b in batches if b.ok]
    qm, config = calibrate_and_compile(model, good, weight_bits, act_bits, observer)
    report = ZeroShotReport(
        num_batches=len(batches), iters=cfg.iters, lr=cfg.lr, weight_bits=weight_bits, act_bits=act_bits,
        initial_losses=[b.initial_loss for b in batches], final_losses=[b.final_loss for b in batches],
        failed=[b.index for b in batches if not b.ok], warnings=list(config.meta.get("warnings", [])),
    )
    return qm, report


# ---------------------------------------------------------------------------
# .amel files


class AmelError(ValueError):
    pass


def write_amel(path, data, sidecar: dict | None = None) -> None:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise AmelError(f"expected (batch, mel, frames), got shape {data.shape}")
    raw = AMEL_MAGIC + struct.pack("<3I", *data.shape) + np.ascontiguousarray(data, dtype="<f4").tobytes()
    Path(path).write_bytes(raw)
    if sidecar is not None:
        Path(path).with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_amel(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != AMEL_MAGIC:
        raise AmelError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise AmelError(f"{path}: truncated header")
    dims = struct.unpack("<3I", blob[4:16])
    n = int(np.prod(dims))
    if len(blob) != 16 + 4 * n:
        raise AmelError(f"{path}: payload has {len(blob) - 16} bytes, dims {dims} need {4 * n}")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(dims).astype(np.float32)


def sidecar_for(batch: SynthBatch, cfg: GenConfig) -> dict:
    return {
        "gen_config": asdict(cfg),
        "index": batch.index,
        "initial_loss": batch.initial_loss,
        "final_loss": batch.final_loss,
        "error": batch.error,
    }
