"""Model size, bit-operation counts and accuracy-proxy metrics, plus a
comparison report with a JSON and a flat CSV form."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .int_runtime import QuantizedModel, forward_int
from .model import ModelGraph, forward_f

BLANK = 0
WEIGHT_KEYS = ("weight", "wq", "wk", "wv", "wo")
BIAS_KEYS = ("bias", "bq", "bk", "bv", "bo")
BN_KEYS = ("gamma", "beta", "running_mean", "running_var")
COLUMNS = ("model", "dataset", "bits_w", "bits_a", "size_bytes", "bops", "mse", "token_error")
DELTA_COLUMNS = ("size_ratio", "bops_ratio", "delta_mse", "delta_token_error")
CSV_COLUMNS = COLUMNS + DELTA_COLUMNS


class ReportError(ValueError):
    pass


def _tensors(layer):
    return layer.tensors if hasattr(layer, "tensors") else layer.params


# ---------------------------------------------------------------------------
# size


def model_size_bits(model, weight_bits: int | None = None, include_bias: bool = True) -> int:
    """Storage in bits: weight matrices at ``weight_bits``, biases (and any
    unfolded BatchNorm parameters) at 32 bits.

    For a compiled model ``weight_bits`` defaults to the stored widths.
    """
    total = 0
    for l in model.layers:
        t = _tensors(l)
        for k in WEIGHT_KEYS:
            if k in t:
                bits = weight_bits
                if bits is None:
                    if not isinstance(model, QuantizedModel):
                        raise ReportError("weight_bits is required for a float model")
                    bits = l.wparams[k].bits
                total += int(np.size(t[k])) * int(bits)
        if include_bias:
            total += 32 * sum(int(np.size(t[k])) for k in BIAS_KEYS + BN_KEYS if k in t)
    return total


def model_size(model, weight_bits: int | None = None, include_bias: bool = True) -> float:
    """Storage in bytes (may be fractional for bit-widths that are not multiples of 8)."""
    return model_size_bits(model, weight_bits, include_bias) / 8


# ---------------------------------------------------------------------------
# bit operations


def layer_macs(model, input_len: int) -> list[tuple[str, int, int]]:
    """Per-example ``(layer, weight-activation MACs, activation-activation MACs)``.

    Nonlinearities, residual adds and BatchNorm cost nothing here.
    """
    c, t = model.input_shape[0], input_len
    out = []
    for l in model.layers:
        w = _tensors(l)
        if l.kind == "conv1d":
            s = l.spec
            t = s.out_length(t)
            c = s.out_channels
            out.append((l.name, s.out_channels * (s.in_channels // s.groups) * s.kernel_size * t, 0))
        elif l.kind == "dense":
            o, i = np.shape(w["weight"])
            out.append((l.name, o * i * t, 0))
            c = o
        elif l.kind == "attention":
            d = np.shape(w["wq"])[0]
            out.append((l.name, 3 * d * c * t + c * d * t, 2 * d * t * t))
    return out


def bops(model, weight_bits: int, act_bits: int, input_len: int | None = None) -> int:
    """Sum of MACs times operand widths, per example.

    Weight-activation products cost ``weight_bits * act_bits``; the
    activation-activation products inside attention cost ``act_bits ** 2``.
    """
    input_len = input_len or model.input_shape[1]
    total = 0
    for _, wa, aa in layer_macs(model, input_len):
        total += wa * weight_bits * act_bits + aa * act_bits * act_bits
    return total


# ---------------------------------------------------------------------------
# decoding and token error


def greedy_decode(logits) -> list[list[int]]:
    """Per-frame argmax over the class axis (-2), collapse repeats, drop blanks."""
    logits = np.asarray(logits)
    if logits.ndim == 2:
        logits = logits[None]
    out = []
    for best in logits.argmax(axis=-2):
        seq, prev = [], None
        for tok in best.tolist():
            if tok != prev and tok != BLANK:
                seq.append(tok)
            prev = tok
        out.append(seq)
    return out


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs, two-row dynamic programme."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def predict_logits(model, x) -> np.ndarray:
    """Float logits of a float graph, a compiled model (integer engine) or a callable."""
    if isinstance(model, ModelGraph):
        return forward_f(model, x)[0]
    if isinstance(model, QuantizedModel):
        return forward_int(model, x)[0]
    return np.asarray(model(x))


def token_error(model, dataset) -> float:
    """Corpus token error: summed edit distance over summed reference length.

    ``dataset`` is a sequence of ``(mel, reference)`` pairs, where ``mel`` is a
    single ``(mel_bins, frames)`` example or a batch with one reference per item.
    """
    dataset = list(dataset)
    if not dataset:
        raise ReportError("token_error needs a non-empty dataset")
    errors = ref_len = 0
    for mel, refs in dataset:
        mel = np.asarray(mel)
        hyps = greedy_decode(predict_logits(model, mel))
        if mel.ndim == 2:
            refs = [refs]
        if len(refs) != len(hyps):
            raise ReportError(f"{len(hyps)} predictions but {len(refs)} references")
        for h, r in zip(hyps, refs):
            errors += edit_distance(h, r)
            ref_len += len(r)
    if ref_len == 0:
        raise ReportError("all reference sequences are empty")
    return errors / ref_len


def label_dataset(reference: ModelGraph, batches) -> list:
    """Pair each input batch with the reference model's greedy transcripts."""
    return [(x, greedy_decode(forward_f(reference, x)[0])) for x in batches]


def output_mse(model, reference: ModelGraph, batches) -> float:
    errs = [np.mean((predict_logits(model, x) - forward_f(reference, x)[0]) ** 2) for x in batches]
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# reports


def evaluate(name: str, model, reference: ModelGraph, batches, dataset: str = "toy",
             weight_bits: int = 32, act_bits: int = 32, warnings=()) -> dict:
    """One report record for ``model`` against the float ``reference``."""
    batches = list(batches)
    labelled = label_dataset(reference, batches)
    size_bits = None if isinstance(model, QuantizedModel) else weight_bits
    return {
        "model": name,
        "dataset": dataset,
        "bits_w": int(weight_bits),
        "bits_a": int(act_bits),
        "size_bytes": model_size(model, size_bits),
        "bops": bops(model, weight_bits, act_bits, batches[0].shape[-1]),
        "mse": output_mse(model, reference, batches),
        "token_error": token_error(model, labelled),
        "warnings": list(warnings),
    }


def compare(baseline: dict, *others: dict) -> dict:
    """Merge records into one report; every row carries ratios and deltas against the baseline."""
    rows = []
    for rec in (baseline, *others):
        missing = [k for k in COLUMNS if k not in rec]
        if missing:
            raise ReportError(f"record {rec.get('model')!r} lacks {missing}")
        if rec["dataset"] != baseline["dataset"]:
            raise ReportError(f"dataset mismatch: {rec['dataset']!r} vs baseline {baseline['dataset']!r}")
        row = {k: rec[k] for k in COLUMNS}
        row["size_ratio"] = baseline["size_bytes"] / rec["size_bytes"]
        row["bops_ratio"] = rec["bops"] / baseline["bops"] if baseline["bops"] else float("nan")
        row["delta_mse"] = rec["mse"] - baseline["mse"]
        row["delta_token_error"] = rec["token_error"] - baseline["token_error"]
        rows.append(row)
    warnings = sorted({w for rec in (baseline, *others) for w in rec.get("warnings", [])})
    return {"baseline": baseline["model"], "columns": list(CSV_COLUMNS), "rows": rows, "warnings": warnings}


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def to_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in report["rows"]:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def write_report(report: dict, path) -> None:
    """Write ``path`` as JSON, plus a CSV mirror next to it."""
    path = Path(path)
    path.write_text(to_json(report))
    path.with_suffix(".csv").write_text(to_csv(report))
