"""Synthetic-versus-random calibration ablation on MiniQuartz toys."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import toy_batches
from .model import ToyConfig, build_toy, populate_stats
from .reporting import label_dataset, output_mse, token_error
from .zeroshot import GenConfig, calibrate_and_compile, generate, random_baseline


@dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2, 3)
    toy: ToyConfig = field(default_factory=ToyConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    bit_configs: tuple = ((8, 8), (6, 8))
    stats_batches: int = 30  # toy batches used to populate BN running statistics
    eval_batches: int = 8
    random_range: tuple = (-3.0, 3.0)
    observer: str = "minmax"


def trained_toy(toy: ToyConfig, seed: int, stats_batches: int = 30):
    """A toy whose BN running statistics come from structured toy data."""
    model = build_toy(toy, seed=seed)
    data = toy_batches(1000 + seed, stats_batches, 8, toy.mel_bins, toy.frames)
    return populate_stats(model, data)


def run_seed(cfg: AblationConfig, seed: int) -> list[dict]:
    toy = cfg.toy
    model = trained_toy(toy, seed, cfg.stats_batches)
    held = toy_batches(2000 + seed, cfg.eval_batches, 8, toy.mel_bins, toy.frames)
    labelled = label_dataset(model, held)
    gen = replace(cfg.gen, seed=seed)
    calib = {
        "synthetic": [b for b in generate(model, gen) if b.ok],
        "random": random_baseline((gen.batch_size, toy.mel_bins, gen.frames or toy.frames),
                                  *cfg.random_range, seed=seed, num_batches=gen.num_batches),
    }
    rows = []
    for wb, ab in cfg.bit_configs:
        for name, batches in calib.items():
            qm, _ = calibrate_and_compile(model, batches, wb, ab, cfg.observer)
            rows.append({
                "seed": seed, "bits_w": wb, "bits_a": ab, "calibration": name,
                "mse": output_mse(qm, model, held), "token_error": token_error(qm, labelled),
            })
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and spread over seeds for every (bits, calibration) cell."""
    cells = {}
    for r in rows:
        cells.setdefault((r["bits_w"], r["bits_a"], r["calibration"]), []).append(r)
    out = []
    for (wb, ab, name), rs in cells.items():
        mse = np.array([r["mse"] for r in rs])
        te = np.array([r["token_error"] for r in rs])
        out.append({
            "bits_w": wb, "bits_a": ab, "calibration": name, "runs": len(rs),
            "mse_mean": float(mse.mean()), "mse_std": float(mse.std()),
            "token_error_mean": float(te.mean()), "token_error_std": float(te.std()),
        })
    return out


def ablation(cfg: AblationConfig = AblationConfig()) -> dict:
    rows = [r for s in cfg.seeds for r in run_seed(cfg, s)]
    return {"runs": rows, "summary": summarize(rows)}


def synthetic_wins(result: dict) -> dict:
    """Per bit configuration: does synthetic calibration give strictly lower
    output MSE than random calibration for every seed?"""
    by = {}
    for r in result["runs"]:
        by.setdefault((r["bits_w"], r["bits_a"], r["seed"]), {})[r["calibration"]] = r["mse"]
    out = {}
    for (wb, ab, _), cell in by.items():
        key = f"W{wb}A{ab}"
        out[key] = out.get(key, True) and cell["synthetic"] < cell["random"]
    return out
