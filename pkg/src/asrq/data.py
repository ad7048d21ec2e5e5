"""Structured toy mel-spectrogram batches.

Band-limited noise (smoothed along time and frequency) under a slow energy
envelope, plus a fixed per-bin offset and gain profile. Stands in for real
log-mel features when populating BatchNorm statistics and for held-out
evaluation.
"""

from __future__ import annotations

import numpy as np


def mel_profile(mel_bins: int):
    """Deterministic per-bin (offset, gain) profile."""
    f = np.linspace(0.0, 1.0, mel_bins)
    offset = 0.9 * np.cos(np.pi * f) - 0.3
    gain = 0.9 - 0.5 * f
    return offset, gain


def _smooth(x, taps, axis):
    k = np.hanning(taps + 2)[1:-1]
    k /= k.sum()
    return np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), axis, x)


def toy_mel(rng: np.random.Generator, batch: int, mel_bins: int, frames: int) -> np.ndarray:
    noise = rng.standard_normal((batch, mel_bins, frames))
    noise = _smooth(_smooth(noise, 5, axis=2), 3, axis=1)
    noise /= noise.std() + 1e-12
    t = np.arange(frames)[None, None, :]
    rate = rng.uniform(0.1, 0.35, size=(batch, 1, 1))
    phase = rng.uniform(0, 2 * np.pi, size=(batch, 1, 1))
    env = 0.6 + 0.4 * np.sin(rate * t + phase)
    offset, gain = mel_profile(mel_bins)
    return offset[None, :, None] + gain[None, :, None] * env * noise


def toy_batches(seed: int, count: int, batch: int, mel_bins: int, frames: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [toy_mel(rng, batch, mel_bins, frames) for _ in range(count)]
