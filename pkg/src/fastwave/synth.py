"""Deterministic speech-like toy corpus at 48 kHz.

Clips mix voiced harmonic segments (gliding f0, formant-shaped harmonic
amplitudes) with short unvoiced noise bursts, under a syllable-rate
amplitude envelope. Intended for desk-scale training runs and tests.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .dsp import AudioClip

RATE = 48000
_FORMANTS = [(500, 1500, 2500), (700, 1200, 2600), (300, 2300, 3000), (400, 800, 2400)]


def _voiced(rng, n):
    t = np.arange(n) / RATE
    f0 = rng.uniform(90, 260) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(2, 6) * t))
    phase = 2 * np.pi * np.cumsum(f0) / RATE
    formants = _FORMANTS[rng.integers(len(_FORMANTS))]
    out = np.zeros(n)
    f0_mean = f0.mean()
    for k in range(1, int(20000 / f0_mean)):
        fk = k * f0_mean
        amp = 1.0 / k
        amp *= sum(1.0 / (1 + ((fk - fc) / (0.12 * fc)) ** 2) for fc in formants) + 0.05
        out += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    return out


def _unvoiced(rng, n):
    noise = rng.standard_normal(n)
    # mild pre-emphasis tilts the burst toward high frequencies
    return lfilter([1.0, -0.5], [1.0], noise) * 0.1


def speech_like(rng: np.random.Generator, duration: float = 1.0, peak: float = 0.5) -> np.ndarray:
    n = int(round(duration * RATE))
    out = np.zeros(n)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.08, 0.25) * RATE)
        seg = min(seg, n - pos)
        body = _voiced(rng, seg) if rng.random() < 0.8 else _unvoiced(rng, seg)
        env = np.sin(np.pi * (np.arange(seg) + 0.5) / seg) ** 0.5
        out[pos:pos + seg] = body * env * rng.uniform(0.4, 1.0)
        pos += seg
    return out * (peak / max(np.max(np.abs(out)), 1e-12))


def toy_corpus(n_clips: int = 16, duration: float = 1.0, seed: int = 0) -> list[AudioClip]:
    """``n_clips`` speech-like clips; the same seed gives the same audio."""
    rng = np.random.default_rng(seed)
    return [AudioClip(speech_like(rng, duration), RATE) for _ in range(n_clips)]
