"""Second implementation of the log-spectral distance.

Shares no code with the package: framing is done with explicit loops,
the window is built from its cosine definition, and the spectrum comes
from a dense DFT matrix instead of an FFT.
"""

import math

import numpy as np

_DFT_CACHE = {}


def _dft_matrix(n):
    if n not in _DFT_CACHE:
        k = np.arange(n // 2 + 1)[:, None]
        t = np.arange(n)[None, :]
        _DFT_CACHE[n] = np.exp(-2j * np.pi * k * t / n)
    return _DFT_CACHE[n]


def magnitudes(x, n_fft=2048, hop=512):
    x = list(map(float, x))
    frames = 1 if len(x) <= n_fft else 1 + math.ceil((len(x) - n_fft) / hop)
    x = x + [0.0] * (n_fft + (frames - 1) * hop - len(x))
    win = np.array([0.5 * (1 - math.cos(2 * math.pi * i / n_fft)) for i in range(n_fft)])
    rows = []
    for k in range(frames):
        seg = np.array(x[k * hop:k * hop + n_fft]) * win
        rows.append(np.abs(_dft_matrix(n_fft) @ seg))
    return np.array(rows)


def lsd(ref, est, lo=0, hi=None, floor=1e-8):
    a = np.maximum(magnitudes(ref), floor)
    b = np.maximum(magnitudes(est), floor)
    hi = a.shape[1] if hi is None else hi
    total = 0.0
    for k in range(a.shape[0]):
        d = [(20 * math.log10(a[k, f] / b[k, f])) ** 2 for f in range(lo, hi)]
        total += math.sqrt(sum(d) / len(d))
    return total / a.shape[0]
