"""Reconstruction and complexity metrics, and the benchmark report."""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dsp
from .edm import build_schedule, euler_sample, keyed_rng, SIGMA_MAX, SIGMA_MIN, RHO
from .model import FULL_RATE, N_BINS, ConditioningBundle, cutoff_index
from .nn.layers import count_flops, count_params

MAG_FLOOR = 1e-8
QUALITY_METRICS = ("snr", "lsd", "lsd_lf", "lsd_hf")
_LABELS = {"snr": "SNR", "lsd": "LSD", "lsd_lf": "LSD-LF", "lsd_hf": "LSD-HF"}


class UndefinedMetricError(ValueError):
    pass


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, dsp.AudioClip) else np.asarray(x, dtype=np.float64)


def _pair(reference, estimate):
    if isinstance(reference, dsp.AudioClip) and isinstance(estimate, dsp.AudioClip):
        if reference.sample_rate != estimate.sample_rate:
            raise ValueError("sample rates differ")
    x, y = _samples(reference), _samples(estimate)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    return x, y


def snr(reference, estimate) -> float:
    """SNR in dB; ``inf`` when the estimate is exact."""
    x, y = _pair(reference, estimate)
    signal = float(np.sum(x * x))
    if signal == 0:
        raise UndefinedMetricError("reference signal is identically zero")
    noise = float(np.sum((x - y) ** 2))
    if noise == 0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


def _log_ratio(reference, estimate, n_fft, hop):
    x, y = _pair(reference, estimate)
    mx = np.maximum(dsp.stft(x, n_fft, hop).magnitude, MAG_FLOOR)
    my = np.maximum(dsp.stft(y, n_fft, hop).magnitude, MAG_FLOOR)
    return 20.0 * np.log10(mx / my)


def _frame_mean_rms(d: np.ndarray) -> float:
    return float(np.mean(np.sqrt(np.mean(d * d, axis=1))))


def lsd(reference, estimate, n_fft: int = 2048, hop: int = 512) -> float:
    """Log-spectral distance averaged over STFT frames (magnitudes floored at 1e-8)."""
    return _frame_mean_rms(_log_ratio(reference, estimate, n_fft, hop))


def lsd_band(reference, estimate, f_in: int, band: str, n_fft: int = 2048, hop: int = 512) -> float:
    """LSD restricted to bins ``[0, f_c)`` (``"LF"``) or ``[f_c, 1025)`` (``"HF"``).

    The inner mean runs over the bins of the band only.
    """
    fc = cutoff_index(f_in)
    d = _log_ratio(reference, estimate, n_fft, hop)
    band = band.upper()
    if band == "LF":
        sel = d[:, :fc]
    elif band == "HF":
        sel = d[:, fc:]
    else:
        raise ValueError(f"band must be 'LF' or 'HF', got {band!r}")
    if sel.shape[1] == 0:
        raise UndefinedMetricError(f"empty {band} band for f_in={f_in}")
    return _frame_mean_rms(sel)


def rtf(audio_duration: float, wall_time: float) -> float:
    if audio_duration <= 0 or wall_time <= 0:
        raise ValueError("durations must be positive")
    return wall_time / audio_duration


def quality_metrics(reference, estimate, f_in: int) -> dict:
    return {
        "snr": snr(reference, estimate),
        "lsd": lsd(reference, estimate),
        "lsd_lf": lsd_band(reference, estimate, f_in, "LF"),
        "lsd_hf": lsd_band(reference, estimate, f_in, "HF"),
    }


# --------------------------------------------------------------------------
# Report


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population std; all-infinite input gives ``(inf, 0)``."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    if np.all(np.isposinf(v)):
        return math.inf, 0.0
    if np.any(np.isinf(v)):
        return math.inf, math.inf
    return float(v.mean()), float(v.std())


def format_value(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


@dataclass
class MetricsReport:
    quality: dict = field(default_factory=dict)  # rate -> metric -> (mean, std)
    rtf: tuple = (math.nan, math.nan)
    gflops: float = math.nan
    params: int = 0
    nfe: int = 0
    model_calls: int = 0

    def rows(self, include_timing: bool = True):
        for rate in sorted(self.quality):
            for m in QUALITY_METRICS:
                mu, sd = self.quality[rate][m]
                yield str(rate), m, mu, sd
        if include_timing:
            yield "complexity", "rtf", *self.rtf
        yield "complexity", "gflops", self.gflops, 0.0
        yield "complexity", "params", float(self.params), 0.0
        yield "complexity", "nfe", float(self.nfe), 0.0
        yield "complexity", "model_calls", float(self.model_calls), 0.0

    def to_csv(self, include_timing: bool = True) -> str:
        out = io.StringIO()
        out.write("rate,metric,mean,std\n")
        for rate, m, mu, sd in self.rows(include_timing):
            out.write(f"{rate},{m},{format_value(mu)},{format_value(sd)}\n")
        return out.getvalue()

    def to_table(self, include_timing: bool = True) -> str:
        lines = []
        width = 28

        def row(label, cell):
            lines.append(f"{label:<12}{cell:>{width}}")

        for rate in sorted(self.quality):
            lines.append(f"{rate // 1000} kHz")
            for m in QUALITY_METRICS:
                mu, sd = self.quality[rate][m]
                row(_LABELS[m], f"{mu:.2f} ± {sd:.2f}")
        lines.append("Complexity")
        if include_timing:
            row("RTF", f"{self.rtf[0]:.2f} ± {self.rtf[1]:.2f}")
        row("GFLOPS", f"{self.gflops:.4f}")
        row("#params", f"{self.params / 1e6:.4f}M")
        row("NFE", str(self.nfe))
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Evaluation


class _CallCounter:
    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __call__(self, x, sigma, cond):
        self.calls += 1
        return self.model(x, sigma, cond)


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def low_resolution_view(clip: dsp.AudioClip, rate: int) -> np.ndarray:
    """The clip as heard at ``rate``, resampled back to 48 kHz (length preserved)."""
    if clip.sample_rate != FULL_RATE:
        raise ValueError(f"expected a {FULL_RATE} Hz clip, got {clip.sample_rate}")
    low = dsp.downsample(clip, FULL_RATE // rate)
    return dsp.upsample_to(low, FULL_RATE).samples[:len(clip)]


def super_resolve(model, low_res: np.ndarray, rate: int, nfe: int, rng: np.random.Generator,
                  cond_scale: float = 1.0, sigma_min: float = SIGMA_MIN,
                  sigma_max: float = SIGMA_MAX, rho: float = RHO) -> np.ndarray:
    """Sample a 48 kHz estimate from a 48 kHz-rate low-resolution signal.

    The input is zero-padded to a power of two for the network and cropped
    afterwards. ``nfe`` is the number of schedule levels (model calls).
    """
    n = len(low_res)
    padded = np.zeros(_next_pow2(n))
    padded[:n] = low_res
    cond = ConditioningBundle.from_rates(padded[None], [rate], scale=cond_scale)
    schedule = build_schedule(sigma_min, sigma_max, rho, nfe)
    return euler_sample(model, cond, schedule, rng, len(padded))[0, :n]


def _cond_scale(model) -> float:
    pre = getattr(model, "pre", None)
    return 1.0 / pre.sigma_data if pre is not None else 1.0


def evaluate(model, clips: Sequence[dsp.AudioClip], rates: Sequence[int], nfe: int, seed: int,
             net=None, **schedule) -> MetricsReport:
    """Benchmark ``model`` (a preconditioned denoiser) on 48 kHz ``clips``.

    Each (clip, rate) pair uses the keyed stream ``(seed, clip, rate)``.
    Timing covers sampling only. ``net`` (default ``model.net``) supplies
    parameter and FLOP counts; GFLOPs are per model call on one second of
    48 kHz audio.
    """
    if not clips:
        raise ValueError("empty manifest")
    if nfe < 2:
        raise ValueError("nfe must be >= 2")
    counter = _CallCounter(model)
    scale = _cond_scale(model)
    per_rate = {int(r): {m: [] for m in QUALITY_METRICS} for r in rates}
    rtfs = []
    for ci, clip in enumerate(clips):
        for rate in per_rate:
            low = low_resolution_view(clip, rate)
            rng = keyed_rng(seed, ci, rate)
            t0 = time.perf_counter()
            est = super_resolve(counter, low, rate, nfe, rng, cond_scale=scale, **schedule)
            rtfs.append(rtf(clip.duration, max(time.perf_counter() - t0, 1e-12)))
            for m, v in quality_metrics(clip.samples, est, rate).items():
                per_rate[rate][m].append(v)
    net = net if net is not None else getattr(model, "net", None)
    report = MetricsReport(
        quality={r: {m: mean_std(v) for m, v in ms.items()} for r, ms in per_rate.items()},
        rtf=mean_std(rtfs),
        gflops=count_flops(net, FULL_RATE) / 1e9 if net is not None else 0.0,
        params=count_params(net) if net is not None else 0,
        nfe=nfe,
        model_calls=counter.calls,
    )
    return report


def interpolation_baseline(clips: Sequence[dsp.AudioClip], rates: Sequence[int]) -> MetricsReport:
    """Score the resampled low-resolution input directly, with no model."""
    per_rate = {int(r): {m: [] for m in QUALITY_METRICS} for r in rates}
    for clip in clips:
        for rate in per_rate:
            est = low_resolution_view(clip, rate)
            for m, v in quality_metrics(clip.samples, est, rate).items():
                per_rate[rate][m].append(v)
    return MetricsReport(quality={r: {m: mean_std(v) for m, v in ms.items()}
                                  for r, ms in per_rate.items()},
                         rtf=(0.0, 0.0), gflops=0.0, params=0, nfe=0, model_calls=0)
