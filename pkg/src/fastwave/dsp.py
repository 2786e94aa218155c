"""Waveform I/O, integer-ratio resampling and short-time Fourier analysis."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import oaconvolve

__all__ = [
    "AudioClip",
    "Spectrogram",
    "ResampleFilter",
    "WavFormatError",
    "UnsupportedCodecError",
    "read_wav",
    "write_wav",
    "design_filter",
    "downsample",
    "upsample_to",
    "stft",
    "is_power_of_two",
]

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE

KAISER_BETA = 8.6
TAPS_PER_RATIO = 64


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE structure."""


class UnsupportedCodecError(WavFormatError):
    """Well-formed WAV whose sample encoding is not PCM-16 or float-32."""


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {self.samples.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def validate(self) -> None:
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("clip contains non-finite samples")


@dataclass
class Spectrogram:
    """One-sided STFT, ``values`` has shape (frames, bins)."""

    values: np.ndarray
    n_fft: int
    hop: int
    window: str

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


@dataclass(frozen=True)
class ResampleFilter:
    taps: np.ndarray
    cutoff: float
    kaiser_beta: float

    @property
    def delay(self) -> int:
        return (len(self.taps) - 1) // 2


# --------------------------------------------------------------------------
# WAV I/O


def _parse_fmt(body: bytes) -> tuple[int, int, int, int]:
    if len(body) < 16:
        raise WavFormatError("fmt chunk too short")
    tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(body) < 26:
            raise WavFormatError("extensible fmt chunk too short")
        (tag,) = struct.unpack("<H", body[24:26])
    return tag, channels, rate, bits


def read_wav(path) -> AudioClip:
    """Read a PCM-16 or float-32 WAV file as a mono clip.

    Multi-channel files are averaged. PCM-16 samples are divided by 32768.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: chunk {chunk_id!r} truncated")
        if chunk_id == b"fmt ":
            fmt = _parse_fmt(body)
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavFormatError(f"{path}: missing data chunk")

    tag, channels, rate, bits = fmt
    if channels < 1 or rate < 1:
        raise WavFormatError(f"{path}: invalid channel count or rate")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")

    frame_bytes = dtype.itemsize * channels
    n_frames = len(data) // frame_bytes
    frames = np.frombuffer(data[:n_frames * frame_bytes], dtype=dtype).reshape(n_frames, channels)
    samples = frames.astype(np.float64) * scale
    if channels > 1:
        samples = samples.mean(axis=1)
    else:
        samples = samples[:, 0]
    return AudioClip(samples, rate)


def write_wav(clip: AudioClip, path, encoding: str = "float32") -> None:
    """Write ``clip`` as a mono WAV file (``pcm16`` or ``float32``).

    float32 output round-trips bit-exactly for samples representable in
    single precision; pcm16 clips to [-1, 1] and rounds to the nearest step.
    """
    clip.validate()
    if encoding == "float32":
        payload = clip.samples.astype("<f4").tobytes()
        tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
    elif encoding == "pcm16":
        q = np.clip(np.round(clip.samples * 32768.0), -32768, 32767)
        payload = q.astype("<i2").tobytes()
        tag, bits = _WAVE_FORMAT_PCM, 16
    else:
        raise ValueError(f"unknown encoding {encoding!r}")

    block_align = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate,
                      clip.sample_rate * block_align, block_align, bits)
    header = b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(payload)) + b"WAVE"
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(header + body)


# --------------------------------------------------------------------------
# Resampling


def design_filter(ratio: int, beta: float = KAISER_BETA) -> ResampleFilter:
    """Kaiser-windowed sinc low-pass with cutoff 0.5/ratio and unit DC gain.

    Length is ``64 * ratio + 1`` taps so the transition width scales with
    the ratio.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    n_taps = TAPS_PER_RATIO * ratio + 1
    cutoff = 0.5 / ratio
    m = np.arange(n_taps) - (n_taps - 1) / 2
    taps = 2 * cutoff * np.sinc(2 * cutoff * m) * np.kaiser(n_taps, beta)
    taps /= taps.sum()
    return ResampleFilter(taps=taps, cutoff=cutoff, kaiser_beta=beta)


def _filter_same(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # zero-padded linear-phase filtering, output aligned with input
    delay = (len(taps) - 1) // 2
    y = oaconvolve(x, taps, mode="full")
    return y[delay:delay + len(x)]


def downsample(clip: AudioClip, p: int) -> AudioClip:
    """Anti-aliased decimation by ``p``; output has ``ceil(T / p)`` samples."""
    if int(p) != p or p < 1:
        raise ValueError(f"decimation factor must be a positive integer, got {p}")
    if clip.sample_rate % p:
        raise ValueError(f"sample rate {clip.sample_rate} is not divisible by {p}")
    if p == 1:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    filt = design_filter(p)
    y = _filter_same(clip.samples, filt.taps)[::p]
    return AudioClip(y, clip.sample_rate // p)


def upsample_to(clip: AudioClip, target_rate: int) -> AudioClip:
    """Zero-stuff to ``target_rate`` and interpolate with the Kaiser-sinc low-pass."""
    if target_rate <= 0 or target_rate % clip.sample_rate:
        raise ValueError(f"target rate {target_rate} is not an integer multiple of {clip.sample_rate}")
    ratio = target_rate // clip.sample_rate
    if ratio == 1:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    stuffed = np.zeros(len(clip.samples) * ratio)
    stuffed[::ratio] = clip.samples
    y = _filter_same(stuffed, interpolation_taps(ratio))
    return AudioClip(y, target_rate)


def interpolation_taps(ratio: int) -> np.ndarray:
    """The design filter scaled by ``ratio`` with every polyphase branch
    renormalized to unit DC gain, so constants interpolate exactly."""
    taps = design_filter(ratio).taps * ratio
    for r in range(ratio):
        taps[r::ratio] /= taps[r::ratio].sum()
    return taps


# --------------------------------------------------------------------------
# STFT


def _window(name: str, n: int) -> np.ndarray:
    if name == "hann":
        # periodic Hann
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    if name in ("rect", "rectangular", "boxcar"):
        return np.ones(n)
    raise ValueError(f"unknown window {name!r}")


def frame_count(length: int, n_fft: int, hop: int) -> int:
    """Number of frames after tail zero-padding to complete the final frame."""
    if length <= n_fft:
        return 1
    return 1 + -(-(length - n_fft) // hop)


def stft(clip, n_fft: int = 2048, hop: int = 512, window: str = "hann") -> Spectrogram:
    """One-sided STFT with tail zero-padding and no centering.

    ``clip`` may be an :class:`AudioClip` or a 1-D array.
    """
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if not is_power_of_two(n_fft):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if hop < 1:
        raise ValueError("hop must be positive")
    if len(x) < 1:
        raise ValueError("cannot analyse an empty signal")
    k = frame_count(len(x), n_fft, hop)
    padded = np.zeros(n_fft + (k - 1) * hop)
    padded[:len(x)] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop]
    values = np.fft.rfft(frames * _window(window, n_fft), axis=-1)
    return Spectrogram(values=values, n_fft=n_fft, hop=hop, window=window)
