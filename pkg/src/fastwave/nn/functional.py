"""Forward and backward kernels for the layer vocabulary.

Feature maps are float arrays shaped (batch, channels, time). Every
``op`` has a matching ``op_backward`` taking the upstream gradient and the
forward inputs and returning gradients in the order of the forward
arguments.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..dsp import is_power_of_two

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_kernel(k: int) -> None:
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")


def _pad_time(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad)))


# --------------------------------------------------------------------------
# Dense convolution


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """'same' cross-correlation: ``weight`` is (C_out, C_in, k), k odd."""
    c_out, c_in, k = weight.shape
    _check_kernel(k)
    if x.ndim != 3 or x.shape[1] != c_in:
        raise ValueError(f"input shape {x.shape} does not match weight {weight.shape}")
    t = x.shape[2]
    xp = _pad_time(x, k // 2)
    y = np.zeros((x.shape[0], c_out, t))
    for j in range(k):
        y += weight[:, :, j] @ xp[:, :, j:j + t]
    if bias is not None:
        y += bias[:, None]
    return y


def conv1d_backward(gy, x, weight):
    c_out, c_in, k = weight.shape
    t = x.shape[2]
    xp = _pad_time(x, k // 2)
    gw = np.empty_like(weight)
    for j in range(k):
        gw[:, :, j] = np.einsum("bot,bct->oc", gy, xp[:, :, j:j + t])
    gb = gy.sum(axis=(0, 2))
    flipped = weight.transpose(1, 0, 2)[:, :, ::-1]
    gx = conv1d(gy, np.ascontiguousarray(flipped))
    return gx, gw, gb


# --------------------------------------------------------------------------
# Depthwise and pointwise convolution


def dwconv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Per-channel 'same' cross-correlation; ``weight`` is (C, 1, k)."""
    c, one, k = weight.shape
    _check_kernel(k)
    if one != 1 or x.ndim != 3 or x.shape[1] != c:
        raise ValueError(f"input shape {x.shape} does not match depthwise weight {weight.shape}")
    t = x.shape[2]
    xp = _pad_time(x, k // 2)
    w = weight[:, 0, :]
    y = np.zeros(x.shape)
    for j in range(k):
        y += w[:, j, None] * xp[:, :, j:j + t]
    if bias is not None:
        y += bias[:, None]
    return y


def dwconv1d_backward(gy, x, weight):
    k = weight.shape[2]
    t = x.shape[2]
    xp = _pad_time(x, k // 2)
    gw = np.empty_like(weight)
    for j in range(k):
        gw[:, 0, j] = np.einsum("bct,bct->c", gy, xp[:, :, j:j + t])
    gb = gy.sum(axis=(0, 2))
    gx = dwconv1d(gy, np.ascontiguousarray(weight[:, :, ::-1]))
    return gx, gw, gb


def pwconv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Channel mixing at every time step; ``weight`` is (C_out, C_in)."""
    if weight.ndim != 2 or x.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"input shape {x.shape} does not match pointwise weight {weight.shape}")
    y = weight @ x
    if bias is not None:
        y += bias[:, None]
    return y


def pwconv1d_backward(gy, x, weight):
    gw = np.einsum("bot,bct->oc", gy, x)
    gb = gy.sum(axis=(0, 2))
    gx = weight.T @ gy
    return gx, gw, gb


# --------------------------------------------------------------------------
# Global response normalization


def grn(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """ConvNeXtV2 GRN over the time axis, per batch item.

    ``g_c = ||x_c||_2``, ``n_c = g_c / (mean_c g + eps)``,
    ``y = gamma_c x_c n_c + beta_c + x_c``.
    """
    g = np.sqrt(np.sum(x * x, axis=2, keepdims=True))
    n = g / (g.mean(axis=1, keepdims=True) + eps)
    return gamma[:, None] * (x * n) + beta[:, None] + x


def grn_backward(gy, x, gamma, eps: float = 1e-6):
    c = x.shape[1]
    g = np.sqrt(np.sum(x * x, axis=2, keepdims=True))
    denom = g.mean(axis=1, keepdims=True) + eps
    n = g / denom
    ggamma = np.einsum("bct,bct->c", gy, x * n)
    gbeta = gy.sum(axis=(0, 2))
    a = gy * gamma[:, None]
    gn = np.sum(a * x, axis=2, keepdims=True)
    # n_c depends on every g_j through the channel mean
    gg = gn / denom - np.sum(gn * g, axis=1, keepdims=True) / (denom * denom * c)
    safe_g = np.where(g > 0, g, 1.0)
    gx = gy + a * n + np.where(g > 0, gg / safe_g, 0.0) * x
    return gx, ggamma, gbeta


# --------------------------------------------------------------------------
# GELU


def _phi_cdf(x):
    return 0.5 * (1.0 + erf(x / _SQRT2))


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    return x * _phi_cdf(x)


def gelu_backward(gy, x):
    return gy * (_phi_cdf(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


# --------------------------------------------------------------------------
# Real FFT along time

_DUAL_NORM = {"backward": "forward", "forward": "backward", "ortho": "ortho"}


def rfft_time(x: np.ndarray, norm: str = "backward") -> np.ndarray:
    if not is_power_of_two(x.shape[-1]):
        raise ValueError(f"time length must be a power of two, got {x.shape[-1]}")
    return np.fft.rfft(x, axis=-1, norm=norm)


def rfft_time_backward(gz: np.ndarray, n: int, norm: str = "backward") -> np.ndarray:
    """Adjoint of :func:`rfft_time`.

    ``gz`` packs the gradients of the real and imaginary parts as
    ``dL/dRe + 1j * dL/dIm``.
    """
    h = gz.copy()
    h[..., 1:n // 2] *= 0.5
    return np.fft.irfft(h, n=n, axis=-1, norm=_DUAL_NORM[norm])


def irfft_time(z: np.ndarray, n: int, norm: str = "backward") -> np.ndarray:
    if not is_power_of_two(n) or z.shape[-1] != n // 2 + 1:
        raise ValueError(f"bad inverse transform shape {z.shape} for length {n}")
    return np.fft.irfft(z, n=n, axis=-1, norm=norm)


def irfft_time_backward(gx: np.ndarray, norm: str = "backward") -> np.ndarray:
    n = gx.shape[-1]
    gz = np.fft.rfft(gx, axis=-1, norm=_DUAL_NORM[norm])
    gz[..., 1:n // 2] *= 2.0
    # imaginary parts of the DC and Nyquist bins are ignored by irfft
    gz[..., 0] = gz[..., 0].real
    gz[..., n // 2] = gz[..., n // 2].real
    return gz


# --------------------------------------------------------------------------
# sigma embedding


def sigma_embedding(c_noise, freqs: np.ndarray) -> np.ndarray:
    """Random Fourier features ``[cos(2 pi f c), sin(2 pi f c)]``.

    Returns shape (B, 2 * len(freqs)) for a vector ``c_noise``, or
    (2 * len(freqs),) for a scalar.
    """
    c = np.asarray(c_noise, dtype=np.float64)
    phase = 2.0 * np.pi * np.multiply.outer(c, freqs)
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=-1)
