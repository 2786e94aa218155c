"""The FastWave residual denoiser network and its band conditioning."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dsp import is_power_of_two
from .nn import functional as Fn
from .nn.layers import (GELU, GRN, DWConv1d, Linear, Module, PWConv1d, SigmaEmbedding,
                        fft_flops)

FULL_RATE = 48000
N_BINS = 1025


@dataclass(frozen=True)
class BandSpec:
    f_in: int
    cutoff_index: int
    mask: np.ndarray


def cutoff_index(f_in: float) -> int:
    """Bins of the 2048-point 48 kHz spectrum that the source rate covers."""
    if not 0 < f_in <= FULL_RATE:
        raise ValueError(f"source rate must be in (0, {FULL_RATE}], got {f_in}")
    return (N_BINS * int(f_in)) // FULL_RATE


def band_mask(f_in: int) -> BandSpec:
    fc = cutoff_index(f_in)
    mask = (np.arange(N_BINS) < fc).astype(np.float64)
    return BandSpec(f_in=int(f_in), cutoff_index=fc, mask=mask)


def resample_mask(mask: np.ndarray, n_points: int) -> np.ndarray:
    """Nearest-bin lookup of 1025-bin masks at ``n_points`` frequencies."""
    mask = np.atleast_2d(mask)
    if n_points == 1:
        return mask[:, :1].copy()
    idx = np.floor(np.arange(n_points) * (mask.shape[-1] - 1) / (n_points - 1) + 0.5).astype(int)
    return mask[:, idx]


@dataclass
class ConditioningBundle:
    """Low-resolution signal presented at 48 kHz plus its band masks.

    ``low_res`` is (B, T); ``masks`` is (B, 1025).
    """

    low_res: np.ndarray
    masks: np.ndarray

    @classmethod
    def from_rates(cls, low_res, rates, scale: float = 1.0) -> "ConditioningBundle":
        low_res = np.atleast_2d(np.asarray(low_res, dtype=np.float64)) * scale
        rates = np.broadcast_to(np.asarray(rates), (low_res.shape[0],))
        masks = np.stack([band_mask(int(r)).mask for r in rates])
        return cls(low_res, masks)

    def __len__(self):
        return self.low_res.shape[0]


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    n_blocks: int = 8
    dw_kernel: int = 7
    embed_dim: int = 128
    ffc_global_fraction: float = 0.5

    def __post_init__(self):
        if min(self.base_channels, self.n_blocks, self.dw_kernel, self.embed_dim) < 1:
            raise ValueError("model dimensions must be positive")
        if self.dw_kernel % 2 == 0:
            raise ValueError("dw_kernel must be odd")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if not 0.0 <= self.ffc_global_fraction <= 1.0:
            raise ValueError("ffc_global_fraction must be in [0, 1]")
        g = self.ffc_global_fraction * self.base_channels
        if abs(g - round(g)) > 1e-9:
            raise ValueError("ffc_global_fraction * base_channels must be an integer")

    @property
    def global_channels(self) -> int:
        return int(round(self.ffc_global_fraction * self.base_channels))

    @classmethod
    def toy(cls) -> "ModelConfig":
        return cls(base_channels=16, n_blocks=2, dw_kernel=7, embed_dim=16, ffc_global_fraction=0.5)

    def to_dict(self) -> dict:
        return asdict(self)


class BSFT(Module):
    """Band-conditioned FiLM on complex frequency features.

    The band mask goes through a shared trunk (depthwise conv along
    frequency, pointwise conv, GELU, GRN) feeding a scale head and a shift
    head. The same scale and shift apply to real and imaginary parts.
    """

    def __init__(self, channels: int, hidden: int, k: int, rng):
        super().__init__()
        self.channels, self.hidden = channels, hidden
        self.dw = DWConv1d(1, k, rng)
        self.pw = PWConv1d(1, hidden, rng)
        self.act = GELU(hidden)
        self.grn = GRN(hidden)
        self.to_scale = PWConv1d(hidden, channels, rng, bias_init=1.0)
        self.to_shift = PWConv1d(hidden, channels, rng)

    def forward(self, z, mask):
        h = self.grn(self.act(self.pw(self.dw(mask))))
        gamma = self.to_scale(h)
        beta = self.to_shift(h)
        self._z, self._gamma = z, gamma
        return gamma * z + beta * (1.0 + 1.0j)

    def backward(self, gz):
        z = self._z
        g_gamma = gz.real * z.real + gz.imag * z.imag
        g_beta = gz.real + gz.imag
        gh = self.to_scale.backward(g_gamma) + self.to_shift.backward(g_beta)
        self.dw.backward(self.pw.backward(self.act.backward(self.grn.backward(gh))))
        return self._gamma * gz

    def flops(self, f):
        # trunk and heads run on f frequency points; modulation is 2 mul + 2 add per complex value
        return super().flops(f) + 4 * self.channels * f


def modulate(z: np.ndarray, bsft: BSFT, band) -> np.ndarray:
    """Apply ``bsft`` to complex features ``z`` (B, C, F') for a BandSpec or mask batch."""
    masks = band.mask if isinstance(band, BandSpec) else band
    m = resample_mask(masks, z.shape[-1])
    m = np.broadcast_to(m, (z.shape[0], m.shape[-1]))[:, None, :]
    return bsft(z, np.ascontiguousarray(m))


class STFCBlock(Module):
    """Residual block with a local ConvNeXtV2 branch and a global Fourier branch.

    Local: dwconv -> pwconv (4x) -> GELU -> GRN -> pwconv.
    Global: rfft -> BSFT -> pointwise conv on (re, im) -> GELU -> irfft.
    The concatenated branches pass GRN and a zero-initialized projection.
    """

    def __init__(self, channels: int, k: int, embed_dim: int, global_channels: int, rng):
        super().__init__()
        self.channels = channels
        self.c_g = global_channels
        self.c_l = channels - global_channels
        self.emb = Linear(embed_dim, channels, rng)
        if self.c_l:
            self.local_dw = DWConv1d(self.c_l, k, rng)
            self.local_pw1 = PWConv1d(self.c_l, 4 * self.c_l, rng)
            self.local_act = GELU(4 * self.c_l)
            self.local_grn = GRN(4 * self.c_l)
            self.local_pw2 = PWConv1d(4 * self.c_l, self.c_l, rng)
        if self.c_g:
            self.bsft = BSFT(self.c_g, self.c_g, k, rng)
            self.spec_conv = PWConv1d(2 * self.c_g, 2 * self.c_g, rng)
            self.spec_act = GELU(2 * self.c_g)
        self.out_grn = GRN(channels)
        self.out_proj = PWConv1d(channels, channels, rng, zero_init=True)

    def forward(self, x, emb, mask):
        t = x.shape[-1]
        u = x + self.emb(emb)[:, :, None]
        parts = []
        if self.c_l:
            h = self.local_dw(u[:, :self.c_l])
            h = self.local_pw2(self.local_grn(self.local_act(self.local_pw1(h))))
            parts.append(h)
        if self.c_g:
            z = Fn.rfft_time(u[:, self.c_l:], norm="ortho")
            z = self.bsft(z, mask)
            s = self.spec_act(self.spec_conv(np.concatenate([z.real, z.imag], axis=1)))
            z = s[:, :self.c_g] + 1j * s[:, self.c_g:]
            parts.append(Fn.irfft_time(z, t, norm="ortho"))
        h = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
        return x + self.out_proj(self.out_grn(h))

    def backward(self, gy):
        """Return gradients w.r.t. the block input and the sigma embedding."""
        gh = self.out_grn.backward(self.out_proj.backward(gy))
        gu = np.empty_like(gy)
        if self.c_l:
            g = self.local_pw1.backward(self.local_act.backward(
                self.local_grn.backward(self.local_pw2.backward(gh[:, :self.c_l]))))
            gu[:, :self.c_l] = self.local_dw.backward(g)
        if self.c_g:
            gz = Fn.irfft_time_backward(gh[:, self.c_l:], norm="ortho")
            gs = self.spec_conv.backward(self.spec_act.backward(np.concatenate([gz.real, gz.imag], axis=1)))
            gz = self.bsft.backward(gs[:, :self.c_g] + 1j * gs[:, self.c_g:])
            gu[:, self.c_l:] = Fn.rfft_time_backward(gz, gy.shape[-1], norm="ortho")
        g_emb = self.emb.backward(gu.sum(axis=2))
        return gy + gu, g_emb

    def flops(self, t):
        f = t // 2 + 1
        total = self.emb.flops(t) + 2 * self.channels * t  # bias add, residual add
        total += self.out_grn.flops(t) + self.out_proj.flops(t)
        if self.c_l:
            for layer in (self.local_dw, self.local_pw1, self.local_act, self.local_grn, self.local_pw2):
                total += layer.flops(t)
        if self.c_g:
            total += 2 * fft_flops(t, self.c_g)
            total += self.bsft.flops(f) + self.spec_conv.flops(f) + self.spec_act.flops(f)
        return total


class FastWaveNet(Module):
    """Raw network ``F(x_in, c_noise, cond)`` on (B, T) waveforms.

    Input channels are the preconditioned noisy signal and the conditioning
    signal; the output projection is zero-initialized so a fresh network
    returns exactly zero.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        c, e = config.base_channels, config.embed_dim
        self.embed = SigmaEmbedding(e, rng)
        self.embed_proj = Linear(e, e, rng)
        self.embed_act = GELU(e)
        self.inp = PWConv1d(2, c, rng)
        self.blocks = []
        for i in range(config.n_blocks):
            blk = STFCBlock(c, config.dw_kernel, e, config.global_channels, rng)
            self._children[f"blocks.{i}"] = blk
            self.blocks.append(blk)
        self.out_act = GELU(c)
        self.out = PWConv1d(c, 1, rng, zero_init=True)

    def forward(self, x_in, c_noise, cond: ConditioningBundle):
        x_in = np.atleast_2d(x_in)
        b, t = x_in.shape
        if not is_power_of_two(t):
            raise ValueError(f"input length must be a power of two, got {t}")
        if cond.low_res.shape != x_in.shape:
            raise ValueError(f"conditioning shape {cond.low_res.shape} does not match input {x_in.shape}")
        c_noise = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (b,))
        emb = self.embed_act(self.embed_proj(self.embed(c_noise)))
        m = resample_mask(cond.masks, t // 2 + 1)
        m = np.ascontiguousarray(np.broadcast_to(m, (b, m.shape[-1]))[:, None, :])
        h = self.inp(np.stack([x_in, cond.low_res], axis=1))
        for blk in self.blocks:
            h = blk(h, emb, m)
        return self.out(self.out_act(h))[:, 0]

    def backward(self, gy):
        g = self.out_act.backward(self.out.backward(gy[:, None, :]))
        g_emb = 0.0
        for blk in reversed(self.blocks):
            g, ge = blk.backward(g)
            g_emb = g_emb + ge
        self.embed_proj.backward(self.embed_act.backward(g_emb))
        gx = self.inp.backward(g)
        return gx[:, 0]

    def flops(self, t):
        # the embedding path runs once per evaluation, not per sample
        emb = self.embed.flops(1) + self.embed_proj.flops(1) + self.embed_act.flops(1)
        return (emb + self.inp.flops(t) + sum(b.flops(t) for b in self.blocks)
                + self.out_act.flops(t) + self.out.flops(t))


def build_model(config: ModelConfig | None = None, seed: int = 0) -> FastWaveNet:
    return FastWaveNet(config or ModelConfig(), seed)
