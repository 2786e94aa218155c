"""Training loop: batching, Adam, parameter EMA and binary checkpoints."""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp
from .edm import (DatasetStats, Denoiser, Preconditioner, denoising_loss, keyed_rng,
                  sample_sigma)
from .model import FULL_RATE, ConditioningBundle, FastWaveNet, ModelConfig
from .nn.layers import Module, Parameter

log = logging.getLogger(__name__)

BENCHMARK_RATES = (8000, 12000, 16000, 24000)

CHECKPOINT_MAGIC = b"FWCK"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


@dataclass
class TrainConfig:
    segment_length: int = 32768
    batch_size: int = 8
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    max_steps: int = 100_000
    seed: int = 0
    rates: tuple = BENCHMARK_RATES
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.rates = tuple(int(r) for r in self.rates)
        if not dsp.is_power_of_two(self.segment_length):
            raise ValueError("segment_length must be a power of two")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must be in (0, 1)")
        for r in self.rates:
            if r <= 0 or FULL_RATE % r:
                raise ValueError(f"source rate {r} does not divide {FULL_RATE}")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        base = dict(segment_length=2048, batch_size=4, learning_rate=2e-3,
                    ema_decay=0.99, max_steps=2000, checkpoint_every=500)
        base.update(overrides)
        return cls(**base)


# --------------------------------------------------------------------------
# Optimizer and EMA


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of ``params`` (``(name, Parameter)`` pairs) in place."""
    params = list(params)
    for name, p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params:
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def ema_update(shadow: dict, params, decay: float) -> dict:
    """``shadow <- decay * shadow + (1 - decay) * params``, element-wise."""
    for name, p in params:
        data = p.data if isinstance(p, Parameter) else p
        s = shadow.get(name)
        if s is None:
            shadow[name] = np.array(data, dtype=np.float64)
        else:
            s *= decay
            s += (1.0 - decay) * data
    return shadow


@dataclass
class TrainState:
    stats: DatasetStats
    adam: AdamState = field(default_factory=AdamState)
    ema: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.adam.step


def with_weights(net: Module, weights: dict) -> Module:
    """Deep copy of ``net`` with parameters replaced by ``weights``."""
    clone = copy.deepcopy(net)
    for name, p in clone.named_parameters():
        p.data[...] = weights[name]
    return clone


# --------------------------------------------------------------------------
# Training step


def make_conditioning(segments: np.ndarray, rates: Sequence[int], sigma_data: float) -> ConditioningBundle:
    """Downsample each 48 kHz segment to its source rate and bring it back to 48 kHz."""
    low = np.empty_like(segments)
    for i, (seg, rate) in enumerate(zip(segments, rates)):
        y = dsp.downsample(dsp.AudioClip(seg, FULL_RATE), FULL_RATE // int(rate))
        low[i] = dsp.upsample_to(y, FULL_RATE).samples[:len(seg)]
    return ConditioningBundle.from_rates(low, rates, scale=1.0 / sigma_data)


def train_step(net: FastWaveNet, batch, state: TrainState, rng: np.random.Generator,
               config: TrainConfig) -> float:
    """One optimizer step on ``batch``, a sequence of ``(segment, source_rate)``."""
    segments = np.stack([np.asarray(s, dtype=np.float64) for s, _ in batch])
    rates = [int(r) for _, r in batch]
    stats = state.stats
    cond = make_conditioning(segments, rates, stats.sigma_data)
    sigma = sample_sigma(rng, stats.p_mean, stats.p_std, size=len(batch))
    pre = Preconditioner(stats.sigma_data)
    net.zero_grad()
    loss = denoising_loss(Denoiser(net, pre), segments, cond, sigma, rng, pre)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {state.step + 1}")
    params = list(net.named_parameters())
    adam_step(params, state.adam, config.learning_rate, config.adam_beta1,
              config.adam_beta2, config.adam_eps)
    ema_update(state.ema, params, config.ema_decay)
    return loss


def draw_batch(clips: Sequence[np.ndarray], config: TrainConfig, step: int):
    """Random segments and source rates for ``step``; clips shorter than a
    segment are zero-padded."""
    rng = keyed_rng(config.seed, step, 0)
    n = config.segment_length
    batch = []
    for _ in range(config.batch_size):
        clip = clips[int(rng.integers(len(clips)))]
        seg = np.zeros(n)
        if len(clip) > n:
            start = int(rng.integers(len(clip) - n + 1))
            seg[:] = clip[start:start + n]
        else:
            seg[:len(clip)] = clip
        rate = config.rates[int(rng.integers(len(config.rates)))]
        batch.append((seg, rate))
    return batch


class Trainer:
    """Drives :func:`train_step` with per-step keyed randomness, so a run can
    be resumed from any checkpoint and continue bit-identically."""

    def __init__(self, net: FastWaveNet, state: TrainState, clips, config: TrainConfig):
        if not clips:
            raise ValueError("no training clips")
        self.net, self.state, self.clips, self.config = net, state, clips, config
        if not state.ema:
            ema_update(state.ema, net.named_parameters(), 0.0)

    def step(self) -> float:
        s = self.state.step
        batch = draw_batch(self.clips, self.config, s)
        return train_step(self.net, batch, self.state, keyed_rng(self.config.seed, s, 1), self.config)

    def ema_net(self) -> FastWaveNet:
        return with_weights(self.net, self.state.ema)


# --------------------------------------------------------------------------
# Checkpoints


def _config_vector(net: FastWaveNet) -> np.ndarray:
    c = net.config
    if not 0 <= net.seed < 2 ** 53:
        # the header stores the seed in a float64 slot
        raise CheckpointFormatError(f"model seed {net.seed} is not representable in a checkpoint")
    return np.array([c.base_channels, c.n_blocks, c.dw_kernel, c.embed_dim,
                     c.ffc_global_fraction, net.seed], dtype=np.float64)


def _stats_vector(stats: DatasetStats) -> np.ndarray:
    return np.array([stats.sigma_data, stats.p_mean, stats.p_std, stats.n_segments], dtype=np.float64)


def checkpoint_tensors(net: FastWaveNet, state: TrainState) -> list[tuple[str, np.ndarray]]:
    tensors = [("meta/model_config", _config_vector(net)), ("meta/stats", _stats_vector(state.stats))]
    tensors += [(f"buffer/{n}", b) for n, b in net.named_buffers()]
    names = [n for n, _ in net.named_parameters()]
    tensors += [(f"param/{n}", p.data) for n, p in net.named_parameters()]
    for prefix, bucket in (("adam_m", state.adam.m), ("adam_v", state.adam.v), ("ema", state.ema)):
        tensors += [(f"{prefix}/{n}", bucket[n]) for n in names if n in bucket]
    return tensors


def save_checkpoint(net: FastWaveNet, state: TrainState, path) -> None:
    tensors = checkpoint_tensors(net, state)
    out = [CHECKPOINT_MAGIC, struct.pack("<IQI", CHECKPOINT_VERSION, state.step, len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        code = 0 if arr.dtype == np.float32 else 1
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(out))


def read_checkpoint_tensors(path) -> tuple[int, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    if len(raw) < 20:
        raise CheckpointFormatError(f"{path}: truncated header")
    version, step, count = struct.unpack_from("<IQI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 20
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            code, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            dtype = _DTYPES.get(code)
            if dtype is None:
                raise CheckpointFormatError(f"{path}: unknown dtype code {code} for {name!r}")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(raw):
                raise CheckpointFormatError(f"{path}: payload of {name!r} truncated")
            tensors[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                          offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated tensor header") from exc
    if pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return step, tensors


def load_checkpoint(path) -> tuple[FastWaveNet, TrainState]:
    step, tensors = read_checkpoint_tensors(path)
    try:
        cfg = tensors["meta/model_config"]
        st = tensors["meta/stats"]
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: missing {exc.args[0]}") from None
    config = ModelConfig(base_channels=int(cfg[0]), n_blocks=int(cfg[1]), dw_kernel=int(cfg[2]),
                         embed_dim=int(cfg[3]), ffc_global_fraction=float(cfg[4]))
    net = FastWaveNet(config, seed=int(cfg[5]))
    for name, _ in list(net.named_buffers()):
        net.set_buffer(name, tensors[f"buffer/{name}"])
    state = TrainState(stats=DatasetStats(float(st[0]), float(st[1]), float(st[2]), int(st[3])),
                       adam=AdamState(step=step))
    for name, p in net.named_parameters():
        key = f"param/{name}"
        if key not in tensors or tensors[key].shape != p.shape:
            raise CheckpointFormatError(f"{path}: parameter {name!r} missing or mis-shaped")
        p.data[...] = tensors[key]
        for prefix, bucket in (("adam_m", state.adam.m), ("adam_v", state.adam.v), ("ema", state.ema)):
            if f"{prefix}/{name}" in tensors:
                bucket[name] = tensors[f"{prefix}/{name}"].astype(np.float64)
    return net, state
