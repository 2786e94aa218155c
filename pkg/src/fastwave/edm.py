"""Closed-form diffusion math: preconditioning, loss weighting, noise-level
statistics, the rho-warped schedule and the Euler probability-flow sampler."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
RHO = 7.0
# fallback spread of ln(sigma) when the dataset gives no per-segment variation
DEFAULT_P_STD = 1.2


class StatisticsError(ValueError):
    pass


class DegenerateDatasetWarning(UserWarning):
    pass


class DenoiserContractError(RuntimeError):
    """The wrapped network returned a tensor of the wrong shape."""


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator whose stream depends only on ``(seed, *keys)``.

    Philox streams are keyed through SeedSequence, so e.g. the noise of batch
    item ``b`` at step ``s`` is ``keyed_rng(seed, s, b)`` regardless of how
    many draws other items made.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


def _check_positive(**kw):
    for name, v in kw.items():
        v = np.asarray(v)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError(f"{name} must be positive and finite")


def precondition_coeffs(sigma, sigma_data):
    """Return ``(c_in, c_skip, c_out, c_noise)``; broadcasts over arrays."""
    _check_positive(sigma=sigma, sigma_data=sigma_data)
    sigma = np.asarray(sigma, dtype=np.float64)
    s2 = sigma * sigma + sigma_data * sigma_data
    c_in = 1.0 / np.sqrt(s2)
    c_skip = sigma_data * sigma_data / s2
    c_out = sigma * sigma_data / np.sqrt(s2)
    c_noise = np.log(sigma) / 4.0
    if sigma.ndim == 0:
        return float(c_in), float(c_skip), float(c_out), float(c_noise)
    return c_in, c_skip, c_out, c_noise


def loss_weight(sigma, sigma_data):
    _check_positive(sigma=sigma, sigma_data=sigma_data)
    sigma = np.asarray(sigma, dtype=np.float64)
    lam = (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data) ** 2
    return float(lam) if lam.ndim == 0 else lam


@dataclass(frozen=True)
class Preconditioner:
    sigma_data: float

    def __post_init__(self):
        if not np.isfinite(self.sigma_data) or self.sigma_data <= 0:
            raise ValueError(f"sigma_data must be positive and finite, got {self.sigma_data}")

    def coeffs(self, sigma):
        return precondition_coeffs(sigma, self.sigma_data)

    def weight(self, sigma):
        return loss_weight(sigma, self.sigma_data)


def sample_sigma(rng: np.random.Generator, p_mean: float, p_std: float, size=None):
    """Draw from the log-normal ``ln sigma ~ N(p_mean, p_std^2)``."""
    if p_std <= 0:
        raise ValueError("p_std must be positive")
    return np.exp(p_mean + p_std * rng.standard_normal(size))


@dataclass(frozen=True)
class DatasetStats:
    sigma_data: float
    p_mean: float
    p_std: float
    n_segments: int

    def __post_init__(self):
        if not self.sigma_data > 0 or not self.p_std > 0:
            raise StatisticsError("sigma_data and p_std must be positive")
        if self.n_segments < 2:
            raise StatisticsError("need at least two segments")

    def to_dict(self) -> dict:
        return {"sigma_data": self.sigma_data, "p_mean": self.p_mean,
                "p_std": self.p_std, "n_segments": self.n_segments}


def estimate_stats(segments: Sequence[np.ndarray]) -> DatasetStats:
    """Dataset statistics for preconditioning and noise-level sampling.

    ``sigma_data`` is the population std of all samples pooled. ``p_mean``
    and ``p_std`` are the mean and population std of ``ln std(segment)``
    over segments; silent segments are skipped with a warning.
    """
    segments = [np.asarray(s, dtype=np.float64).ravel() for s in segments]
    if len(segments) < 2:
        raise StatisticsError("need at least two segments")
    if any(len(s) < 2 for s in segments):
        raise StatisticsError("every segment needs at least two samples")

    pooled = np.concatenate(segments)
    sigma_data = float(pooled.std())
    if sigma_data == 0:
        raise StatisticsError("dataset has zero variance")

    stds = np.array([s.std() for s in segments])
    silent = int(np.sum(stds == 0))
    if silent:
        warnings.warn(f"{silent} zero-variance segment(s) excluded from noise statistics",
                      DegenerateDatasetWarning, stacklevel=2)
    logs = np.log(stds[stds > 0])
    p_mean = float(logs.mean())
    p_std = float(logs.std())
    if p_std == 0:
        warnings.warn(f"ln(std) has no spread across segments; using p_std={DEFAULT_P_STD}",
                      DegenerateDatasetWarning, stacklevel=2)
        p_std = DEFAULT_P_STD
    return DatasetStats(sigma_data=sigma_data, p_mean=p_mean, p_std=p_std, n_segments=len(segments))


@dataclass(frozen=True)
class SigmaSchedule:
    sigma_min: float
    sigma_max: float
    rho: float
    n: int
    values: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.n

    def __iter__(self):
        return iter(self.values)


def build_schedule(sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX,
                   rho: float = RHO, n: int = 8) -> SigmaSchedule:
    """Noise levels ``(smax^(1/rho) + i/(n-1) (smin^(1/rho) - smax^(1/rho)))^rho``.

    Endpoints are pinned to ``sigma_max`` and ``sigma_min`` exactly.
    """
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if int(n) != n or n < 2:
        raise ValueError(f"need n >= 2 levels, got {n}")
    if not rho > 0:
        raise ValueError("rho must be positive")
    n = int(n)
    a = sigma_max ** (1.0 / rho)
    b = sigma_min ** (1.0 / rho)
    t = np.arange(n) / (n - 1)
    values = (a + t * (b - a)) ** rho
    values[0] = sigma_max
    values[-1] = sigma_min
    return SigmaSchedule(float(sigma_min), float(sigma_max), float(rho), n, values)


class DenoiserInterface(Protocol):
    def __call__(self, x: np.ndarray, sigma, cond) -> np.ndarray: ...


def apply_denoiser(net: Callable, x: np.ndarray, sigma, cond, pre: Preconditioner) -> np.ndarray:
    """``c_skip x + c_out F(c_in x, c_noise, cond)`` for a raw network ``F``.

    ``x`` has shape (B, T); ``sigma`` is a scalar or one value per batch item.
    """
    c_in, c_skip, c_out, c_noise = _per_item(pre.coeffs(sigma), x.shape[0])
    f = net(c_in * x, c_noise[:, 0], cond)
    if f.shape != x.shape:
        raise DenoiserContractError(f"network returned shape {f.shape}, expected {x.shape}")
    return c_skip * x + c_out * f


def _per_item(coeffs, batch):
    return tuple(np.broadcast_to(np.asarray(c, dtype=np.float64).reshape(-1, 1), (batch, 1))
                 for c in coeffs)


class Denoiser:
    """Preconditioned wrapper around a trainable network with ``backward``.

    Calling it evaluates the preconditioned denoiser; ``backward`` takes
    the gradient with respect to the denoised output and pushes it into
    the network's parameter gradients.
    """

    def __init__(self, net, pre: Preconditioner):
        self.net = net
        self.pre = pre
        self._c_out = None

    def __call__(self, x, sigma, cond):
        c_in, c_skip, c_out, c_noise = _per_item(self.pre.coeffs(sigma), x.shape[0])
        f = self.net(c_in * x, c_noise[:, 0], cond)
        if f.shape != x.shape:
            raise DenoiserContractError(f"network returned shape {f.shape}, expected {x.shape}")
        self._c_out = c_out
        return c_skip * x + c_out * f

    def backward(self, grad_out):
        self.net.backward(self._c_out * grad_out)


def score(x: np.ndarray, sigma, d: np.ndarray) -> np.ndarray:
    if np.shape(x) != np.shape(d):
        raise ValueError(f"shape mismatch {np.shape(x)} vs {np.shape(d)}")
    _check_positive(sigma=sigma)
    return (np.asarray(d) - np.asarray(x)) / np.asarray(sigma) ** 2


def denoising_loss(model, x_clean: np.ndarray, cond, sigma, rng: np.random.Generator,
                   pre: Preconditioner, backward: bool = True) -> float:
    """Weighted L2 denoising loss, averaged over elements and then batch items.

    Noise ``n ~ N(0, sigma^2)`` is drawn from ``rng``. When ``model`` has a
    ``backward`` method and ``backward`` is true, gradients are accumulated.
    """
    x_clean = np.asarray(x_clean, dtype=np.float64)
    batch = x_clean.shape[0]
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1, 1), (batch, 1))
    noise = rng.standard_normal(x_clean.shape) * sig
    d = model(x_clean + noise, sig[:, 0], cond)
    lam = pre.weight(sig)
    err = d - x_clean
    n_elem = err[0].size
    loss = float(np.mean(lam[:, 0] * np.mean(err.reshape(batch, -1) ** 2, axis=1)))
    if backward and hasattr(model, "backward"):
        model.backward(lam * 2.0 * err / (n_elem * batch))
    return loss


def euler_sample(model, cond, schedule: SigmaSchedule, rng: np.random.Generator,
                 length: int, batch: int = 1) -> np.ndarray:
    """First-order Euler integration of the probability-flow ODE.

    Starts from ``N(0, sigma_max^2)`` and walks the schedule from high to low
    noise, then takes a final step to sigma = 0, which amounts to returning
    the denoised estimate at ``sigma_min``. One model call per level.
    """
    sigmas = np.append(schedule.values, 0.0)
    x = rng.standard_normal((batch, length)) * sigmas[0]
    for s_cur, s_next in zip(sigmas[:-1], sigmas[1:]):
        d = model(x, s_cur, cond)
        if d.shape != x.shape:
            raise DenoiserContractError(f"model returned shape {d.shape}, expected {x.shape}")
        # the step to sigma = 0 lands exactly on d
        x = d if s_next == 0 else x + (s_next - s_cur) * (x - d) / s_cur
    return x
