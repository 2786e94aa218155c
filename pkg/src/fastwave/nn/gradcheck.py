"""Central finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_grad(f: Callable[[], float], arr: np.ndarray, index=None, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` entries, in place.

    ``index`` restricts the probe to a list of flat indices; other entries
    of the result are left at zero.
    """
    flat = arr.reshape(-1)
    out = np.zeros(arr.size)
    for i in range(arr.size) if index is None else index:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(arr.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the largest numeric gradient entry."""
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def sample_indices(size: int, max_probes: int, rng: np.random.Generator):
    if size <= max_probes:
        return list(range(size))
    return sorted(rng.choice(size, max_probes, replace=False).tolist())
