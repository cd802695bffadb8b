"""
Counter-mode random streams.

Trial ``i`` of a run seeded with ``master_seed`` always sees the same random
numbers, whatever the chunking or worker count. Seeds and the standard normal
draws of each trial are pure functions of (master_seed, i) and (seed, j), built
from the SplitMix64 finalizer so that they vectorize over trials with numpy.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

__all__ = ["splitmix64", "trial_seeds", "counter_normals", "trial_generator"]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 output function applied elementwise to uint64 state words."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _as_u64(value: int) -> np.uint64:
    return np.uint64(int(value) & _MASK)


def trial_seeds(master_seed: int, n: int, offset: int = 0) -> np.ndarray:
    """64-bit seeds of trials ``offset .. offset+n-1``."""
    idx = np.arange(offset, offset + n, dtype=np.uint64)
    key = splitmix64(np.array([_as_u64(master_seed)]))[0]
    with np.errstate(over="ignore"):
        return splitmix64(splitmix64(idx * _GAMMA ^ key))


def counter_normals(seeds: np.ndarray, k: int, stream: int = 0) -> np.ndarray:
    """Standard normal draws, shape (len(seeds), k); column j depends only on (seed, stream, j)."""
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1, 1)
    ctr = np.arange(k, dtype=np.uint64) + _as_u64(stream) * np.uint64(1 << 32)
    with np.errstate(over="ignore"):
        words = splitmix64(seeds ^ splitmix64(ctr + np.uint64(1))[None, :])
    # 53-bit uniforms on the open interval (0, 1).
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def trial_generator(seed: int) -> np.random.Generator:
    """Full numpy generator for per-trial work that is not vectorized (traces)."""
    return np.random.default_rng(int(seed))
