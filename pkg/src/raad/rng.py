"""Deterministic random streams built on the splitmix64 mixer.

Every stochastic choice in the package draws from one of these streams so
that runs are reproducible bit-for-bit from a single integer seed.  Child
streams are derived by key so that per-image work is order-independent.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.uint64) -> np.uint64:
    with np.errstate(over="ignore"):
        z = np.uint64(z)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive(seed: int, *keys: int) -> int:
    """Derive a child seed from ``seed`` and an ordered key path."""
    state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for k in keys:
            state = _mix(state + _GAMMA * np.uint64((int(k) + 1) & 0xFFFFFFFFFFFFFFFF))
    return int(state)


class Rng:
    """splitmix64 stream yielding uniform doubles and integers."""

    def __init__(self, seed: int):
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs as a uint64 vector."""
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64)
            z = self._state + idx * _GAMMA
            self._state = z[-1] if n else self._state
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            return z ^ (z >> np.uint64(31))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        # 53-bit mantissa fill gives doubles in [0, 1)
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = low + (high - low) * u
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection-free modular draw."""
        if n <= 0:
            raise ParameterError("randint needs a positive bound")
        return int(self.u64(1)[0] % np.uint64(n))

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order randomized."""
        if k > n:
            raise ParameterError("cannot draw %d distinct values from %d" % (k, n))
        idx = np.arange(n)
        for i in range(k):  # partial Fisher-Yates
            j = i + self.randint(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k].copy()

    def child(self, *keys: int) -> "Rng":
        return Rng(derive(int(self._state), *keys))
