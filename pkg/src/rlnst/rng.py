"""Deterministic counter-based random number generator.

Every draw is a pure function of (seed, counter), so a fixed seed gives a
bit-identical stream on every platform and run. Normal variates come from a
Box-Muller transform of two counter uniforms, which keeps the stream free of
any rejection-sampling state.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0**-53)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # Finalizer of the splitmix64 generator; operates on uint64 arrays,
    # relying on numpy's silent modular wraparound.
    z = (x + _GOLDEN).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _seed_from_label(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Stateful view over the counter stream for one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._base = _splitmix64(np.array([self.seed], dtype=np.uint64))[0]
        self.counter = 0

    def derive(self, label: str) -> "Rng":
        """Independent substream keyed by a stable label (order-insensitive)."""
        return Rng(_seed_from_label(self.seed, label))

    def _next_words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _splitmix64(self._base + idx)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws in [low, high) with 53-bit resolution."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._next_words(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        out = low + (high - low) * u
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """N(mean, std^2) draws via Box-Muller (cosine branch)."""
        n = int(np.prod(shape)) if shape else 1
        words = self._next_words(2 * n)
        # u1 in (0, 1] so log() is finite; u2 in [0, 1)
        u1 = ((words[:n] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (words[n:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        out = mean + std * z
        return out.reshape(shape) if shape else out[0]

    def integers(self, n_draws: int, upper: int) -> np.ndarray:
        """n_draws indices uniform over [0, upper); multiply-shift, no rejection."""
        if upper <= 0:
            raise ValueError("upper must be positive")
        words = self._next_words(n_draws)
        # 128-bit multiply-high trick done in python ints to stay exact
        ups = np.array(
            [(int(w) * upper) >> 64 for w in words], dtype=np.int64
        )
        return ups
