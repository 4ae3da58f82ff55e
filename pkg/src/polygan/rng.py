"""Counter-based pseudorandom generator.

The whole project draws randomness through :class:`RngState`, a stateless
splitmix64 construction: the i-th raw draw is ``mix64(seed + (i+1)*GOLDEN)``
where ``mix64`` is the splitmix64 output permutation.  Identical seeds give
bit-identical sequences on every platform, the full state is two integers
(seed, counter), and independent substreams are derived by hashing a string
key into a new seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

_TWO_PI = 2.0 * np.pi
_INV_2_53 = float(2.0**-53)


def _mix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class RngState:
    """Splittable counter-based RNG; state is exactly (seed, counter)."""

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(self.counter)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = (np.uint64(self.seed) + idx * _GOLDEN) & _MASK
        return _mix64(state)

    def uniform(self, n: int = 1) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, n: int = 1) -> np.ndarray:
        """n standard normal doubles via Box-Muller on consecutive uniform pairs."""
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 is shifted into (0, 1] so that log(u1) is finite
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(_TWO_PI * u2)
        out[1::2] = r * np.sin(_TWO_PI * u2)
        return out[:n]

    def randint(self, n: int) -> int:
        """One integer uniform on [0, n)."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        return min(int(self.uniform(1)[0] * n), n - 1)

    def bits64(self) -> int:
        """One raw 64-bit draw (for deriving sub-seeds)."""
        return int(self._raw(1)[0])

    def choice(self, items):
        return items[self.randint(len(items))]

    def shuffled_indices(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of fresh uniforms)."""
        return np.argsort(self.uniform(n), kind="stable")

    def child(self, key: str) -> "RngState":
        """Independent substream derived from a string key; counter starts at 0."""
        mixed = np.uint64(self.seed) ^ _mix64(np.uint64(_fnv1a(key.encode("utf-8"))))
        return RngState(seed=int(_mix64(mixed ^ _GOLDEN)))
