"""Deterministic random state with labeled derivation.

All randomness in the package flows from one master seed through named
``derive`` calls, so every consumer (init, shuffling, world sampling, noise)
owns an independent stream and results are reproducible bit-for-bit
regardless of call interleaving elsewhere.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngState:
    """Seeded PCG64 stream; identical seed + call sequence => identical draws."""

    def __init__(self, seed: int, _entropy: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._entropy = _entropy
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *_entropy]))
        )
        self.calls = 0

    def derive(self, label: str) -> "RngState":
        """Child stream keyed by a stable hash of ``label``."""
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        words = tuple(
            int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)
        )
        return RngState(self.seed, self._entropy + words)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        self.calls += 1
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        self.calls += 1
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        self.calls += 1
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        self.calls += 1
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        self.calls += 1
        return self._gen.permutation(n)

    def choice(self, seq, p=None):
        self.calls += 1
        idx = self._gen.choice(len(seq), p=p)
        return seq[int(idx)]

    def shuffle(self, items: list) -> None:
        self.calls += 1
        self._gen.shuffle(items)
