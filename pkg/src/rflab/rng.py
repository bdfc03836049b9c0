"""Counter-based random streams keyed by (seed, step, purpose).

Every random draw in training, reflow generation and evaluation comes from a
Philox generator whose key is derived from a seed, an integer counter and a
purpose string. Streams with different purposes are independent, so e.g. the
dropout draws of step 17 do not shift when the noise shape changes.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _purpose_words(purpose: str) -> tuple[int, int]:
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "little")
    return value & 0xFFFFFFFF, value >> 32


def substream(seed: int, step: int, purpose: str) -> np.random.Generator:
    """Return an independent generator for ``(seed, step, purpose)``."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    seed &= _MASK64
    lo, hi = _purpose_words(purpose)
    entropy = [seed & 0xFFFFFFFF, seed >> 32, step & 0xFFFFFFFF, step >> 32, lo, hi]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


class StepStreams:
    """Lazily created substreams for one (seed, step) pair."""

    def __init__(self, seed: int, step: int):
        self.seed = seed
        self.step = step
        self._streams: dict[str, np.random.Generator] = {}

    def __call__(self, purpose: str) -> np.random.Generator:
        if purpose not in self._streams:
            self._streams[purpose] = substream(self.seed, self.step, purpose)
        return self._streams[purpose]
