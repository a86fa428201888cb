"""Seeded random streams.

A ``(seed, stream)`` pair maps to a PCG64 generator through numpy's
SeedSequence, which is specified bit-for-bit and platform independent.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngSeed:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.stream < 0:
            raise ValueError(f"stream id must be non-negative, got {self.stream}")

    def generator(self):
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(self.stream,))))

    def child(self, stream):
        """Another independent stream under the same seed."""
        return RngSeed(self.seed, stream)


def make_rng(seed, stream=0):
    if isinstance(seed, RngSeed):
        return seed.generator()
    return RngSeed(int(seed), stream).generator()
