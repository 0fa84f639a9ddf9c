from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RngStream:
    """Seeded PCG64 stream. Same seed, same draws, on every platform numpy supports."""

    seed: int
    algorithm: str = "PCG64"
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.algorithm != "PCG64":
            raise ValueError(f"unsupported rng algorithm {self.algorithm!r}")
        self.seed = int(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def derive(self, name: str) -> "RngStream":
        """Independent child stream keyed by ``name``; does not consume draws from self."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
        return RngStream(int(ss.generate_state(1, np.uint64)[0]))

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def describe(self) -> dict:
        return {"seed": self.seed, "algorithm": self.algorithm}
