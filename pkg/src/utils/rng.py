"""
Counter-based random streams for reproducible simulation and training

Every stream wraps numpy's Philox4x64 generator (a counter-based bit
generator: the output is a keyed bijection of a 256-bit counter, so results
are identical across platforms for the same seed and call sequence). Child
streams are derived from the parent's SeedSequence, never from its state.
"""
from typing import Union

import numpy as np


class RngStream:
    """Single-owner random stream; derive children for parallel work"""

    def __init__(self, seed: Union[int, np.random.SeedSequence] = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            if int(seed) < 0:
                raise ValueError("seed must be a non-negative integer")
            self._seq = np.random.SeedSequence(int(seed))
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    @property
    def seed(self) -> int:
        return int(self._seq.entropy)

    def child(self, key: int) -> "RngStream":
        """Independent stream keyed by an integer (row id, seed index, ...)"""
        seq = np.random.SeedSequence(
            self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + (int(key),)
        )
        return RngStream(seq)

    def spawn(self, n: int) -> list:
        return [self.child(i) for i in range(n)]

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def bernoulli(self, p, size=None) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        shape = p.shape if size is None else size
        return (self.generator.random(shape) < p).astype(np.int64)

    def binomial(self, n: int, p, size=None) -> np.ndarray:
        return self.generator.binomial(n, p, size)

    def integers(self, low: int, high: int = None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self.generator.choice(a, size=size, replace=replace)


def as_stream(rng: Union[RngStream, int, None]) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(0 if rng is None else rng)
