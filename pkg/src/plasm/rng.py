"""Seeded, splittable random streams.

Each :class:`Rng` is a Philox counter-based generator keyed by ``(seed, stream)``.
Child streams are derived from a parent key plus integer ids, so the stream
used for e.g. (clip 3, frame 7) never depends on how many draws happened
elsewhere.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed=0, stream=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def derive(self, *ids):
        """Child stream identified by ``ids``; independent of this stream's position."""
        ss = np.random.SeedSequence([self.stream & 0xFFFFFFFF, self.stream >> 32, *(int(i) & 0xFFFFFFFF for i in ids)],
                                    spawn_key=(len(ids),))
        return Rng(self.seed, int(ss.generate_state(1, np.uint64)[0]))

    def normal(self, shape, std=1.0, dtype=np.float32):
        return (self._gen.standard_normal(shape, dtype=np.float64) * std).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"
