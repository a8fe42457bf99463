"""
splitmix64 stream used to draw fixture weights.

The n-th output (n >= 1) of a generator seeded with ``s`` is
``mix(s + n * GOLDEN)``, so any slice of the stream can be produced in one
vectorised step.
"""
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
MIX_2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * MIX_1
    z = (z ^ (z >> np.uint64(27))) * MIX_2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based splitmix64 that hands out consecutive blocks of the stream."""

    def __init__(self, seed):
        self.seed = np.uint64(int(seed) & MASK64)
        self.position = 0

    def next_uint64(self, count):
        counters = np.arange(self.position + 1, self.position + count + 1, dtype=np.uint64)
        self.position += count
        with np.errstate(over='ignore'):
            return _mix(self.seed + counters * GOLDEN)

    def uniform(self, count, low, high):
        """Doubles on [low, high) built from the top 53 bits of each output."""
        unit = (self.next_uint64(count) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return low + (high - low) * unit
