"""splitmix64 pseudo-random stream.

Chosen for weight initialization because it is trivially portable: the whole
stream is a pure function of a 64-bit seed, with no framework RNG involved.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, n: int) -> np.ndarray:
    """Return the first n outputs of the splitmix64 stream as uint64."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + _GOLDEN * (np.arange(1, n + 1, dtype=np.uint64))
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return z


def uniform(seed: int, n: int, low: float, high: float) -> np.ndarray:
    """n floats uniform in [low, high), deterministic in seed. float32."""
    u = (splitmix64(seed, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return (low + (high - low) * u).astype(np.float32)


def derive(seed: int, index: int) -> int:
    """Derive an independent child seed (e.g. one per tensor or stage)."""
    return int(splitmix64(seed, index + 1)[-1])
