"""Counter-based integer RNG (splitmix64).

Used where a random stream must be reproducible across backends and
independent of evaluation order: the reservoir sampler draws its i-th
variate as a pure function of (seed, i), so the numba loop and the
vectorized numpy fallback see exactly the same integers.
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed, counter):
    """Mix (seed, counter) into a uint64. counter may be a scalar or array."""
    with np.errstate(over="ignore"):  # uint64 wraparound is the point
        z = np.uint64(seed) + (np.asarray(counter, dtype=np.uint64) + np.uint64(1)) * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))
