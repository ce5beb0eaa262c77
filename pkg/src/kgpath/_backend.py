"""Kernel backend selection.

Hot inner loops (path enumeration, reservoir sampling, the fused Adam
update, rank counting) ship in two variants: numba ``@njit`` kernels and
pure-numpy fallbacks. Set ``KGPATH_BACKEND=numpy`` to force the fallback
path; anything else (or unset) uses numba when it is importable. Both
variants are exercised by the test suite and must produce bit-identical
outputs.
"""

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def use_numba():
    """True when numba kernels are selected for this process."""
    if not HAS_NUMBA:
        return False
    return os.environ.get("KGPATH_BACKEND", "numba").lower() != "numpy"


def active_backend():
    return "numba" if use_numba() else "numpy"
