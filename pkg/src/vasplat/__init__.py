"""Differentiable Gaussian splatting with multi-view alignment losses for surface reconstruction."""
import os

# the bundled TBB is too old for numba; OpenMP gives the same ordered results
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"


def set_threads(n: int | None):
    """Set the numba worker count (``None`` keeps the default)."""
    if n is None:
        return
    import numba
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
