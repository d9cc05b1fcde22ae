"""Hot pixel-accounting kernels.

Both the segment matcher and the confusion-matrix accumulator reduce to the
same primitive: counting co-occurrences of (a, b) index pairs over a raster.
The numba path is used by default; set OCCLKIT_DISABLE_NUMBA=1 to force the
pure-numpy fallback (same results, bit for bit).
"""

from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("OCCLKIT_DISABLE_NUMBA", "0") != "1"

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


def _pair_counts_np(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
    flat = a.astype(np.int64) * nb + b.astype(np.int64)
    counts = np.bincount(flat.ravel(), minlength=na * nb)
    return counts.reshape(na, nb)


if USE_NUMBA:

    @njit(cache=True)
    def _pair_counts_nb(a, b, na, nb):  # pragma: no cover - exercised via wrapper
        out = np.zeros((na, nb), dtype=np.int64)
        af = a.ravel()
        bf = b.ravel()
        for k in range(af.shape[0]):
            out[af[k], bf[k]] += 1
        return out


def pair_counts(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> np.ndarray:
    """Count co-occurrences of index pairs across two equally shaped rasters.

    Returns an (na, nb) int64 matrix M with M[i, j] = |{p : a[p]=i, b[p]=j}|.
    Entries of `a` must lie in [0, na) and of `b` in [0, nb).
    """
    if a.shape != b.shape:
        raise ValueError(f"raster shapes differ: {a.shape} vs {b.shape}")
    if USE_NUMBA:
        return _pair_counts_nb(
            np.ascontiguousarray(a, dtype=np.int64),
            np.ascontiguousarray(b, dtype=np.int64),
            na,
            nb,
        )
    return _pair_counts_np(a, b, na, nb)
