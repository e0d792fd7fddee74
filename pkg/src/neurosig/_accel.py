"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``NEUROSIG_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
always importable as ``*_numba`` / ``*_numpy`` so they can be compared
directly; the undecorated names dispatch to the selected one.

All kernels accumulate in ascending index order and break distance ties
toward the smallest index, so results do not depend on thread count.
"""

import os

import numpy as np

_DISABLED = os.environ.get("NEUROSIG_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


# -- numpy path ---------------------------------------------------------------


def nearest_numpy(points, centers):
    """Index of and squared distance to the nearest center for every point."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    n = points.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    # chunk over points so the (chunk, k, d) difference tensor stays small
    step = max(1, 2_000_000 // max(1, centers.shape[0] * points.shape[1]))
    for lo in range(0, n, step):
        diff = points[lo:lo + step, None, :] - centers[None, :, :]
        d2 = np.einsum("ikd,ikd->ik", diff, diff)
        idx = np.argmin(d2, axis=1)  # first occurrence on ties
        labels[lo:lo + step] = idx
        best[lo:lo + step] = d2[np.arange(idx.shape[0]), idx]
    return labels, best


def cluster_sums_numpy(points, labels, k):
    """Per-cluster coordinate sums and member counts."""
    points = np.asarray(points, dtype=np.float64)
    sums = np.zeros((k, points.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, points)  # unbuffered, applied in index order
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return sums, counts


def inertia_numpy(points, centers, labels):
    diff = np.asarray(points, dtype=np.float64) - np.asarray(centers)[labels]
    return float(np.einsum("ij,ij->", diff, diff))


# -- numba path ---------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nearest_kernel(points, centers, labels, best):
        n, d = points.shape
        k = centers.shape[0]
        for i in range(n):
            bi = 0
            bd = np.inf
            for j in range(k):
                s = 0.0
                for c in range(d):
                    t = points[i, c] - centers[j, c]
                    s += t * t
                if s < bd:
                    bd = s
                    bi = j
            labels[i] = bi
            best[i] = bd

    @njit(cache=True)
    def _cluster_sums_kernel(points, labels, sums, counts):
        n, d = points.shape
        for i in range(n):
            j = labels[i]
            counts[j] += 1
            for c in range(d):
                sums[j, c] += points[i, c]

    @njit(cache=True)
    def _inertia_kernel(points, centers, labels):
        n, d = points.shape
        total = 0.0
        for i in range(n):
            j = labels[i]
            for c in range(d):
                t = points[i, c] - centers[j, c]
                total += t * t
        return total

    def nearest_numba(points, centers):
        points = np.ascontiguousarray(points, dtype=np.float64)
        centers = np.ascontiguousarray(centers, dtype=np.float64)
        labels = np.empty(points.shape[0], dtype=np.int64)
        best = np.empty(points.shape[0], dtype=np.float64)
        _nearest_kernel(points, centers, labels, best)
        return labels, best

    def cluster_sums_numba(points, labels, k):
        points = np.ascontiguousarray(points, dtype=np.float64)
        sums = np.zeros((k, points.shape[1]), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        _cluster_sums_kernel(points, np.ascontiguousarray(labels, dtype=np.int64), sums, counts)
        return sums, counts

    def inertia_numba(points, centers, labels):
        return float(
            _inertia_kernel(
                np.ascontiguousarray(points, dtype=np.float64),
                np.ascontiguousarray(centers, dtype=np.float64),
                np.ascontiguousarray(labels, dtype=np.int64),
            )
        )

else:  # pragma: no cover
    nearest_numba = nearest_numpy
    cluster_sums_numba = cluster_sums_numpy
    inertia_numba = inertia_numpy


if USE_NUMBA:
    nearest = nearest_numba
    cluster_sums = cluster_sums_numba
    inertia = inertia_numba
else:
    nearest = nearest_numpy
    cluster_sums = cluster_sums_numpy
    inertia = inertia_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
