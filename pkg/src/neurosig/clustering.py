"""Prototype brain states: k-means over rest-of-brain vectors."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel

log = logging.getLogger(__name__)

_MAGIC = b"NFKC"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class CentroidSet:
    centroids: np.ndarray
    seed: int = 0
    inertia: float = float("nan")
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


@dataclass(frozen=True)
class OccupancyProfile:
    ratios: np.ndarray
    dispersion: float


def _kmeanspp(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    _, d2 = _accel.nearest(points, centers[:1])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", points - centers[j], points - centers[j]))
    return centers


def _lloyd(points, centers, max_iters, tol):
    history = []
    labels, d2 = _accel.nearest(points, centers)
    for _ in range(max_iters):
        history.append(float(d2.sum()))
        sums, counts = _accel.cluster_sums(points, labels, centers.shape[0])
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        if not filled.all():
            # re-seed each empty cluster at the point farthest from its centroid
            d2 = d2.copy()
            for j in np.flatnonzero(~filled):
                far = int(np.argmax(d2))
                new[j] = points[far]
                d2[far] = 0.0
        shift = float(np.sqrt(np.max(np.einsum("ij,ij->i", new - centers, new - centers))))
        centers = new
        new_labels, d2 = _accel.nearest(points, centers)
        changed = not np.array_equal(new_labels, labels)
        labels = new_labels
        if shift < tol or not changed:
            break
    history.append(float(d2.sum()))
    return centers, labels, history


def fit_kmeans(
    points,
    k: int,
    seed: int = 0,
    max_iters: int = 300,
    tol: float = 1e-6,
    n_restarts: int = 5,
) -> CentroidSet:
    """Lloyd's algorithm from k-means++ seeds; keeps the lowest-inertia restart.

    ``history`` holds the inertia after every assignment step of the kept
    restart and is non-increasing.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("fit_kmeans needs a non-empty 2-D array of points")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_distinct = np.unique(points, axis=0).shape[0]
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the number of distinct points ({n_distinct})")

    best = None
    for child in np.random.SeedSequence(seed).spawn(max(1, n_restarts)):
        rng = np.random.default_rng(child)
        centers, labels, history = _lloyd(points, _kmeanspp(points, k, rng), max_iters, tol)
        if best is None or history[-1] < best.inertia:
            best = CentroidSet(centers, seed=seed, inertia=history[-1], history=history)
    return best


def assign(vectors, C: CentroidSet) -> np.ndarray | int:
    """Nearest-centroid index (smallest index on ties) for one vector or a stack."""
    v = np.asarray(vectors, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    if v.shape[1] != C.dim:
        raise ValueError(f"vector length {v.shape[1]} does not match centroid length {C.dim}")
    labels, _ = _accel.nearest(v, C.centroids)
    return int(labels[0]) if single else labels


def occupancy(assignments, k: int) -> OccupancyProfile:
    """Cohort-wide fraction of frames in each cluster and its coefficient of variation.

    ``assignments`` is any nesting of per-subject per-frame cluster ids.
    """
    ids = np.concatenate([np.asarray(a, dtype=np.int64).reshape(-1) for a in assignments]) if len(assignments) else np.zeros(0, np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= k):
        raise ValueError(f"cluster id out of range [0, {k})")
    ratios = np.bincount(ids, minlength=k) / max(ids.size, 1)
    mean = ratios.mean()
    dispersion = float(ratios.std() / mean) if mean > 0 else float("inf")
    return OccupancyProfile(ratios, dispersion)


def scan_k(points, k_range, seed: int = 0, n_restarts: int = 5) -> dict[int, tuple[CentroidSet, OccupancyProfile]]:
    """Fit k-means for every k in the inclusive range; skips infeasible k."""
    k_min, k_max = k_range
    out = {}
    for k in range(k_min, k_max + 1):
        try:
            C = fit_kmeans(points, k, seed=seed, n_restarts=n_restarts)
        except ValueError:
            continue
        out[k] = (C, occupancy([assign(points, C)], k))
    return out


def select_k(points, k_range=(2, 10), dispersion_max: float = 0.5, seed: int = 0, n_restarts: int = 5) -> int:
    """Largest k whose occupancy dispersion stays within ``dispersion_max``."""
    k_min, k_max = k_range
    if k_min < 2:
        raise ValueError("k_min must be >= 2")
    if k_max < k_min:
        raise ValueError("empty k range")
    scanned = scan_k(points, k_range, seed=seed, n_restarts=n_restarts)
    ok = [k for k, (_, prof) in scanned.items() if prof.dispersion <= dispersion_max]
    if not ok:
        warnings.warn(f"no k in [{k_min}, {k_max}] has dispersion <= {dispersion_max}; using {k_min}", stacklevel=2)
        return k_min
    return max(ok)


def save_centroids(path, C: CentroidSet) -> None:
    data = np.ascontiguousarray(C.centroids, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, C.k, C.dim))
        fh.write(data.tobytes())


def load_centroids(path) -> CentroidSet:
    raw = Path(path).read_bytes()
    magic, version, k, n = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a centroid file")
    if len(raw) != _HEADER.size + 4 * k * n:
        raise ValueError(f"{path}: size mismatch")
    cents = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(k, n).astype(np.float64)
    return CentroidSet(cents)
