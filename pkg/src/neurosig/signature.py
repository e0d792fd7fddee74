"""Per-subject signature matrices: cluster visit counts and mean errors."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .clustering import CentroidSet, assign
from .matching import MatchMap
from .predictor import NO_FEEDBACK, PredictorModel, forward
from .volume import SubjectRecord

FULL = "full"
RAW_DIFF = "raw_diff"
COUNT_ONLY = "count_only"
ERROR_ONLY = "error_only"
VARIANTS = (FULL, RAW_DIFF, COUNT_ONLY, ERROR_ONLY)


@dataclass
class SignatureMatrix:
    """Row ``i`` is ``(counts[i], errors[i])``; an empty cluster has error 0."""

    subject_id: str
    counts: np.ndarray
    errors: np.ndarray
    variant: str = FULL

    @property
    def k(self) -> int:
        return int(self.counts.size)

    @property
    def rows(self) -> list[tuple[int, float]]:
        return [(int(c), float(e)) for c, e in zip(self.counts, self.errors)]


def aggregate(subject_id: str, labels, frame_errors, k: int, variant: str = FULL) -> SignatureMatrix:
    """Collapse per-frame cluster labels and errors into a signature matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    frame_errors = np.asarray(frame_errors, dtype=np.float64)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    sums = np.bincount(labels, weights=frame_errors, minlength=k)
    errors = np.divide(sums, counts, out=np.zeros(k), where=counts > 0)
    return SignatureMatrix(subject_id, counts, errors, variant)


def cluster_vectors(subject: SubjectRecord, space: str = "rest") -> np.ndarray:
    """Session-1 vectors used for cluster assignment (rest-of-brain or full frame)."""
    return subject.rests[0] if space == "rest" else subject.sessions[0]


def frame_errors(subject: SubjectRecord, model: PredictorModel, matchmap: MatchMap | None, norm: str = "sum") -> np.ndarray:
    """Per session-1 frame error of ``model``.

    PAIRED models are scored on ``A2[u_t]``; NO_FEEDBACK models on each
    frame's own ``A1[t]`` from ``R1[t]``.  ``norm`` is ``"sum"`` (squared
    norm over target voxels) or ``"mean"`` (per-voxel mean).
    """
    if model.config.input_mode == NO_FEEDBACK:
        pred = forward(model, subject.rests[0])
        target = subject.targets[0]
    else:
        if matchmap is None:
            raise ValueError(f"subject {subject.subject_id}: paired model needs a match map")
        u = np.asarray(matchmap.u)
        pred = forward(model, np.hstack([subject.rests[0], subject.targets[0], subject.rests[1][u]]))
        target = subject.targets[1][u]
    sq = (pred - target) ** 2
    return sq.sum(axis=1) if norm == "sum" else sq.mean(axis=1)


def _labels(subject, C, space):
    vecs = cluster_vectors(subject, space)
    if vecs.shape[1] != C.dim:
        raise ValueError(f"subject {subject.subject_id}: frame length {vecs.shape[1]} != centroid length {C.dim}")
    return assign(vecs, C)


def build_signature(
    subject: SubjectRecord,
    C: CentroidSet,
    model: PredictorModel,
    matchmap: MatchMap | None,
    norm: str = "sum",
    space: str = "rest",
) -> SignatureMatrix:
    return aggregate(subject.subject_id, _labels(subject, C, space), frame_errors(subject, model, matchmap, norm), C.k)


def build_raw_diff_signature(subject: SubjectRecord, C: CentroidSet, matchmap: MatchMap, space: str = "rest") -> SignatureMatrix:
    """Errors replaced by ``||A1[t] - A2[u_t]||^2`` averaged per cluster."""
    u = np.asarray(matchmap.u)
    diff = subject.targets[0] - subject.targets[1][u]
    return aggregate(subject.subject_id, _labels(subject, C, space), np.sum(diff * diff, axis=1), C.k, RAW_DIFF)


def flatten(sig: SignatureMatrix, variant: str | None = None) -> np.ndarray:
    """Signature vector: counts at even and errors at odd indices for FULL/RAW_DIFF."""
    variant = sig.variant if variant is None else variant
    if variant in (FULL, RAW_DIFF):
        out = np.empty(2 * sig.k)
        out[0::2] = sig.counts
        out[1::2] = sig.errors
        return out
    if variant == COUNT_ONLY:
        return sig.counts.astype(np.float64)
    if variant == ERROR_ONLY:
        return sig.errors.astype(np.float64)
    raise ValueError(f"unknown signature variant {variant!r}")


def unflatten(vec, variant: str, subject_id: str = "") -> SignatureMatrix:
    vec = np.asarray(vec, dtype=np.float64)
    if variant in (FULL, RAW_DIFF):
        counts, errors = vec[0::2], vec[1::2]
    elif variant == COUNT_ONLY:
        counts, errors = vec, np.zeros_like(vec)
    elif variant == ERROR_ONLY:
        counts, errors = np.zeros_like(vec), vec
    else:
        raise ValueError(f"unknown signature variant {variant!r}")
    return SignatureMatrix(subject_id, np.rint(counts).astype(np.int64), errors.copy(), variant)


def write_signatures(path, sigs: list[SignatureMatrix]) -> None:
    k = sigs[0].k if sigs else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "variant", *[f"{p}_{i}" for i in range(k) for p in ("count", "err")]])
        for s in sigs:
            w.writerow([s.subject_id, s.variant, *[v for c, e in s.rows for v in (c, repr(e))]])


def read_signatures(path) -> list[SignatureMatrix]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k = (len(header) - 2) // 2
        for row in reader:
            vals = row[2:]
            counts = np.array([int(vals[2 * i]) for i in range(k)], dtype=np.int64)
            errors = np.array([float(vals[2 * i + 1]) for i in range(k)])
            out.append(SignatureMatrix(row[0], counts, errors, row[1]))
    return out
