"""Cross-session frame matching in rest-of-brain space."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _accel
from .volume import Cohort, SubjectRecord


@dataclass(frozen=True)
class MatchMap:
    """``u[t]`` is the session-2 frame matched to session-1 frame ``t`` (0-based)."""

    subject_id: str
    u: np.ndarray
    distances: np.ndarray

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """``(t, u_t)`` with frames numbered from 1, as in the CSV dump."""
        return [(t + 1, int(u) + 1) for t, u in enumerate(self.u)]


def match_frames(subject: SubjectRecord) -> MatchMap:
    """Exhaustive nearest session-2 frame for every session-1 frame.

    Ties go to the earliest session-2 frame; matches may repeat.
    """
    if len(subject.rests) < 2:
        raise ValueError(f"subject {subject.subject_id}: needs two sessions, has {len(subject.rests)}")
    r1, r2 = subject.rests[0], subject.rests[1]
    if r1.shape != r2.shape:
        raise ValueError(f"subject {subject.subject_id}: session shapes differ {r1.shape} vs {r2.shape}")
    u, d2 = _accel.nearest(r1, r2)
    return MatchMap(subject.subject_id, u, np.sqrt(d2))


def match_all(cohort: Cohort) -> dict[str, MatchMap]:
    out = {}
    for s in cohort.subjects:
        try:
            out[s.subject_id] = match_frames(s)
        except ValueError as exc:
            raise ValueError(f"matching failed for subject {s.subject_id}: {exc}") from exc
    return out


def write_matches(path, matches: dict[str, MatchMap]) -> None:
    """CSV dump with 1-based frame numbers: ``subject_id,t,u_t,distance``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "t", "u_t", "distance"])
        for sid in sorted(matches):
            mm = matches[sid]
            for t, (u, d) in enumerate(zip(mm.u, mm.distances)):
                w.writerow([sid, t + 1, int(u) + 1, repr(float(d))])


def read_matches(path) -> dict[str, MatchMap]:
    rows: dict[str, list[tuple[int, int, float]]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["subject_id"], []).append((int(rec["t"]), int(rec["u_t"]), float(rec["distance"])))
    out = {}
    for sid, items in rows.items():
        items.sort()
        if [t for t, _, _ in items] != list(range(1, len(items) + 1)):
            raise ValueError(f"subject {sid}: frame numbers in match file are not 1..T")
        out[sid] = MatchMap(
            sid,
            np.array([u - 1 for _, u, _ in items], dtype=np.int64),
            np.array([d for _, _, d in items], dtype=np.float64),
        )
    return out
