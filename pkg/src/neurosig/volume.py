"""Volumetric frame sequences, ROI partitioning and the on-disk cohort format.

Voxels are flattened row-major with H outermost and D innermost, i.e.
``flat = (h * W + w) * D + d``.  Target and rest vectors list their voxels
in ascending flat index order.

Cohort directory layout::

    manifest.json        schema version, dims, T, M, trait schema, subjects
    mask.bin             NFSG header (T=1) + int8 labels {1, 0, -1}
    <subject>_m<i>.bin   NFSG header + T*H*W*D float32 LE values
    traits.csv           subject_id,<trait names...>
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TARGET, REST, EXCLUDED = 1, 0, -1

MAGIC = b"NFSG"
FORMAT_VERSION = 1
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, H, W, D, T -> 24 bytes


class CohortFormatError(ValueError):
    """Raised when cohort files are missing or violate the format."""


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple[int, int, int]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        if values.size != int(np.prod(self.dims)):
            raise ValueError(f"grid has {values.size} values, dims {self.dims} need {int(np.prod(self.dims))}")


@dataclass(frozen=True)
class ROIMask:
    """Per-voxel partition into TARGET (1), REST (0) and EXCLUDED (-1).

    ``alternate`` optionally lists flat indices of a control region inside
    REST that can take over the TARGET role (see :meth:`swap_alternate`).
    """

    dims: tuple[int, int, int]
    labels: np.ndarray
    alternate: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if labels.size != int(np.prod(self.dims)):
            raise ValueError("mask size does not match dims")
        if self.alternate is not None:
            alt = np.sort(np.asarray(self.alternate, dtype=np.int64).reshape(-1))
            object.__setattr__(self, "alternate", alt)

    @property
    def n_voxels(self) -> int:
        return int(self.labels.size)

    @property
    def target_index(self) -> np.ndarray:
        return np.flatnonzero(self.labels == TARGET)

    @property
    def rest_index(self) -> np.ndarray:
        return np.flatnonzero(self.labels == REST)

    @property
    def n_target(self) -> int:
        return int(np.count_nonzero(self.labels == TARGET))

    @property
    def n_rest(self) -> int:
        return int(np.count_nonzero(self.labels == REST))

    def swap_alternate(self) -> "ROIMask":
        """Mask with the alternate region as TARGET and the old TARGET as REST."""
        if self.alternate is None or self.alternate.size == 0:
            raise ValueError("mask has no alternate region")
        labels = self.labels.copy()
        old_target = labels == TARGET
        labels[old_target] = REST
        labels[self.alternate] = TARGET
        return ROIMask(self.dims, labels, alternate=np.flatnonzero(old_target))


def split_frame(grid: VoxelGrid, mask: ROIMask) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(target_vec, rest_vec)`` for one frame."""
    if tuple(grid.dims) != tuple(mask.dims):
        raise ValueError(f"dims mismatch: grid {tuple(grid.dims)} vs mask {tuple(mask.dims)}")
    return grid.values[mask.target_index], grid.values[mask.rest_index]


@dataclass
class SubjectRecord:
    """One subject: ``sessions[m]`` is a (T, H*W*D) array of flattened frames."""

    subject_id: str
    sessions: list[np.ndarray]
    traits: np.ndarray
    labels: dict[str, bool] = field(default_factory=dict)
    targets: list[np.ndarray] = field(default_factory=list, repr=False)
    rests: list[np.ndarray] = field(default_factory=list, repr=False)

    def attach_mask(self, mask: ROIMask) -> None:
        ti, ri = mask.target_index, mask.rest_index
        self.targets = [s[:, ti] for s in self.sessions]
        self.rests = [s[:, ri] for s in self.sessions]

    @property
    def n_frames(self) -> int:
        return int(self.sessions[0].shape[0])


@dataclass
class Cohort:
    subjects: list[SubjectRecord]
    mask: ROIMask
    trait_names: list[str]
    label_names: list[str] = field(default_factory=list)
    n_sessions: int = 2

    def __post_init__(self):
        for s in self.subjects:
            if not s.targets:
                s.attach_mask(self.mask)
        self._by_id = {s.subject_id: s for s in self.subjects}

    @property
    def ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mask.dims

    @property
    def n_frames(self) -> int:
        return self.subjects[0].n_frames

    @property
    def n_target(self) -> int:
        return self.mask.n_target

    @property
    def n_rest(self) -> int:
        return self.mask.n_rest

    def __len__(self) -> int:
        return len(self.subjects)

    def __getitem__(self, subject_id: str) -> SubjectRecord:
        return self._by_id[subject_id]

    def trait_matrix(self, ids=None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        return np.array([self[i].traits for i in ids], dtype=np.float64).reshape(len(ids), len(self.trait_names))

    def label_matrix(self, ids=None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        return np.array(
            [[float(self[i].labels[n]) for n in self.label_names] for i in ids], dtype=np.float64
        ).reshape(len(ids), len(self.label_names))

    def with_mask(self, mask: ROIMask) -> "Cohort":
        """Same frames and traits under a different ROI partition."""
        subjects = [
            SubjectRecord(s.subject_id, s.sessions, s.traits, dict(s.labels)) for s in self.subjects
        ]
        return Cohort(subjects, mask, list(self.trait_names), list(self.label_names), self.n_sessions)

    def with_traits(self, traits: np.ndarray) -> "Cohort":
        traits = np.asarray(traits, dtype=np.float64)
        subjects = [
            SubjectRecord(s.subject_id, s.sessions, traits[i].copy(), dict(s.labels), s.targets, s.rests)
            for i, s in enumerate(self.subjects)
        ]
        return Cohort(subjects, self.mask, list(self.trait_names), list(self.label_names), self.n_sessions)


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    subject_id: str | None = None
    session: int | None = None
    frame: int | None = None


def validate_cohort(cohort: Cohort, n_frames: int | None = None) -> list[Violation]:
    """Check cohort invariants; returns an empty list when all hold."""
    out: list[Violation] = []
    mask = cohort.mask
    if mask.n_target == 0:
        out.append(Violation("mask_no_target", "mask has no TARGET voxel"))
    if mask.n_rest == 0:
        out.append(Violation("mask_no_rest", "mask has no REST voxel"))
    bad = ~np.isin(mask.labels, (TARGET, REST, EXCLUDED))
    if bad.any():
        out.append(Violation("mask_label", f"{int(bad.sum())} voxels with unknown mask label"))
    if not cohort.subjects:
        out.append(Violation("empty_cohort", "cohort has no subjects"))
        return out
    T = n_frames if n_frames is not None else cohort.subjects[0].sessions[0].shape[0]
    n_vox = mask.n_voxels
    seen = set()
    for s in cohort.subjects:
        sid = s.subject_id
        if sid in seen:
            out.append(Violation("duplicate_subject", f"subject id {sid!r} repeated", sid))
        seen.add(sid)
        if len(s.sessions) != cohort.n_sessions:
            out.append(
                Violation("session_count", f"{len(s.sessions)} sessions, expected {cohort.n_sessions}", sid)
            )
        for m, frames in enumerate(s.sessions):
            frames = np.asarray(frames)
            if frames.ndim != 2 or frames.shape[1] != n_vox:
                out.append(Violation("dims_mismatch", f"frames shaped {frames.shape}, mask has {n_vox} voxels", sid, m))
                continue
            if frames.shape[0] != T:
                out.append(Violation("frame_count", f"{frames.shape[0]} frames, expected {T}", sid, m))
            finite = np.isfinite(frames).all(axis=1)
            for t in np.flatnonzero(~finite):
                out.append(Violation("non_finite", "non-finite voxel value", sid, m, int(t)))
        traits = np.asarray(s.traits)
        if traits.shape != (len(cohort.trait_names),):
            out.append(Violation("trait_count", f"{traits.size} traits, expected {len(cohort.trait_names)}", sid))
        elif not np.isfinite(traits).all():
            out.append(Violation("non_finite_trait", "non-finite trait value", sid))
        missing = set(cohort.label_names) - set(s.labels)
        if missing:
            out.append(Violation("label_missing", f"missing labels {sorted(missing)}", sid))
    return out


# -- binary volume files ------------------------------------------------------


def write_volume(path, values: np.ndarray, dims, n_frames: int, dtype="<f4") -> None:
    H, W, D = (int(d) for d in dims)
    arr = np.ascontiguousarray(np.asarray(values).reshape(n_frames, H * W * D), dtype=dtype)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, H, W, D, int(n_frames)))
        fh.write(arr.tobytes())


def read_volume(path, dtype="<f4") -> tuple[tuple[int, int, int], np.ndarray]:
    """Read an NFSG file; returns ``(dims, values)`` with values shaped (T, H*W*D)."""
    path = Path(path)
    if not path.is_file():
        raise CohortFormatError(f"missing file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CohortFormatError(f"{path.name}: truncated header")
    magic, version, H, W, D, T = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CohortFormatError(f"{path.name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CohortFormatError(f"{path.name}: unsupported format version {version}")
    itemsize = np.dtype(dtype).itemsize
    expected = _HEADER.size + T * H * W * D * itemsize
    if len(raw) != expected:
        raise CohortFormatError(f"{path.name}: frame size mismatch ({len(raw)} bytes, expected {expected})")
    values = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(T, H * W * D)
    return (H, W, D), values


def write_mask(path, mask: ROIMask) -> None:
    write_volume(path, mask.labels, mask.dims, 1, dtype="i1")


def read_mask(path) -> ROIMask:
    dims, labels = read_volume(path, dtype="i1")
    if labels.shape[0] != 1:
        raise CohortFormatError(f"{Path(path).name}: mask must have T=1")
    return ROIMask(dims, labels[0].astype(np.int8))


# -- cohort directory ---------------------------------------------------------


def _session_filename(subject_id: str, m: int) -> str:
    return f"{subject_id}_m{m + 1}.bin"


def save_cohort(cohort: Cohort, directory, extra: dict | None = None) -> None:
    """Write the cohort directory format (manifest, mask, frames, traits)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    T = cohort.n_frames
    write_mask(directory / "mask.bin", cohort.mask)
    subjects = []
    for s in cohort.subjects:
        files = []
        for m, frames in enumerate(s.sessions):
            name = _session_filename(s.subject_id, m)
            write_volume(directory / name, frames, cohort.dims, T)
            files.append(name)
        subjects.append({"id": s.subject_id, "sessions": files})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "dims": list(cohort.dims),
        "T": T,
        "M": cohort.n_sessions,
        "traits": [{"name": n, "type": "real"} for n in cohort.trait_names]
        + [{"name": n, "type": "binary"} for n in cohort.label_names],
        "mask": "mask.bin",
        "traits_file": "traits.csv",
        "subjects": subjects,
    }
    if cohort.mask.alternate is not None:
        manifest["alternate_roi"] = [int(i) for i in cohort.mask.alternate]
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(directory / "traits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", *cohort.trait_names, *cohort.label_names])
        for s in cohort.subjects:
            w.writerow(
                [s.subject_id, *(repr(float(v)) for v in s.traits), *(int(s.labels[n]) for n in cohort.label_names)]
            )


def load_cohort(path) -> Cohort:
    """Load and validate a cohort from a directory or its ``manifest.json``."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.is_file():
        raise CohortFormatError(f"missing file: {manifest_path}")
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CohortFormatError(f"unsupported schema version {manifest.get('schema_version')!r}")
    dims = tuple(int(d) for d in manifest["dims"])
    T, M = int(manifest["T"]), int(manifest["M"])

    mask = read_mask(root / manifest.get("mask", "mask.bin"))
    if mask.dims != dims:
        raise CohortFormatError(f"mask dims {mask.dims} do not match manifest dims {dims}")
    if "alternate_roi" in manifest:
        mask = ROIMask(mask.dims, mask.labels, alternate=manifest["alternate_roi"])

    schema = manifest["traits"]
    trait_names = [t["name"] for t in schema if t.get("type", "real") == "real"]
    label_names = [t["name"] for t in schema if t.get("type") == "binary"]
    table = _read_traits(root / manifest.get("traits_file", "traits.csv"), trait_names, label_names)

    subjects = []
    for entry in manifest["subjects"]:
        sid = entry["id"]
        if len(entry["sessions"]) != M:
            raise CohortFormatError(f"subject {sid}: {len(entry['sessions'])} session files, expected {M}")
        sessions = []
        for m, name in enumerate(entry["sessions"]):
            try:
                fdims, values = read_volume(root / name)
            except CohortFormatError as exc:
                raise CohortFormatError(f"subject {sid} session {m + 1}: {exc}") from None
            if fdims != dims:
                raise CohortFormatError(f"subject {sid} session {m + 1}: dims {fdims} do not match {dims}")
            if values.shape[0] != T:
                raise CohortFormatError(f"subject {sid} session {m + 1}: {values.shape[0]} frames, expected {T}")
            finite = np.isfinite(values).all(axis=1)
            if not finite.all():
                t = int(np.flatnonzero(~finite)[0])
                raise CohortFormatError(f"subject {sid} session {m + 1} frame {t}: non-finite values")
            sessions.append(values.astype(np.float64))
        if sid not in table:
            raise CohortFormatError(f"subject {sid}: no row in traits file")
        traits, labels = table[sid]
        subjects.append(SubjectRecord(sid, sessions, traits, labels))

    cohort = Cohort(subjects, mask, trait_names, label_names, n_sessions=M)
    problems = validate_cohort(cohort, n_frames=T)
    if problems:
        p = problems[0]
        raise CohortFormatError(f"{p.code}: {p.message} (subject {p.subject_id}, session {p.session}, frame {p.frame})")
    return cohort


def _read_traits(path: Path, trait_names, label_names):
    if not path.is_file():
        raise CohortFormatError(f"missing file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "subject_id":
        raise CohortFormatError(f"{path.name}: header must start with subject_id")
    header = rows[0][1:]
    known = set(trait_names) | set(label_names)
    unknown = [c for c in header if c not in known]
    if unknown:
        raise CohortFormatError(f"{path.name}: unknown trait column(s) {unknown}")
    missing = [c for c in known if c not in header]
    if missing:
        raise CohortFormatError(f"{path.name}: missing trait column(s) {sorted(missing)}")
    col = {c: i + 1 for i, c in enumerate(header)}
    table = {}
    for row in rows[1:]:
        if not row:
            continue
        sid = row[0]
        try:
            traits = np.array([float(row[col[n]]) for n in trait_names], dtype=np.float64)
            labels = {n: bool(int(float(row[col[n]]))) for n in label_names}
        except (ValueError, IndexError) as exc:
            raise CohortFormatError(f"{path.name}: bad row for subject {sid}: {exc}") from None
        table[sid] = (traits, labels)
    return table
