"""Cohort domain types, manifest ingestion and patient-grouped splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError, ManifestError, PgmError
from .pgm import read_pgm, read_pgm_header

PARAMETERS = ("sct", "tt", "ste", "te", "tu", "tise")
PARAMETER_LABELS = {"sct": "SCT", "tt": "TT", "ste": "STE", "te": "TE", "tu": "TU", "tise": "TisE"}

LABEL_MIN, LABEL_MAX = 1.0, 7.0

DEEP_RAW_DIM = 4096
DEEP_REDUCED_DIM = 200

MANIFEST_COLUMNS = (
    "patient_id", "timepoint", "slice_id", "image_path", "mask_path", "deep_path",
) + PARAMETERS


class Timepoint(str, Enum):
    PRE = "pre"
    W1 = "w1"
    W3 = "w3"
    W6 = "w6"
    W9 = "w9"
    W12 = "w12"
    W20 = "w20"
    W26 = "w26"
    W39 = "w39"
    W52 = "w52"

    @property
    def weeks(self):
        return 0 if self is Timepoint.PRE else int(self.value[1:])


TIMEPOINTS = tuple(Timepoint)


def _frozen_array(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MriSlice:
    """One axial image with its binary tendon mask."""

    slice_id: str
    intensities: np.ndarray
    roi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "intensities", _frozen_array(self.intensities, np.uint16))
        object.__setattr__(self, "roi", _frozen_array(self.roi, bool))
        if self.intensities.ndim != 2:
            raise DataError(f"slice {self.slice_id}: image must be 2-D")
        if self.roi.shape != self.intensities.shape:
            raise DataError(
                f"slice {self.slice_id}: mask {self.roi.shape} does not match image "
                f"{self.intensities.shape}")

    @property
    def height(self):
        return self.intensities.shape[0]

    @property
    def width(self):
        return self.intensities.shape[1]

    @property
    def roi_size(self):
        return int(self.roi.sum())

    def __eq__(self, other):
        if not isinstance(other, MriSlice):
            return NotImplemented
        return (self.slice_id == other.slice_id
                and np.array_equal(self.intensities, other.intensities)
                and np.array_equal(self.roi, other.roi))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DeepFeatureBlock:
    slice_id: str
    activations: np.ndarray
    kind: str  # "fc6" (4096 raw activations) or "pca" (200 reduced)

    def __post_init__(self):
        object.__setattr__(self, "activations", _frozen_array(self.activations, np.float64))
        expected = {"fc6": DEEP_RAW_DIM, "pca": DEEP_REDUCED_DIM}.get(self.kind)
        if expected is None:
            raise DataError(f"unknown deep block kind {self.kind!r}")
        if self.activations.shape != (expected,):
            raise DataError(
                f"deep block {self.slice_id}: kind {self.kind} needs {expected} values, "
                f"got {self.activations.size}")
        if not np.all(np.isfinite(self.activations)):
            raise DataError(f"deep block {self.slice_id}: non-finite activation")


@dataclass(frozen=True)
class LabelSet:
    sct: float
    tt: float
    ste: float
    te: float
    tu: float
    tise: float

    def __post_init__(self):
        for name in PARAMETERS:
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or math.isnan(v):
                raise DataError(f"label {name} is not a number")
            if not LABEL_MIN <= v <= LABEL_MAX:
                raise DataError(f"label out of range [1,7]: {name}={v}")

    def __getitem__(self, name):
        if name not in PARAMETERS:
            raise KeyError(name)
        return getattr(self, name)

    def as_tuple(self):
        return tuple(getattr(self, p) for p in PARAMETERS)


@dataclass(frozen=True)
class StudyRecord:
    patient_id: str
    timepoint: Timepoint
    slices: tuple
    labels: LabelSet | None

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple(self.slices))
        if not self.slices:
            raise DataError(f"study {self.study_id} has no slices")

    @property
    def study_id(self):
        return f"{self.patient_id}/{self.timepoint.value}"


@dataclass(frozen=True)
class SliceSource:
    image_path: Path
    mask_path: Path
    deep_path: Path


@dataclass(frozen=True)
class CohortManifest:
    """Patients -> timepoints -> slices, with per-slice file locations."""

    studies: tuple
    sources: Mapping[str, SliceSource] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "studies", tuple(self.studies))
        seen_tp = set()
        seen_slices = set()
        for st in self.studies:
            key = (st.patient_id, st.timepoint)
            if key in seen_tp:
                raise DataError(f"duplicate timepoint {st.timepoint.value} for patient {st.patient_id}")
            seen_tp.add(key)
            for sid in st.slices:
                if sid in seen_slices:
                    raise DataError(f"duplicate slice_id {sid}")
                if sid not in self.sources:
                    raise DataError(f"slice {sid} has no file sources")
                seen_slices.add(sid)

    @property
    def patients(self):
        return sorted({st.patient_id for st in self.studies})

    @property
    def slice_ids(self):
        return [sid for st in self.studies for sid in st.slices]

    @property
    def n_slices(self):
        return sum(len(st.slices) for st in self.studies)

    @property
    def labelled(self):
        return all(st.labels is not None for st in self.studies)

    def subset(self, patient_ids):
        keep = set(patient_ids)
        studies = tuple(st for st in self.studies if st.patient_id in keep)
        sources = {sid: self.sources[sid] for st in studies for sid in st.slices}
        return CohortManifest(studies, sources)

    def load_slice(self, slice_id):
        src = self.sources[slice_id]
        image = read_pgm(src.image_path)
        mask = read_pgm(src.mask_path)
        if not np.isin(mask, (0, 255)).all():
            raise PgmError(f"{src.mask_path}: mask values must be 0 or 255")
        return MriSlice(slice_id, image, mask == 255)

    def load_deep(self, slice_id):
        return read_deep_block(self.sources[slice_id].deep_path, slice_id)


def read_deep_block(path, slice_id=""):
    text = Path(path).read_text().strip()
    if "\n" in text:
        raise DataError(f"{path}: deep block must be a single row")
    try:
        values = np.array([float(tok) for tok in text.split(",")])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    kind = "fc6" if values.size == DEEP_RAW_DIM else "pca"
    return DeepFeatureBlock(slice_id, values, kind)


def write_deep_block(path, activations, fmt="{:.6g}"):
    Path(path).write_text(",".join(map(fmt.format, np.asarray(activations, float))) + "\n")


def _parse_label(raw, name, row, required):
    raw = raw.strip()
    if raw == "":
        if required:
            raise ManifestError(f"missing label {name}", row)
        return None
    try:
        v = float(raw)
    except ValueError:
        raise ManifestError(f"label {name} is not a number: {raw!r}", row) from None
    if not LABEL_MIN <= v <= LABEL_MAX:
        raise ManifestError("label out of range [1,7]", row)
    return v


def load_manifest(path, require_labels=True, check_contents=True, read_labels=True):
    """Read and validate a cohort manifest CSV.

    Paths inside the manifest are resolved relative to the manifest's
    directory. With ``check_contents`` each mask is read to reject empty
    ROIs, and image/mask headers are compared for size. With
    ``read_labels=False`` the label columns are skipped entirely, so every
    study comes back unlabelled whatever those columns hold.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    groups = {}
    order = []
    sources = {}
    with open(path, newline="") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.reader(lines)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError("empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(f"bad header, expected {','.join(MANIFEST_COLUMNS)}", 1)
        for rowno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"expected {len(MANIFEST_COLUMNS)} fields, got {len(rec)}", rowno)
            row = dict(zip(MANIFEST_COLUMNS, (v.strip() for v in rec)))
            pid, sid = row["patient_id"], row["slice_id"]
            if not pid or not sid:
                raise ManifestError("empty patient_id or slice_id", rowno)
            try:
                tp = Timepoint(row["timepoint"])
            except ValueError:
                raise ManifestError(f"unknown timepoint {row['timepoint']!r}", rowno) from None
            if sid in sources:
                raise ManifestError(f"duplicate slice_id {sid}", rowno)
            if read_labels:
                labels = tuple(_parse_label(row[p], p, rowno, require_labels) for p in PARAMETERS)
            else:
                labels = (None,) * len(PARAMETERS)
            if any(v is None for v in labels) and not all(v is None for v in labels):
                raise ManifestError("labels must be all present or all empty", rowno)
            src = SliceSource(*(
                (base / row[c]).resolve() for c in ("image_path", "mask_path", "deep_path")))
            for p in (src.image_path, src.mask_path, src.deep_path):
                if not p.is_file():
                    raise ManifestError(f"missing file {p}", rowno)
            if check_contents:
                _check_slice_files(src, rowno)
            sources[sid] = src
            key = (pid, tp)
            if key not in groups:
                groups[key] = {"labels": labels, "slices": [], "row": rowno}
                order.append(key)
            elif groups[key]["labels"] != labels:
                raise ManifestError(
                    f"labels differ within study {pid}/{tp.value} (first seen at row {groups[key]['row']})",
                    rowno)
            groups[key]["slices"].append(sid)

    studies = []
    for pid, tp in order:
        g = groups[(pid, tp)]
        labels = None if g["labels"][0] is None else LabelSet(*g["labels"])
        studies.append(StudyRecord(pid, tp, tuple(g["slices"]), labels))
    return CohortManifest(tuple(studies), sources)


def _check_slice_files(src, rowno):
    try:
        w, h, maxval = read_pgm_header(src.image_path)
        mask = read_pgm(src.mask_path)
    except PgmError as exc:
        raise ManifestError(str(exc), rowno) from None
    if mask.shape != (h, w):
        raise ManifestError(
            f"dimension mismatch: image {w}x{h}, mask {mask.shape[1]}x{mask.shape[0]}", rowno)
    if not np.isin(mask, (0, 255)).all():
        raise ManifestError("mask values must be 0 or 255", rowno)
    if not mask.any():
        raise ManifestError("empty ROI", rowno)


def _relpath(p, base):
    try:
        return Path(p).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(Path(p).resolve())


def write_manifest(manifest, path, header_comment=None):
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for st in manifest.studies:
            labels = ([""] * len(PARAMETERS) if st.labels is None
                      else [repr(float(v)) for v in st.labels.as_tuple()])
            for sid in st.slices:
                src = manifest.sources[sid]
                w.writerow([st.patient_id, st.timepoint.value, sid,
                            _relpath(src.image_path, base), _relpath(src.mask_path, base),
                            _relpath(src.deep_path, base), *labels])


def split_test_holdout(manifest, patient_ids):
    """Partition by patient into (train, test)."""
    patient_ids = set(patient_ids)
    unknown = patient_ids - set(manifest.patients)
    if unknown:
        raise DataError(f"unknown patient id(s): {', '.join(sorted(unknown))}")
    train = [p for p in manifest.patients if p not in patient_ids]
    return manifest.subset(train), manifest.subset(patient_ids)


def make_folds(manifest_or_patients, k, seed):
    """Split patients into k disjoint groups whose sizes differ by at most one.

    Patients are shuffled with a seeded generator and dealt round-robin.
    """
    if isinstance(manifest_or_patients, CohortManifest):
        patients = manifest_or_patients.patients
    else:
        patients = sorted(set(manifest_or_patients))
    if k < 1:
        raise DataError("k must be positive")
    if k > len(patients):
        raise DataError(f"k={k} exceeds patient count {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    folds = [set() for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].add(patients[idx])
    return [frozenset(f) for f in folds]


def choose_holdout(manifest, count, seed):
    """Pick ``count`` patients at random (seeded) for the test split."""
    patients = manifest.patients
    if count > len(patients):
        raise DataError(f"cannot hold out {count} of {len(patients)} patients")
    idx = np.random.default_rng(seed).choice(len(patients), size=count, replace=False)
    return sorted(patients[i] for i in idx)


def iter_study_slices(manifest: CohortManifest) -> Iterable[tuple]:
    for st in manifest.studies:
        for sid in st.slices:
            yield st, sid
