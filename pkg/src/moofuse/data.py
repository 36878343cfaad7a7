"""Synthetic multimodal subjects, CSV ingestion, oversampling and subject-wise folds.

A dataset is a list of subjects. Each subject carries one label and, per
available modality, a stack of pre-windowed segments (one fixed-width row per
segment). Modalities may be missing per subject, and different modalities may
carry different numbers of segments.

CSV layout
----------
One file per modality, header ``subject_id,segment_id,label,f0,...,f{D-1}``,
plus a manifest ``subject_id,label,modalities_present`` where the last column
lists modality names separated by ``;``. Floats are written with round-trip
precision, so export followed by :func:`load_csv` is exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, IngestionError, SplitError
from .numerics import Rng

MANIFEST_NAME = "manifest.csv"


@dataclass
class SubjectRecord:
    subject_id: str
    label: int
    segments: Dict[str, np.ndarray]

    @property
    def available(self) -> List[str]:
        return [name for name, seg in self.segments.items() if seg.shape[0] > 0]


@dataclass
class Dataset:
    modality_names: List[str]
    modality_dims: List[int]
    num_classes: int
    subjects: List[SubjectRecord]

    def __post_init__(self):
        for s in self.subjects:
            for name, seg in s.segments.items():
                r = self.modality_names.index(name)
                if seg.ndim != 2 or seg.shape[1] != self.modality_dims[r]:
                    raise DataError(f"subject {s.subject_id}: {name} segments must have width {self.modality_dims[r]}")
            if not 0 <= s.label < self.num_classes:
                raise DataError(f"subject {s.subject_id}: label {s.label} outside [0, {self.num_classes})")

    @property
    def num_modalities(self) -> int:
        return len(self.modality_names)

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def mask(self, subject: SubjectRecord) -> List[bool]:
        return [name in subject.available for name in self.modality_names]

    def is_complete(self, subject: SubjectRecord) -> bool:
        return all(self.mask(subject))

    def class_counts(self) -> np.ndarray:
        return np.bincount([s.label for s in self.subjects], minlength=self.num_classes)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    num_classes: int = 3
    modality_dims: List[int] = field(default_factory=lambda: [16, 12])
    subjects_per_class: List[int] = field(default_factory=lambda: [8, 6, 4])
    segments_per_subject: object = 10  # int, or one count per modality
    latent_dim: int = 8
    shared_signal: float = 1.0
    dominance: Optional[List[float]] = None  # per-modality class-signal scale
    conflict: float = 0.0
    label_noise: float = 0.0
    noise: float = 1.0
    subject_scale: float = 0.5
    missing_rate: Optional[List[float]] = None
    modality_names: Optional[List[str]] = None
    seed: int = 0

    def __post_init__(self):
        m = len(self.modality_dims)
        if self.dominance is None:
            self.dominance = [1.0] * m
        if self.missing_rate is None:
            self.missing_rate = [0.0] * m
        if self.modality_names is None:
            self.modality_names = [f"mod{r}" for r in range(m)]
        problems = []
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if m < 1 or any(int(d) < 1 for d in self.modality_dims):
            problems.append("modality_dims must list positive widths")
        if len(self.subjects_per_class) != self.num_classes:
            problems.append("subjects_per_class needs one entry per class")
        elif any(int(n) < 1 for n in self.subjects_per_class):
            problems.append("subjects_per_class: every class needs at least 1 subject")
        segs = self.segments_per_subject
        segs = [segs] * m if isinstance(segs, int) else list(segs)
        if len(segs) != m or any(int(n) < 1 for n in segs):
            problems.append("segments_per_subject must be a positive int or one positive int per modality")
        if self.latent_dim < 1:
            problems.append("latent_dim must be >= 1")
        for name in ("shared_signal", "conflict", "noise", "subject_scale"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                problems.append(f"{name} must be a finite value >= 0")
        if len(self.dominance) != m or any(not (math.isfinite(d) and d >= 0) for d in self.dominance):
            problems.append("dominance needs one value >= 0 per modality")
        if len(self.missing_rate) != m or any(not 0 <= p < 1 for p in self.missing_rate):
            problems.append("missing_rate needs one value in [0, 1) per modality")
        if not 0 <= self.label_noise <= 1:
            problems.append("label_noise must lie in [0, 1]")
        if len(self.modality_names) != m or len(set(self.modality_names)) != m:
            problems.append("modality_names must be unique, one per modality")
        if problems:
            raise ConfigError(problems)

    def segment_counts(self) -> List[int]:
        segs = self.segments_per_subject
        return [int(segs)] * len(self.modality_dims) if isinstance(segs, int) else [int(n) for n in segs]


def generate(spec: SyntheticSpec, rng: Optional[Rng] = None) -> Dataset:
    """Draw subjects from a latent class model.

    Segment of modality ``r`` for subject ``s`` with class ``y``::

        A_r (shared_signal * dominance_r * c_y + o_s)
          + conflict * sign_r * a_y * A_r v + noise * eps

    ``c_y`` are class prototypes, ``o_s`` a per-subject offset, ``A_r`` a
    random projection, ``v`` a nuisance direction shared by all modalities and
    ``a_y`` a class code in [-1, 1]. ``sign_r`` alternates between modalities,
    so the nuisance cue points opposite ways in different streams.
    """
    rng = rng or Rng.stream(spec.seed, "data")
    K, L = spec.num_classes, spec.latent_dim
    dims = [int(d) for d in spec.modality_dims]
    m = len(dims)
    prototypes = rng.standard_normal((K, L))
    projections = [rng.standard_normal((d, L)) / math.sqrt(L) for d in dims]
    nuisance = rng.standard_normal(L)
    nuisance /= np.linalg.norm(nuisance)
    codes = np.linspace(-1.0, 1.0, K)
    signs = [1.0 if r % 2 == 0 else -1.0 for r in range(m)]
    seg_counts = spec.segment_counts()

    subjects = []
    idx = 0
    for y in range(K):
        for _ in range(int(spec.subjects_per_class[y])):
            offset = spec.subject_scale * rng.standard_normal(L)
            present = [rng.uniform() >= p for p in spec.missing_rate]
            if not any(present):
                present[int(rng.integers(0, m))] = True
            label = y
            if spec.label_noise > 0 and rng.uniform() < spec.label_noise:
                label = int((y + rng.integers(1, K)) % K)
            segments = {}
            for r in range(m):
                if not present[r]:
                    continue
                latent = spec.shared_signal * spec.dominance[r] * prototypes[y] + offset
                base = projections[r] @ latent + spec.conflict * signs[r] * codes[y] * (projections[r] @ nuisance)
                eps = rng.standard_normal((seg_counts[r], dims[r]))
                segments[spec.modality_names[r]] = base[None, :] + spec.noise * eps
            subjects.append(SubjectRecord(f"s{idx:04d}", label, segments))
            idx += 1
    return Dataset(list(spec.modality_names), dims, K, subjects)


# ---------------------------------------------------------------------------
# CSV I/O


def write_csv(dataset: Dataset, out_dir) -> Dict[str, Path]:
    """Write one CSV per modality plus the manifest; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, dim in zip(dataset.modality_names, dataset.modality_dims):
        path = out / f"{name}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "segment_id", "label"] + [f"f{i}" for i in range(dim)])
            for s in dataset.subjects:
                seg = s.segments.get(name)
                if seg is None:
                    continue
                for j, row in enumerate(seg):
                    w.writerow([s.subject_id, j, s.label] + [repr(float(v)) for v in row])
        paths[name] = path
    manifest = out / MANIFEST_NAME
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label", "modalities_present"])
        for s in dataset.subjects:
            w.writerow([s.subject_id, s.label, ";".join(n for n in dataset.modality_names if n in s.available)])
    paths["manifest"] = manifest
    return paths


def _parse_int(value, path, line, what):
    try:
        return int(value)
    except ValueError:
        raise IngestionError(path, line, f"{what} {value!r} is not an integer") from None


def load_csv(modality_paths: Dict[str, object], manifest_path, num_classes: Optional[int] = None,
             modality_dims: Optional[Sequence[int]] = None) -> Dataset:
    """Read a manifest plus one CSV per modality into a :class:`Dataset`.

    ``modality_paths`` maps modality name to file; its order fixes the
    modality order. A file that does not exist contributes no segments; its
    width then has to come from ``modality_dims``.
    """
    manifest_path = Path(manifest_path)
    labels: Dict[str, int] = {}
    declared: Dict[str, List[str]] = {}
    order: List[str] = []
    if not manifest_path.is_file():
        raise DataError(f"manifest {manifest_path} not found")
    with manifest_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["subject_id", "label", "modalities_present"]:
            raise IngestionError(manifest_path, 1, f"unexpected header {header}")
        for line, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise IngestionError(manifest_path, line, f"expected 3 columns, got {len(row)}")
            sid = row[0]
            if sid in labels:
                raise IngestionError(manifest_path, line, f"duplicate subject {sid}")
            labels[sid] = _parse_int(row[1], manifest_path, line, "label")
            declared[sid] = [n for n in row[2].split(";") if n]
            order.append(sid)

    names = list(modality_paths)
    dims: List[Optional[int]] = list(modality_dims) if modality_dims is not None else [None] * len(names)
    rows: Dict[str, Dict[str, Dict[int, np.ndarray]]] = {sid: {} for sid in order}
    for r, name in enumerate(names):
        path = Path(modality_paths[name])
        if not path.exists():
            continue
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[:3] != ["subject_id", "segment_id", "label"]:
                raise IngestionError(path, 1, f"unexpected header {header}")
            dim = len(header) - 3
            if header[3:] != [f"f{i}" for i in range(dim)] or dim < 1:
                raise IngestionError(path, 1, "feature columns must be f0..f{D-1}")
            if dims[r] is not None and dims[r] != dim:
                raise IngestionError(path, 1, f"{dim} feature columns, expected {dims[r]}")
            dims[r] = dim
            for line, row in enumerate(reader, start=2):
                if len(row) != dim + 3:
                    raise IngestionError(path, line, f"row has {len(row) - 3} features, header declares {dim}")
                sid = row[0]
                if sid not in labels:
                    raise IngestionError(path, line, f"subject {sid} not in manifest")
                label = _parse_int(row[2], path, line, "label")
                if label != labels[sid]:
                    raise IngestionError(path, line, f"label {label} conflicts with label {labels[sid]} for subject {sid}")
                if name not in declared[sid]:
                    raise IngestionError(path, line, f"subject {sid} has {name} rows but the manifest omits {name}")
                seg = _parse_int(row[1], path, line, "segment_id")
                bucket = rows[sid].setdefault(name, {})
                if seg in bucket:
                    raise IngestionError(path, line, f"duplicate segment ({sid}, {name}, {seg})")
                try:
                    values = np.array([float(v) for v in row[3:]])
                except ValueError:
                    raise IngestionError(path, line, "non-numeric feature value") from None
                if not np.all(np.isfinite(values)):
                    raise IngestionError(path, line, "non-finite feature value")
                bucket[seg] = values

    for r, name in enumerate(names):
        if dims[r] is None:
            raise DataError(f"no readable file for modality {name} and no width given")
    if num_classes is None:
        num_classes = max(labels.values()) + 1 if labels else 0
    subjects = []
    for sid in order:
        segments = {}
        for name in names:
            bucket = rows[sid].get(name)
            if bucket:
                segments[name] = np.stack([bucket[j] for j in sorted(bucket)])
        subjects.append(SubjectRecord(sid, labels[sid], segments))
    return Dataset(names, [int(d) for d in dims], int(num_classes), subjects)


def load_csv_dir(directory, modality_names: Optional[Sequence[str]] = None, num_classes: Optional[int] = None) -> Dataset:
    """Load a directory written by :func:`write_csv`."""
    directory = Path(directory)
    if modality_names is None:
        modality_names = sorted(p.stem for p in directory.glob("*.csv") if p.name != MANIFEST_NAME)
    paths = {name: directory / f"{name}.csv" for name in modality_names}
    return load_csv(paths, directory / MANIFEST_NAME, num_classes)


# ---------------------------------------------------------------------------
# segment tables and pools


@dataclass
class SegmentTable:
    """All segments of one modality from a set of subjects.

    Pools are integer index arrays into a table; oversampling repeats indices
    and never copies or alters the feature rows themselves.
    """

    modality: int
    features: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray

    def __len__(self):
        return self.labels.size


def segment_table(dataset: Dataset, modality: int, subject_ids: Sequence[str]) -> SegmentTable:
    name = dataset.modality_names[modality]
    feats, labels, owners = [], [], []
    for sid in subject_ids:
        s = dataset.subject(sid)
        seg = s.segments.get(name)
        if seg is None or seg.shape[0] == 0:
            continue
        feats.append(seg)
        labels += [s.label] * seg.shape[0]
        owners += [sid] * seg.shape[0]
    dim = dataset.modality_dims[modality]
    features = np.concatenate(feats) if feats else np.zeros((0, dim))
    return SegmentTable(modality, features, np.asarray(labels, dtype=np.int64), np.asarray(owners, dtype=object))


@dataclass
class AlignedTable:
    """Time-aligned rows from complete subjects: row i of every modality is
    the same subject and segment position."""

    features: List[np.ndarray]
    labels: np.ndarray
    subjects: np.ndarray

    def __len__(self):
        return self.labels.size

    def modality_table(self, modality: int) -> SegmentTable:
        return SegmentTable(modality, self.features[modality], self.labels, self.subjects)


def aligned_table(dataset: Dataset, subject_ids: Sequence[str]) -> AlignedTable:
    m = dataset.num_modalities
    feats: List[List[np.ndarray]] = [[] for _ in range(m)]
    labels, owners = [], []
    for sid in subject_ids:
        s = dataset.subject(sid)
        if not dataset.is_complete(s):
            continue
        n = min(s.segments[name].shape[0] for name in dataset.modality_names)
        for r, name in enumerate(dataset.modality_names):
            feats[r].append(s.segments[name][:n])
        labels += [s.label] * n
        owners += [sid] * n
    features = [np.concatenate(f) if f else np.zeros((0, d)) for f, d in zip(feats, dataset.modality_dims)]
    return AlignedTable(features, np.asarray(labels, dtype=np.int64), np.asarray(owners, dtype=object))


def _grow(indices: np.ndarray, target: int, rng: Rng) -> np.ndarray:
    """Keep every index once and top up to ``target`` with replacement draws."""
    extra = target - indices.size
    if extra <= 0:
        return indices
    return np.concatenate([indices, indices[rng.choice(indices.size, extra)]])


def oversample_modality_balanced(tables: Sequence[SegmentTable], rng: Rng) -> List[np.ndarray]:
    """Index pools, one per modality, all grown to the largest pool's size."""
    sizes = [len(t) for t in tables]
    for t, n in zip(tables, sizes):
        if n == 0:
            raise ConfigError(f"modality {t.modality} has an empty training pool")
    target = max(sizes)
    return [_grow(np.arange(n), target, rng) for n in sizes]


def oversample_eval_balanced(tables: Sequence[SegmentTable], num_classes: int, rng: Rng) -> List[np.ndarray]:
    """Index pools with the same per-class count in every modality."""
    per_class = []
    for t in tables:
        counts = np.bincount(t.labels, minlength=num_classes)
        missing = [c for c in range(num_classes) if counts[c] == 0]
        if missing:
            raise SplitError(f"modality {t.modality}: classes {missing} absent from the evaluation set")
        per_class.append(counts)
    target = int(max(c.max() for c in per_class))
    pools = []
    for t in tables:
        parts = [_grow(np.flatnonzero(t.labels == c), target, rng) for c in range(num_classes)]
        pools.append(np.concatenate(parts))
    return pools


def oversample_aligned_eval(table: AlignedTable, num_classes: int, rng: Rng) -> np.ndarray:
    """Class-balanced index pool for an aligned table (shared by all modalities)."""
    return oversample_eval_balanced([table.modality_table(0)], num_classes, rng)[0]


# ---------------------------------------------------------------------------
# folds


@dataclass
class Fold:
    eval_subjects: List[str]
    train_subjects: List[str]


@dataclass
class FoldPlan:
    k: int
    mode: str
    folds: List[Fold]

    def to_dict(self) -> dict:
        return {"k": self.k, "mode": self.mode,
                "folds": [{"eval": f.eval_subjects, "train": f.train_subjects} for f in self.folds]}

    @classmethod
    def from_dict(cls, doc: dict) -> "FoldPlan":
        return cls(doc["k"], doc["mode"], [Fold(list(f["eval"]), list(f["train"])) for f in doc["folds"]])


def make_folds(dataset: Dataset, k: int, mode: str = "async", seed: int = 0) -> FoldPlan:
    """Subject-wise stratified folds with one evaluation subject per class.

    Only subjects with every modality present may be evaluated. Everyone not
    evaluated in a fold trains in it; in sync mode incomplete subjects are
    dropped from training because they cannot form aligned batches.
    """
    if mode not in ("sync", "async"):
        raise ConfigError(f"mode must be 'sync' or 'async', got {mode!r}")
    if k < 1:
        raise SplitError("k must be >= 1")
    rng = Rng.stream(seed, "folds")
    ordered = sorted(dataset.subjects, key=lambda s: s.subject_id)
    eligible = []
    for c in range(dataset.num_classes):
        ids = [s.subject_id for s in ordered if s.label == c and dataset.is_complete(s)]
        if len(ids) < k:
            raise SplitError(f"k={k} exceeds the {len(ids)} eligible subjects of class {c}")
        perm = rng.permutation(len(ids))
        eligible.append([ids[i] for i in perm])
    folds = []
    for f in range(k):
        eval_ids = [eligible[c][f] for c in range(dataset.num_classes)]
        held = set(eval_ids)
        train_ids = [s.subject_id for s in ordered if s.subject_id not in held
                     and (mode == "async" or dataset.is_complete(s))]
        folds.append(Fold(eval_ids, train_ids))
    return FoldPlan(k, mode, folds)
