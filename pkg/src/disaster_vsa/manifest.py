"""Task definitions, label vocabularies and CSV dataset manifests."""

from __future__ import annotations

import csv
import os
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

TASK_IDS = ("task1", "task2", "task3")
SINGLE_LABEL = "single_label"
MULTI_LABEL = "multi_label"
SPLITS = ("train", "dev", "test")
ORIGINS = ("original", "upsampled", "augmented")

LABEL_SEPARATOR = ";"
MANIFEST_HEADER = ("image_path", "labels")

TASK1_LABELS = ("negative", "positive", "neutral")
TASK2_LABELS = ("joy", "sadness", "fear", "disgust", "anger", "surprise", "neutral")
# Only ten of the eleven task-3 names are known; the last slot is configurable.
TASK3_KNOWN_LABELS = (
    "anger",
    "anxiety",
    "craving",
    "empathetic_pain",
    "fear",
    "horror",
    "joy",
    "relief",
    "sadness",
    "surprise",
)
TASK3_PLACEHOLDER = "label_11"

_EXPECTED = {
    "task1": (SINGLE_LABEL, 3),
    "task2": (MULTI_LABEL, 7),
    "task3": (MULTI_LABEL, 11),
}


class ManifestError(ValueError):
    """Raised for unreadable or malformed manifests and vocabulary misses."""


def normalize_label(token: str) -> str:
    return token.strip().lower()


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    labels: tuple[str, ...]
    mode: str

    def __post_init__(self) -> None:
        if self.task_id not in _EXPECTED:
            raise ValueError(f"unknown task_id {self.task_id!r}; expected one of {TASK_IDS}")
        object.__setattr__(self, "labels", tuple(self.labels))
        mode, size = _EXPECTED[self.task_id]
        if self.mode != mode:
            raise ValueError(f"{self.task_id} must be {mode}, got {self.mode!r}")
        if len(self.labels) != size:
            raise ValueError(f"{self.task_id} needs exactly {size} labels, got {len(self.labels)}")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate label names in {self.labels}")

    @property
    def is_multi_label(self) -> bool:
        return self.mode == MULTI_LABEL

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def resolve(self, token: str) -> str:
        """Map a raw label token onto the vocabulary (case/whitespace-insensitive)."""
        key = normalize_label(token)
        for label in self.labels:
            if normalize_label(label) == key:
                return label
        raise KeyError(token)

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "labels": list(self.labels), "mode": self.mode}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "TaskSpec":
        return cls(task_id=payload["task_id"], labels=tuple(payload["labels"]), mode=payload["mode"])


def builtin_task_spec(task_id: str, extra_label: str = TASK3_PLACEHOLDER) -> TaskSpec:
    """Return the task definition for one of the three challenge tasks.

    ``extra_label`` names the eleventh task-3 label and is ignored otherwise.
    """
    if task_id == "task1":
        return TaskSpec("task1", TASK1_LABELS, SINGLE_LABEL)
    if task_id == "task2":
        return TaskSpec("task2", TASK2_LABELS, MULTI_LABEL)
    if task_id == "task3":
        name = normalize_label(extra_label).replace(" ", "_")
        if not name:
            raise ValueError("task3 extra label must be non-empty")
        return TaskSpec("task3", TASK3_KNOWN_LABELS + (name,), MULTI_LABEL)
    raise ValueError(f"unknown task_id {task_id!r}; expected one of {TASK_IDS}")


@dataclass(frozen=True)
class ImageRecord:
    """One image and its label set.

    ``transforms`` holds the augmentation chain for records with
    ``origin == "augmented"``; pixels are produced lazily at batch time.
    """

    image_path: str
    labels: frozenset[str]
    origin: str = "original"
    transforms: tuple[tuple, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", frozenset(self.labels))
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")


@dataclass(frozen=True)
class Dataset:
    spec: TaskSpec
    records: tuple[ImageRecord, ...]
    split: str = "train"
    labeled: bool = field(default=True, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        vocab = set(self.spec.labels)
        for i, rec in enumerate(self.records):
            extra = rec.labels - vocab
            if extra:
                raise ValueError(f"record {i} ({rec.image_path}) has labels outside vocabulary: {sorted(extra)}")
            _check_mode(self.spec, rec.labels, self.labeled, f"record {i} ({rec.image_path})")

    def __len__(self) -> int:
        return len(self.records)

    def with_records(self, records: Iterable[ImageRecord]) -> "Dataset":
        return Dataset(self.spec, tuple(records), self.split, self.labeled)


def _check_mode(spec: TaskSpec, labels: frozenset[str], labeled: bool, where: str) -> None:
    if not labeled and not labels:
        return
    if spec.mode == SINGLE_LABEL and len(labels) != 1:
        raise ValueError(f"{where}: single-label task needs exactly one label, got {len(labels)}")
    if spec.mode == MULTI_LABEL and not labels:
        raise ValueError(f"{where}: ground-truth record needs at least one label")


def label_counts(ds: Dataset) -> dict[str, int]:
    """Number of records carrying each vocabulary label, in vocabulary order."""
    counter = Counter(label for rec in ds.records for label in rec.labels)
    return {label: counter.get(label, 0) for label in ds.spec.labels}


def load_manifest(path: str | os.PathLike, spec: TaskSpec, split: str = "train", labeled: bool = True) -> Dataset:
    """Read a ``image_path,labels`` CSV manifest.

    Relative image paths are resolved against the manifest's directory.
    With ``labeled=False`` empty label cells are accepted (inference input).
    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent.absolute()
    records: list[ImageRecord] = []
    seen: dict[str, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ManifestError(f"{path} row {row_no}: expected 2 columns, got {len(row)}")
            raw_path, raw_labels = row[0].strip(), row[1]
            if not raw_path:
                raise ManifestError(f"{path} row {row_no}: empty image_path")
            labels = set()
            for token in raw_labels.split(LABEL_SEPARATOR):
                if not token.strip():
                    continue
                try:
                    labels.add(spec.resolve(token))
                except KeyError:
                    raise ManifestError(
                        f"{path} row {row_no}: unknown label {token.strip()!r} for {spec.task_id}"
                    ) from None
            if labeled and not labels:
                raise ManifestError(f"{path} row {row_no}: empty label field")
            try:
                _check_mode(spec, frozenset(labels), labeled, f"{path} row {row_no}")
            except ValueError as exc:
                raise ManifestError(str(exc)) from None
            image_path = raw_path if os.path.isabs(raw_path) else os.path.normpath(base / raw_path)
            if image_path in seen:
                warnings.warn(
                    f"{path} row {row_no}: duplicate image_path {raw_path!r} (first at row {seen[image_path]})",
                    stacklevel=2,
                )
            else:
                seen[image_path] = row_no
            records.append(ImageRecord(image_path, frozenset(labels)))
    return Dataset(spec, tuple(records), split, labeled)


def format_labels(spec: TaskSpec, labels: Iterable[str]) -> str:
    """Serialize a label set in vocabulary order."""
    chosen = set(labels)
    return LABEL_SEPARATOR.join(label for label in spec.labels if label in chosen)


def write_manifest(ds: Dataset, path: str | os.PathLike) -> None:
    """Write ``ds`` as a manifest; paths under the target directory are stored relative."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = str(path.parent.absolute())
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in ds.records:
            stored = rec.image_path
            if os.path.isabs(stored) and os.path.commonpath([base, stored]) == base:
                stored = os.path.relpath(stored, base)
            writer.writerow([stored, format_labels(ds.spec, rec.labels)])
