"""Score decoding, support-weighted F1 and prediction/report files."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .manifest import (
    LABEL_SEPARATOR,
    SINGLE_LABEL,
    Dataset,
    ManifestError,
    TaskSpec,
    format_labels,
)

DEFAULT_THRESHOLD = 0.5
PREDICTIONS_HEADER = ("image_path", "scores", "decoded")


class CoverageError(ValueError):
    """Predictions and ground truth do not cover the same image paths."""

    def __init__(self, missing: Sequence[str], extra: Sequence[str]) -> None:
        self.missing = list(missing)
        self.extra = list(extra)
        parts = []
        if self.missing:
            parts.append(f"missing predictions for: {', '.join(self.missing)}")
        if self.extra:
            parts.append(f"predictions without ground truth: {', '.join(self.extra)}")
        super().__init__("; ".join(parts))


@dataclass(frozen=True)
class PredictionRecord:
    image_path: str
    scores: tuple[float, ...]
    decoded: frozenset[str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        object.__setattr__(self, "decoded", frozenset(self.decoded))


@dataclass
class LabelMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    task_id: str
    per_label: dict[str, LabelMetrics]
    weighted_f1: float
    record_count: int
    threshold: float | None = None

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "per_label": {name: asdict(m) for name, m in self.per_label.items()},
            "weighted_f1": self.weighted_f1,
            "record_count": self.record_count,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "MetricsReport":
        return cls(
            task_id=payload["task_id"],
            per_label={name: LabelMetrics(**m) for name, m in payload["per_label"].items()},
            weighted_f1=payload["weighted_f1"],
            record_count=payload["record_count"],
            threshold=payload.get("threshold"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def decode(
    scores: Sequence[float],
    spec: TaskSpec,
    threshold: float = DEFAULT_THRESHOLD,
    fallback_top1: bool = False,
) -> frozenset[str]:
    """Turn a score vector into a label set.

    Single-label: the argmax (first index wins ties). Multi-label: every
    label scoring at least ``threshold``; the set may be empty unless
    ``fallback_top1`` is set.
    """
    if len(scores) != spec.num_labels:
        raise ValueError(f"got {len(scores)} scores for a {spec.num_labels}-label vocabulary")
    if spec.mode == SINGLE_LABEL:
        return frozenset([spec.labels[int(np.argmax(scores))]])
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    chosen = frozenset(label for label, s in zip(spec.labels, scores) if s >= threshold)
    if not chosen and fallback_top1:
        chosen = frozenset([spec.labels[int(np.argmax(scores))]])
    return chosen


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def label_set_metrics(
    labels: Sequence[str], truth: Sequence[Iterable[str]], predicted: Sequence[Iterable[str]]
) -> dict[str, LabelMetrics]:
    """Per-label one-vs-rest precision, recall, F1 and support.

    Undefined ratios (zero denominators) are reported as 0.
    """
    if len(truth) != len(predicted):
        raise ValueError(f"{len(truth)} truth sets vs {len(predicted)} predicted sets")
    index = {label: j for j, label in enumerate(labels)}
    y_true = np.zeros((len(truth), len(labels)), dtype=bool)
    y_pred = np.zeros_like(y_true)
    for row, (t, p) in enumerate(zip(truth, predicted)):
        y_true[row, [index[label] for label in t]] = True
        y_pred[row, [index[label] for label in p]] = True
    tp = (y_true & y_pred).sum(axis=0)
    fp = (~y_true & y_pred).sum(axis=0)
    fn = (y_true & ~y_pred).sum(axis=0)
    out = {}
    for j, label in enumerate(labels):
        precision = _safe_div(tp[j], tp[j] + fp[j])
        recall = _safe_div(tp[j], tp[j] + fn[j])
        f1 = _safe_div(2 * precision * recall, precision + recall)
        out[label] = LabelMetrics(float(precision), float(recall), float(f1), int(tp[j] + fn[j]))
    return out


def support_weighted_f1(per_label: Mapping[str, LabelMetrics]) -> float:
    total = sum(m.support for m in per_label.values())
    return float(_safe_div(sum(m.support * m.f1 for m in per_label.values()), total))


def weighted_f1(truth: Dataset, preds: Sequence[PredictionRecord], threshold: float | None = None) -> MetricsReport:
    """One-vs-rest per-label F1, averaged with ground-truth support as weight.

    ``threshold`` is only recorded in the report; decoding already happened
    when ``preds`` were built.
    """
    spec = truth.spec
    truth_paths = [rec.image_path for rec in truth.records]
    by_path: dict[str, PredictionRecord] = {}
    dup = []
    for p in preds:
        if p.image_path in by_path:
            dup.append(p.image_path)
        by_path[p.image_path] = p
    missing = sorted(set(truth_paths) - set(by_path))
    extra = sorted(set(by_path) - set(truth_paths)) + sorted(set(dup))
    if missing or extra:
        raise CoverageError(missing, extra)

    truth_sets, pred_sets = [], []
    vocab = set(spec.labels)
    for rec in truth.records:
        decoded = by_path[rec.image_path].decoded
        if decoded - vocab:
            raise ValueError(f"prediction for {rec.image_path} has labels outside vocabulary: {sorted(decoded - vocab)}")
        truth_sets.append(rec.labels)
        pred_sets.append(decoded)
    per_label = label_set_metrics(spec.labels, truth_sets, pred_sets)
    wf1 = support_weighted_f1(per_label)
    return MetricsReport(
        task_id=spec.task_id,
        per_label=per_label,
        weighted_f1=wf1,
        record_count=len(truth_paths),
        threshold=None if spec.mode == SINGLE_LABEL else (DEFAULT_THRESHOLD if threshold is None else threshold),
    )


def predictions_from_scores(
    paths: Sequence[str],
    scores: Iterable[Sequence[float]],
    spec: TaskSpec,
    threshold: float = DEFAULT_THRESHOLD,
    fallback_top1: bool = False,
) -> list[PredictionRecord]:
    return [
        PredictionRecord(path, tuple(s), decode(s, spec, threshold, fallback_top1))
        for path, s in zip(paths, scores, strict=True)
    ]


@dataclass
class SweepResult:
    f1_by_threshold: dict[float, float]
    best_threshold: float
    best_f1: float = field(init=False)

    def __post_init__(self) -> None:
        self.best_f1 = self.f1_by_threshold[self.best_threshold]


def sweep_threshold(truth: Dataset, scores: Sequence[Sequence[float]], grid: Sequence[float]) -> SweepResult:
    """Weighted F1 at each grid threshold; ``scores`` align with ``truth.records``.

    The recommended threshold is the argmax, smallest threshold on ties.
    """
    if truth.spec.mode == SINGLE_LABEL:
        raise ValueError("threshold sweeps only apply to multi-label tasks")
    if not grid:
        raise ValueError("threshold grid is empty")
    if len(scores) != len(truth.records):
        raise ValueError(f"{len(scores)} score vectors for {len(truth.records)} records")
    paths = [rec.image_path for rec in truth.records]
    results = {}
    for t in sorted(float(t) for t in grid):
        preds = predictions_from_scores(paths, scores, truth.spec, t)
        results[t] = weighted_f1(truth, preds, t).weighted_f1
    best = max(results, key=lambda t: (results[t], -t))
    return SweepResult(results, best)


def format_score(x: float) -> str:
    return np.format_float_positional(float(x), unique=True, trim="-")


def write_predictions(preds: Sequence[PredictionRecord], spec: TaskSpec, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTIONS_HEADER)
        for p in preds:
            writer.writerow(
                [p.image_path, LABEL_SEPARATOR.join(format_score(s) for s in p.scores), format_labels(spec, p.decoded)]
            )


def read_predictions(path: str | os.PathLike, spec: TaskSpec) -> list[PredictionRecord]:
    """Parse a predictions CSV; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"predictions file not found: {path}")
    base = path.parent.absolute()
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PREDICTIONS_HEADER:
            raise ManifestError(f"{path}: expected header {','.join(PREDICTIONS_HEADER)}, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path} row {row_no}: expected 3 columns, got {len(row)}")
            raw_path, raw_scores, raw_decoded = row
            try:
                scores = tuple(float(s) for s in raw_scores.split(LABEL_SEPARATOR))
            except ValueError:
                raise ManifestError(f"{path} row {row_no}: unparsable scores {raw_scores!r}") from None
            if len(scores) != spec.num_labels:
                raise ManifestError(
                    f"{path} row {row_no}: {len(scores)} scores for a {spec.num_labels}-label vocabulary"
                )
            decoded = set()
            for token in raw_decoded.split(LABEL_SEPARATOR):
                if not token.strip():
                    continue
                try:
                    decoded.add(spec.resolve(token))
                except KeyError:
                    raise ManifestError(f"{path} row {row_no}: unknown label {token.strip()!r}") from None
            raw_path = raw_path.strip()
            image_path = raw_path if os.path.isabs(raw_path) else os.path.normpath(base / raw_path)
            out.append(PredictionRecord(image_path, scores, frozenset(decoded)))
    return out


# Weighted F1 reported for the two submitted runs (Run 1: Inception-v3,
# Run 2: VGG-19). Rendering fixtures only; not reproduction targets.
PUBLISHED_RUNS = {
    "dev": [
        {"run": "run1", "task": "task1", "weighted_f1": 0.714},
        {"run": "run1", "task": "task2", "weighted_f1": 0.588},
        {"run": "run1", "task": "task3", "weighted_f1": 0.479},
        {"run": "run2", "task": "task1", "weighted_f1": 0.666},
        {"run": "run2", "task": "task2", "weighted_f1": 0.535},
        {"run": "run2", "task": "task3", "weighted_f1": 0.479},
    ],
    "test": [
        {"run": "run1", "task": "task1", "weighted_f1": 0.540},
        {"run": "run1", "task": "task2", "weighted_f1": 0.572},
        {"run": "run1", "task": "task3", "weighted_f1": 0.516},
        {"run": "run2", "task": "task1", "weighted_f1": 0.526},
        {"run": "run2", "task": "task2", "weighted_f1": 0.584},
        {"run": "run2", "task": "task3", "weighted_f1": 0.495},
    ],
}


def render_runs_table(runs: Sequence[Mapping]) -> str:
    """Markdown table with one row per run and one weighted-F1 column per task."""
    run_names = list(dict.fromkeys(r["run"] for r in runs))
    tasks = sorted(dict.fromkeys(r["task"] for r in runs))
    cell = {(r["run"], r["task"]): r["weighted_f1"] for r in runs}
    header = "| Runs | " + " | ".join(t.replace("task", "Task ") for t in tasks) + " |"
    rule = "|" + "---|" * (len(tasks) + 1)
    lines = [header, rule]
    for name in run_names:
        values = [f"{cell[(name, t)]:.3f}" if (name, t) in cell else "-" for t in tasks]
        lines.append(f"| {name.replace('run', 'Run ')} | " + " | ".join(values) + " |")
    return "\n".join(lines)


def render_report_table(report: MetricsReport, run: str = "run") -> str:
    """Per-label breakdown followed by a run/task/weighted-F1 summary row."""
    lines = ["| label | precision | recall | f1 | support |", "|---|---|---|---|---|"]
    for name, m in report.per_label.items():
        lines.append(f"| {name} | {m.precision:.3f} | {m.recall:.3f} | {m.f1:.3f} | {m.support} |")
    lines += ["", "| Run | Task | Weighted F1 |", "|---|---|---|"]
    lines.append(f"| {run} | {report.task_id} | {report.weighted_f1:.3f} |")
    return "\n".join(lines)
