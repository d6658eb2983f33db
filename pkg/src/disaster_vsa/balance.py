"""Upsampling of training sets by duplicating minority-label records."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .manifest import MULTI_LABEL, SINGLE_LABEL, Dataset, label_counts

TARGETS = ("match_max", "match_median")


class UnbalanceableClassError(ValueError):
    pass


@dataclass(frozen=True)
class BalanceConfig:
    """Upsampling switches.

    ``max_replication_factor`` caps how many instances (original included)
    any single original record may have after balancing; fractional caps
    are floored per record.
    """

    enabled: bool = True
    seed: int = 0
    max_replication_factor: float = 10.0
    target: str = "match_max"

    def __post_init__(self) -> None:
        if not self.max_replication_factor >= 1:
            raise ValueError(f"max_replication_factor must be >= 1, got {self.max_replication_factor}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown balance target {self.target!r}; expected one of {TARGETS}")

    @property
    def copies_cap(self) -> float:
        if math.isinf(self.max_replication_factor):
            return math.inf
        return math.floor(self.max_replication_factor)


def _target_count(counts: list[int], target: str) -> int:
    if target == "match_max":
        return max(counts)
    return int(math.ceil(np.median(counts)))


def _require_train(ds: Dataset) -> None:
    if ds.split != "train":
        raise ValueError(f"balancing is only applied to the train split, got {ds.split!r}")


def upsample_single_label(ds: Dataset, cfg: BalanceConfig) -> Dataset:
    """Duplicate records of under-represented classes up to the target count.

    Duplicates are drawn with replacement (seeded) among records that have
    not yet hit the per-record cap, and appended after the originals,
    class by class in vocabulary order.
    """
    if ds.spec.mode != SINGLE_LABEL:
        raise ValueError("upsample_single_label needs a single-label dataset")
    _require_train(ds)
    if not cfg.enabled or not ds.records:
        return ds
    counts = label_counts(ds)
    for label, n in counts.items():
        if n == 0:
            raise UnbalanceableClassError(f"class {label!r} has no samples and cannot be upsampled")
    target = _target_count(list(counts.values()), cfg.target)
    cap = cfg.copies_cap
    rng = np.random.default_rng(cfg.seed)

    added = []
    for label in ds.spec.labels:
        members = [i for i, rec in enumerate(ds.records) if label in rec.labels]
        copies = np.ones(len(members), dtype=np.int64)
        want = max(0, target - len(members))
        for _ in range(want):
            eligible = np.flatnonzero(copies < cap)
            if eligible.size == 0:
                break
            pick = int(eligible[rng.integers(eligible.size)])
            copies[pick] += 1
            added.append(replace(ds.records[members[pick]], origin="upsampled"))
    return ds.with_records(ds.records + tuple(added))


def upsample_multi_label(ds: Dataset, cfg: BalanceConfig) -> Dataset:
    """Rarest-label-first duplication for multi-label datasets.

    Each step picks the label with the lowest current count that is still
    below target (ties go to the lower vocabulary index) and duplicates one
    uniformly chosen original carrying it. A label whose originals have all
    reached the cap drops out; the loop ends when no label remains.
    Labels with no samples at all are skipped with a warning.
    """
    if ds.spec.mode != MULTI_LABEL:
        raise ValueError("upsample_multi_label needs a multi-label dataset")
    _require_train(ds)
    if not cfg.enabled or not ds.records:
        return ds
    labels = ds.spec.labels
    before = label_counts(ds)
    empty = [label for label, n in before.items() if n == 0]
    if empty:
        warnings.warn(f"skipping labels with no samples: {empty}", stacklevel=2)
    active = [label for label in labels if before[label] > 0]
    target = _target_count([before[label] for label in active], cfg.target)
    cap = cfg.copies_cap
    rng = np.random.default_rng(cfg.seed)

    # per label, originals still below the copy cap, kept in input order
    eligible = {label: [i for i, rec in enumerate(ds.records) if label in rec.labels] for label in active}
    copies = np.ones(len(ds.records), dtype=np.int64)
    if cap <= 1:
        eligible = {label: [] for label in active}
    counts = dict(before)
    added = []
    while True:
        candidates = [label for label in active if counts[label] < target and eligible[label]]
        if not candidates:
            break
        rarest = min(candidates, key=lambda label: (counts[label], labels.index(label)))
        pool = eligible[rarest]
        pick = pool[int(rng.integers(len(pool)))]
        copies[pick] += 1
        rec = ds.records[pick]
        for label in rec.labels:
            counts[label] += 1
        if copies[pick] >= cap:
            for label in rec.labels:
                if label in eligible:
                    eligible[label].remove(pick)
        added.append(replace(rec, origin="upsampled"))
    return ds.with_records(ds.records + tuple(added))


def balance_dataset(ds: Dataset, cfg: BalanceConfig) -> Dataset:
    if ds.spec.mode == SINGLE_LABEL:
        return upsample_single_label(ds, cfg)
    return upsample_multi_label(ds, cfg)
