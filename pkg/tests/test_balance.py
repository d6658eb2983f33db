import math
import warnings
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ABC, SEVEN, make_dataset
from disaster_vsa.balance import (
    BalanceConfig,
    UnbalanceableClassError,
    balance_dataset,
    upsample_multi_label,
    upsample_single_label,
)
from oracles import count_labels

UNCAPPED = BalanceConfig(max_replication_factor=math.inf)


def counts_of(ds):
    return count_labels(ds.records, ds.spec.labels)


class TestSingleLabel:
    def test_matches_max(self):
        ds = make_dataset(ABC, [["A"]] * 5 + [["B"]] * 3 + [["C"]] * 2)
        out = upsample_single_label(ds, UNCAPPED)
        assert counts_of(out) == {"A": 5, "B": 5, "C": 5}
        assert len(out) == 15

    def test_added_records_are_marked_and_closed_world(self):
        ds = make_dataset(ABC, [["A"]] * 5 + [["B"]] * 3 + [["C"]] * 2)
        out = upsample_single_label(ds, UNCAPPED)
        assert out.records[: len(ds)] == ds.records
        assert all(r.origin == "upsampled" for r in out.records[len(ds):])
        assert {r.image_path for r in out.records} <= {r.image_path for r in ds.records}

    def test_already_balanced_is_unchanged(self):
        ds = make_dataset(ABC, [["A"]] * 4 + [["B"]] * 4 + [["C"]] * 4)
        assert upsample_single_label(ds, UNCAPPED) == ds

    def test_cap(self):
        ds = make_dataset(ABC, [["A"]] * 10 + [["B"]] + [["C"]] * 10)
        out = upsample_single_label(ds, BalanceConfig(max_replication_factor=3))
        assert counts_of(out) == {"A": 10, "B": 3, "C": 10}

    def test_cap_is_per_record(self):
        ds = make_dataset(ABC, [["A"]] * 10 + [["B"]] * 2 + [["C"]] * 10)
        out = upsample_single_label(ds, BalanceConfig(max_replication_factor=2, seed=5))
        per_path = Counter(r.image_path for r in out.records if "B" in r.labels)
        assert max(per_path.values()) <= 2
        assert counts_of(out)["B"] == 4

    def test_empty_class_error_names_class(self):
        ds = make_dataset(ABC, [["A"], ["B"]])
        with pytest.raises(UnbalanceableClassError, match="'C'"):
            upsample_single_label(ds, UNCAPPED)

    def test_match_median(self):
        ds = make_dataset(ABC, [["A"]] * 9 + [["B"]] * 4 + [["C"]] * 1)
        out = upsample_single_label(ds, BalanceConfig(target="match_median", max_replication_factor=math.inf))
        assert counts_of(out) == {"A": 9, "B": 4, "C": 4}

    def test_disabled(self):
        ds = make_dataset(ABC, [["A"]] * 5 + [["B"]])
        assert upsample_single_label(ds, BalanceConfig(enabled=False)) is ds

    def test_dev_split_refused(self):
        ds = make_dataset(ABC, [["A"], ["B"], ["C"]], split="dev")
        with pytest.raises(ValueError, match="train split"):
            balance_dataset(ds, UNCAPPED)

    def test_rejects_multi_label(self):
        with pytest.raises(ValueError):
            upsample_single_label(make_dataset(SEVEN, [["A"]]), UNCAPPED)


class TestMultiLabel:
    def example(self):
        # the only B-carrying record also carries A
        return make_dataset(SEVEN, [["A"], ["A"], ["A"], ["A", "B"]])

    def test_co_occurring_example(self):
        # hand simulation: B is rarest three times, each copy of {A,B} adds
        # one to both counts: A 4->7, B 1->4, then B meets the target of 4
        with pytest.warns(UserWarning, match="no samples"):
            out = upsample_multi_label(self.example(), UNCAPPED)
        counts = counts_of(out)
        assert counts["A"] == 7 and counts["B"] == 4
        assert len(out) == 7

    def test_seed_independent_counts(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = upsample_multi_label(self.example(), BalanceConfig(seed=1, max_replication_factor=math.inf))
            b = upsample_multi_label(self.example(), BalanceConfig(seed=2, max_replication_factor=math.inf))
        assert counts_of(a) == counts_of(b)

    def test_already_balanced(self):
        ds = make_dataset(SEVEN, [["A", "B"], ["C", "D"], ["E", "F"], ["G"], ["A"], ["B"], ["C"], ["D"],
                                  ["E"], ["F"], ["G"]])
        assert upsample_multi_label(ds, UNCAPPED) == ds

    def test_cap_stops_runaway(self):
        ds = make_dataset(SEVEN, [["A"]] * 20 + [["A", "B"]] + [[c] for c in "CDEFG" for _ in range(20)])
        out = upsample_multi_label(ds, BalanceConfig(max_replication_factor=4))
        assert counts_of(out)["B"] == 4
        assert Counter(r.image_path for r in out.records)["img20.jpg"] == 4

    def test_deterministic(self):
        ds = make_dataset(SEVEN, [["A"], ["A", "B"], ["B", "C"], ["D"], ["E", "F"], ["G"], ["A"], ["A"]])
        cfg = BalanceConfig(seed=3)
        assert upsample_multi_label(ds, cfg) == upsample_multi_label(ds, cfg)


single_counts = st.lists(st.integers(1, 12), min_size=3, max_size=3)


@settings(max_examples=60, deadline=None)
@given(single_counts, st.integers(0, 2**31))
def test_single_label_properties(counts, seed):
    labels = [[label] for label, n in zip("ABC", counts) for _ in range(n)]
    ds = make_dataset(ABC, labels)
    out = upsample_single_label(ds, BalanceConfig(seed=seed, max_replication_factor=math.inf))
    after = counts_of(out)
    assert set(after.values()) == {max(counts)}
    assert not Counter(ds.records) - Counter(out.records)
    assert out == upsample_single_label(ds, BalanceConfig(seed=seed, max_replication_factor=math.inf))


multi_records = st.lists(st.sets(st.sampled_from("ABCDEFG"), min_size=1, max_size=3), min_size=1, max_size=25)


@settings(max_examples=60, deadline=None)
@given(multi_records, st.integers(0, 2**31), st.sampled_from([1.0, 2.0, 3.5, math.inf]))
def test_multi_label_properties(lists, seed, cap):
    ds = make_dataset(SEVEN, lists)
    cfg = BalanceConfig(seed=seed, max_replication_factor=cap)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = upsample_multi_label(ds, cfg)
    before, after = counts_of(ds), counts_of(out)
    assert all(after[k] >= before[k] for k in before)
    assert not Counter(ds.records) - Counter(out.records)
    assert {r.image_path for r in out.records} <= {r.image_path for r in ds.records}
    copies = Counter(r.image_path for r in out.records)
    assert max(copies.values()) <= max(1, cfg.copies_cap)
    target = max(v for v in before.values() if v)
    for label, n in before.items():
        if n == 0:
            continue
        carriers = {r.image_path for r in ds.records if label in r.labels}
        assert after[label] >= target or all(copies[p] >= cfg.copies_cap for p in carriers)
