import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdarsn.split import (DatasetIndex, IndexEntry, IterativeStratifiedKFold, default_class_list,
                          filter_dataset, iterative_stratify, load_folds, nested_split,
                          read_index, save_folds, write_index)

CLASSES = [f"c{i}" for i in range(6)]


def make_index(label_sets, source="Georgia"):
    return DatasetIndex([IndexEntry(f"r{i:04d}", source, frozenset(s))
                         for i, s in enumerate(label_sets)], CLASSES)


def random_index(rng, n, n_classes=6, max_labels=3):
    sets = []
    for _ in range(n):
        k = rng.integers(1, max_labels + 1)
        sets.append({f"c{j}" for j in rng.choice(n_classes, size=k, replace=False)})
    return make_index(sets)


def max_deviation(index, fold_of, k):
    """Brute-force per-class per-fold count deviation from n_c / k."""
    worst = 0.0
    for c in index.class_list:
        members = [e.record_id for e in index.entries if c in e.labels]
        for f in range(k):
            count = sum(1 for r in members if fold_of[r] == f)
            worst = max(worst, abs(count - len(members) / k))
    return worst


def test_default_class_list_has_26_codes():
    classes = default_class_list()
    assert len(classes) == 26 and len(set(classes)) == 26
    assert "426783006" in classes


def test_filter_identity_and_exclusions():
    idx = make_index([{"c0"}, {"c1", "c2"}])
    assert filter_dataset(idx, excluded_sources=()).entries == idx.entries
    mixed = DatasetIndex([
        IndexEntry("S0001", "PTB", frozenset({"c0"})),
        IndexEntry("I0001", "StPetersburg", frozenset({"c0"})),
        IndexEntry("E0001", "Georgia", frozenset({"zzz"})),
        IndexEntry("E0002", "Georgia", frozenset({"zzz", "c3"})),
    ], CLASSES)
    out = filter_dataset(mixed)
    assert [e.record_id for e in out.entries] == ["E0002"]
    assert out.entries[0].labels == {"c3"}


def test_filter_is_idempotent(rng):
    idx = random_index(rng, 30)
    once = filter_dataset(idx)
    assert filter_dataset(once).entries == once.entries


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        DatasetIndex([IndexEntry("a", "x", frozenset()), IndexEntry("a", "x", frozenset())])


def test_perfectly_divisible_instance():
    idx = make_index([{"c0"}] * 5 + [{"c1"}] * 5)
    fold_of = iterative_stratify(idx, k=5, seed=0)
    for f in range(5):
        members = [e for e in idx.entries if fold_of[e.record_id] == f]
        assert sorted(min(e.labels) for e in members) == ["c0", "c1"]


def test_two_fold_three_label_bound():
    rng = np.random.default_rng(0)
    sets = [{f"c{j}" for j in rng.choice(6, size=3, replace=False)} for _ in range(100)]
    idx = make_index(sets)
    fold_of = iterative_stratify(idx, k=2, seed=0)
    assert max_deviation(idx, fold_of, 2) <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(10, 200), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_deviation_bound_on_random_instances(n, k, seed):
    idx = random_index(np.random.default_rng(seed), n)
    fold_of = iterative_stratify(idx, k=k, seed=seed)
    assert sorted(fold_of) == sorted(idx.record_ids)
    assert set(fold_of.values()) <= set(range(k))
    assert max_deviation(idx, fold_of, k) <= 2


def test_same_seed_same_folds(rng):
    idx = random_index(rng, 80)
    assert iterative_stratify(idx, 5, seed=3) == iterative_stratify(idx, 5, seed=3)


def test_entry_order_keeps_fold_sizes(rng):
    idx = random_index(rng, 57)
    shuffled = DatasetIndex([idx.entries[i] for i in rng.permutation(57)], CLASSES)
    sizes = lambda f: sorted(np.bincount(list(f.values()), minlength=5))
    assert sizes(iterative_stratify(idx, 5, 1)) == sizes(iterative_stratify(shuffled, 5, 1))
    assert iterative_stratify(idx, 5, 1) == iterative_stratify(shuffled, 5, 1)


def test_fold_sizes_balanced(rng):
    idx = random_index(rng, 103)
    counts = np.bincount(list(iterative_stratify(idx, 5, 0).values()), minlength=5)
    assert counts.max() - counts.min() <= 3


def test_stratify_errors(rng):
    idx = random_index(rng, 3)
    with pytest.raises(ValueError):
        iterative_stratify(idx, k=4)
    with pytest.raises(ValueError):
        iterative_stratify(idx, k=1)
    with pytest.raises(ValueError):
        iterative_stratify(make_index([]), k=2)


def test_nested_split(rng):
    idx = random_index(rng, 50)
    fold_of = iterative_stratify(idx, 5, 0)
    train, val, test = nested_split(fold_of, test_fold=4, val_fold=3)
    assert {fold_of[r] for r in train} == {0, 1, 2}
    assert {fold_of[r] for r in val} == {3} and {fold_of[r] for r in test} == {4}
    assert len(train) + len(val) + len(test) == 50
    assert set(train) | set(val) | set(test) == set(fold_of)
    with pytest.raises(ValueError):
        nested_split(fold_of, 2, 2)
    with pytest.raises(ValueError):
        nested_split(fold_of, 5, 1)


def test_index_and_folds_round_trip(tmp_path, rng):
    idx = random_index(rng, 12)
    write_index(idx, tmp_path / "index.csv")
    back = read_index(tmp_path / "index.csv", CLASSES)
    assert sorted(back.entries, key=lambda e: e.record_id) == idx.entries
    fold_of = iterative_stratify(idx, 3, 7)
    save_folds(fold_of, tmp_path / "folds.json", 7, 3)
    assert load_folds(tmp_path / "folds.json") == (fold_of, 3, 7)
    assert set(json.loads((tmp_path / "folds.json").read_text())) == {"seed", "k", "fold_of"}


def test_sklearn_style_splitter(rng):
    Y = random_index(rng, 40).label_matrix()
    cv = IterativeStratifiedKFold(n_splits=4, random_state=0)
    seen = []
    for train, test in cv.split(np.zeros(40), Y):
        assert not set(train) & set(test)
        seen.extend(test)
    assert sorted(seen) == list(range(40))
    assert cv.get_n_splits() == 4
