"""Dataset filtering and multilabel iterative stratification."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_EXCLUDED_SOURCES = frozenset({"PTB", "StPetersburg"})


@dataclass(frozen=True)
class IndexEntry:
    record_id: str
    source: str
    labels: frozenset
    path: str = ""


@dataclass
class DatasetIndex:
    entries: list
    class_list: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.record_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate record ids in index: {dup[:5]}")

    def __len__(self):
        return len(self.entries)

    @property
    def record_ids(self):
        return [e.record_id for e in self.entries]

    def label_matrix(self) -> np.ndarray:
        col = {c: j for j, c in enumerate(self.class_list)}
        Y = np.zeros((len(self.entries), len(self.class_list)), dtype=bool)
        for i, e in enumerate(self.entries):
            for code in e.labels:
                if code in col:
                    Y[i, col[code]] = True
        return Y

    def subset(self, record_ids) -> "DatasetIndex":
        by_id = {e.record_id: e for e in self.entries}
        return DatasetIndex([by_id[r] for r in record_ids], list(self.class_list))


def read_class_list(path) -> list:
    """First column of a CSV (header ``code``) or one code per line."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if lines and lines[0].split(",")[0].strip().lower() == "code":
        lines = lines[1:]
    return [ln.split(",")[0].strip() for ln in lines]


def default_class_list() -> list:
    return read_class_list(Path(__file__).parent / "data" / "scored_classes.csv")


def read_index(path, class_list=None) -> DatasetIndex:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    entries = [
        IndexEntry(
            record_id=r["record_id"],
            source=r.get("source", ""),
            labels=frozenset(c for c in r.get("labels", "").split("|") if c),
            path=r.get("path", ""),
        )
        for r in rows
    ]
    return DatasetIndex(entries, list(class_list or []))


def write_index(index: DatasetIndex, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "source", "path", "labels"])
        for e in sorted(index.entries, key=lambda e: e.record_id):
            w.writerow([e.record_id, e.source, e.path, "|".join(sorted(e.labels))])


def filter_dataset(index: DatasetIndex, excluded_sources=DEFAULT_EXCLUDED_SOURCES) -> DatasetIndex:
    """Drop excluded sources and records without a scored label; keep only scored labels."""
    scored = set(index.class_list)
    excluded = set(excluded_sources)
    kept = []
    for e in index.entries:
        if e.source in excluded:
            continue
        labels = e.labels & scored
        if not labels:
            continue
        kept.append(IndexEntry(e.record_id, e.source, frozenset(labels), e.path))
    return DatasetIndex(kept, list(index.class_list))


def _stratify_matrix(Y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n, n_labels = Y.shape
    fold = np.full(n, -1, dtype=np.int64)
    desired_total = np.full(k, n / k)
    desired = np.tile(Y.sum(axis=0) / k, (k, 1))
    order = rng.permutation(n)
    while True:
        remaining = Y[fold < 0].sum(axis=0)
        candidates = np.flatnonzero(remaining > 0)
        if candidates.size == 0:
            break
        label = candidates[np.argmin(remaining[candidates])]
        for i in order:
            if fold[i] >= 0 or not Y[i, label]:
                continue
            want = desired[:, label]
            best = np.flatnonzero(want == want.max())
            if best.size > 1:
                cap = desired_total[best]
                best = best[cap == cap.max()]
            f = best[0]
            fold[i] = f
            desired[f] -= Y[i]
            desired_total[f] -= 1
    for i in order:
        if fold[i] < 0:
            f = int(np.argmax(desired_total))
            fold[i] = f
            desired_total[f] -= 1
    return fold


def _refine_by_swaps(Y: np.ndarray, fold: np.ndarray, k: int, max_iter: int = 5000) -> np.ndarray:
    """Pairwise record swaps between folds that lower sum(deviation**4).

    Fold sizes are unchanged. The greedy pass lets per-label deviations pile
    up on dense multilabel data; the quartic objective targets the worst class.
    """
    Yf = Y.astype(np.float64)
    ideal = Yf.sum(axis=0) / k
    fold = fold.copy()
    for _ in range(max_iter):
        D = np.stack([Yf[fold == f].sum(axis=0) for f in range(k)]) - ideal
        best_gain, best_swap = -1e-9, None
        for a in range(k):
            ia = np.flatnonzero(fold == a)
            for b in range(a + 1, k):
                ib = np.flatnonzero(fold == b)
                if ia.size == 0 or ib.size == 0:
                    continue
                delta = Yf[ib][None, :, :] - Yf[ia][:, None, :]
                base = (D[a] ** 4).sum() + (D[b] ** 4).sum()
                gain = ((D[a] + delta) ** 4).sum(-1) + ((D[b] - delta) ** 4).sum(-1) - base
                i, j = np.unravel_index(np.argmin(gain), gain.shape)
                if gain[i, j] < best_gain:
                    best_gain, best_swap = gain[i, j], (ia[i], ib[j], a, b)
        if best_swap is None:
            break
        i, j, a, b = best_swap
        fold[i], fold[j] = b, a
    return fold


def iterative_stratify(index: DatasetIndex, k: int = 5, seed: int = 0, refine: bool = True) -> dict:
    """Assign each record to one of ``k`` folds, balancing every label.

    The rarest remaining label is handled first; each of its records goes to
    the fold that still wants the most of that label, then the fold with the
    most spare capacity, then the lowest fold id. ``seed`` fixes the order in
    which records of a label are visited. With ``refine`` the greedy result
    is polished by fold-size-preserving swaps.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if len(index) == 0:
        raise ValueError("cannot stratify an empty index")
    if k > len(index):
        raise ValueError(f"k={k} exceeds the number of records ({len(index)})")
    # work in record-id order so the result does not depend on entry order
    order = np.argsort(index.record_ids, kind="stable")
    Y = index.label_matrix()[order]
    folds = _stratify_matrix(Y, k, np.random.default_rng(seed))
    if refine:
        folds = _refine_by_swaps(Y, folds, k)
    return {index.entries[i].record_id: int(f) for i, f in zip(order, folds)}


def nested_split(fold_of: dict, test_fold: int, val_fold: int, k: int | None = None):
    """Split into (train, val, test) record-id lists; every other fold trains."""
    if test_fold == val_fold:
        raise ValueError(f"test_fold and val_fold must differ, both are {test_fold}")
    k = k if k is not None else max(fold_of.values()) + 1
    for name, f in (("test_fold", test_fold), ("val_fold", val_fold)):
        if not 0 <= f < k:
            raise ValueError(f"{name}={f} outside [0, {k})")
    train, val, test = [], [], []
    for rid in sorted(fold_of):
        f = fold_of[rid]
        (test if f == test_fold else val if f == val_fold else train).append(rid)
    return train, val, test


def save_folds(fold_of: dict, path, seed: int, k: int):
    payload = {"seed": seed, "k": k, "fold_of": dict(sorted(fold_of.items()))}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_folds(path):
    data = json.loads(Path(path).read_text())
    return data["fold_of"], data["k"], data["seed"]


class IterativeStratifiedKFold:
    """Cross-validator over a multilabel indicator matrix, sklearn splitter style."""

    def __init__(self, n_splits=5, random_state=0, refine=True):
        self.n_splits = n_splits
        self.random_state = random_state
        self.refine = refine

    def get_n_splits(self, X=None, y=None, groups=None):
        return self.n_splits

    def split(self, X, y, groups=None):
        Y = np.asarray(y, dtype=bool)
        if Y.ndim != 2:
            raise ValueError("y must be a 2-D label indicator matrix")
        if self.n_splits > Y.shape[0]:
            raise ValueError(f"n_splits={self.n_splits} exceeds the number of samples ({Y.shape[0]})")
        folds = _stratify_matrix(Y, self.n_splits, np.random.default_rng(self.random_state))
        if self.refine:
            folds = _refine_by_swaps(Y, folds, self.n_splits)
        idx = np.arange(Y.shape[0])
        for f in range(self.n_splits):
            yield idx[folds != f], idx[folds == f]
