"""Challenge score, macro average precision and probability thresholding."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NORMAL_CODE = "426783006"


@dataclass
class ScoreWeights:
    """Reward matrix ``W[i, j]`` for labelling class ``i`` as class ``j``."""

    W: np.ndarray
    normal_class_index: int
    classes: list[str] | None = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        n = self.W.shape[0]
        if self.W.shape != (n, n):
            raise ValueError(f"W must be square, got {self.W.shape}")
        if not np.all(np.diag(self.W) == 1.0):
            raise ValueError("W must have a unit diagonal")
        if np.any(self.W < 0) or np.any(self.W > 1):
            raise ValueError("W entries must lie in [0, 1]")
        if not 0 <= self.normal_class_index < n:
            raise ValueError(f"normal_class_index {self.normal_class_index} out of range for {n} classes")

    @classmethod
    def identity(cls, classes, normal_code=NORMAL_CODE):
        classes = list(classes)
        normal = classes.index(normal_code) if normal_code in classes else 0
        return cls(np.eye(len(classes)), normal, classes)


def load_weights(path, classes, normal_code=NORMAL_CODE) -> ScoreWeights:
    """Read a ``weights.csv`` whose header row and first column list class codes.

    Codes may be ``|``-joined equivalence groups; a row or column matches a
    configured class when that class is one of its codes. The order must
    match ``classes``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    header = [c.strip() for c in rows[0][1:]]
    row_codes = [r[0].strip() for r in rows[1:]]
    classes = list(classes)
    for axis, codes in (("column", header), ("row", row_codes)):
        if len(codes) != len(classes):
            raise ValueError(f"{path}: {len(codes)} {axis} codes but {len(classes)} classes configured")
        for code, expected in zip(codes, classes):
            if expected not in code.split("|"):
                raise ValueError(f"{path}: {axis} code {code!r} does not match configured class {expected!r}")
    W = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    normal = classes.index(normal_code) if normal_code in classes else 0
    return ScoreWeights(W, normal, classes)


def write_weights(weights: ScoreWeights, path, classes=None):
    classes = list(classes or weights.classes)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + classes)
        for code, row in zip(classes, weights.W):
            w.writerow([code] + [repr(float(v)) for v in row])


def modified_confusion(labels, predictions) -> np.ndarray:
    """``A[i, j]`` accumulates ``1 / |labels_r ∪ predictions_r|`` for every
    labelled class ``i`` and predicted class ``j`` of each record ``r``."""
    labels = np.asarray(labels, dtype=bool)
    predictions = np.asarray(predictions, dtype=bool)
    norm = np.maximum((labels | predictions).sum(axis=1), 1).astype(np.float64)
    return (labels / norm[:, None]).T.astype(np.float64) @ predictions.astype(np.float64)


def challenge_score(labels, predictions, weights: ScoreWeights) -> float:
    labels = np.asarray(labels, dtype=bool)
    predictions = np.asarray(predictions, dtype=bool)
    if labels.shape != predictions.shape:
        raise ValueError(f"labels {labels.shape} and predictions {predictions.shape} differ in shape")
    if labels.ndim != 2 or labels.shape[1] != weights.W.shape[0]:
        raise ValueError(
            f"expected (n_records, {weights.W.shape[0]}) matrices, got {labels.shape}"
        )
    W = weights.W
    observed = float(np.sum(W * modified_confusion(labels, predictions)))
    perfect = float(np.sum(W * modified_confusion(labels, labels)))
    normal = np.zeros_like(labels)
    normal[:, weights.normal_class_index] = True
    inactive = float(np.sum(W * modified_confusion(labels, normal)))
    if perfect == inactive:
        return 0.0
    return (observed - inactive) / (perfect - inactive)


def average_precision(y_true, scores) -> float:
    """Area under the precision/recall staircase; tied scores form one step."""
    y_true = np.asarray(y_true, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = y_true.sum()
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], y_true[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = tp[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def macro_average_precision(labels, probabilities) -> float:
    labels = np.asarray(labels, dtype=bool)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if labels.shape != probabilities.shape:
        raise ValueError(f"labels {labels.shape} and probabilities {probabilities.shape} differ in shape")
    present = np.flatnonzero(labels.sum(axis=0) > 0)
    if present.size == 0:
        raise ValueError("macro average precision undefined: no class has positives")
    return float(np.mean([average_precision(labels[:, j], probabilities[:, j]) for j in present]))


def per_class_average_precision(labels, probabilities) -> list:
    labels = np.asarray(labels, dtype=bool)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    return [
        average_precision(labels[:, j], probabilities[:, j]) if labels[:, j].any() else None
        for j in range(labels.shape[1])
    ]


def threshold(probabilities, t: float = 0.5) -> np.ndarray:
    """Binarize at ``p >= t``; an empty row gets its argmax switched on."""
    if not 0 < t < 1:
        raise ValueError(f"threshold must be in (0, 1), got {t}")
    probabilities = np.asarray(probabilities, dtype=np.float64)
    out = probabilities >= t
    empty = ~out.any(axis=1)
    if empty.any():
        rows = np.flatnonzero(empty)
        out[rows, probabilities[rows].argmax(axis=1)] = True
    return out
