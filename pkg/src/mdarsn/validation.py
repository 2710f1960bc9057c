"""Input checks shared by the estimator wrappers and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_signal_batch(X, n_leads: int | None = None) -> np.ndarray:
    """Validate a ``(n_records, n_leads, n_samples)`` float batch.

    NaN is rejected: records must be preprocessed (NaN zero-filled and the
    affected lead masked) before they reach the model.
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True,
                    ensure_2d=False, input_name="X")
    if X.ndim != 3:
        raise ValueError(f"X must be 3-D (n_records, n_leads, n_samples), got shape {X.shape}")
    if X.shape[0] == 0 or X.shape[2] == 0:
        raise ValueError(f"X has an empty axis: {X.shape}")
    if n_leads is not None and X.shape[1] != n_leads:
        raise ValueError(f"X has {X.shape[1]} leads, model expects {n_leads}")
    return X


def check_lead_mask(mask, n_records: int, n_leads: int) -> np.ndarray:
    """Validate a boolean ``(n_records, n_leads)`` mask; ``None`` means all leads valid."""
    if mask is None:
        return np.ones((n_records, n_leads), dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != (n_records, n_leads):
        raise ValueError(f"mask shape {mask.shape} does not match ({n_records}, {n_leads})")
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask must be boolean or 0/1")
        mask = mask.astype(bool)
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise ValueError(f"no valid leads in record(s) {empty[:5].tolist()}")
    return mask


def check_label_matrix(Y, n_records: int, n_classes: int | None = None) -> np.ndarray:
    """Validate a 0/1 ``(n_records, n_classes)`` multilabel indicator matrix."""
    Y = check_array(Y, dtype=None, ensure_2d=True, input_name="Y")
    if Y.shape[0] != n_records:
        raise ValueError(f"Y has {Y.shape[0]} rows, X has {n_records} records")
    if n_classes is not None and Y.shape[1] != n_classes:
        raise ValueError(f"Y has {Y.shape[1]} columns, expected {n_classes}")
    if Y.dtype != bool and not np.isin(Y, (0, 1)).all():
        raise ValueError("Y must be a 0/1 indicator matrix")
    return Y.astype(bool)


def check_probabilities(P) -> np.ndarray:
    P = check_array(P, dtype=np.float64, input_name="probabilities")
    if np.any(P < 0) or np.any(P > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return P
