"""Training-time augmentation: random crop with right zero-padding and random lead dropout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import n_window_samples


@dataclass(frozen=True)
class AugmentConfig:
    window_seconds: float = 15.0
    min_window_fraction: float = 0.5
    lead_dropout_prob: float = 0.1
    seed: int = 0
    max_dropout_retries: int = 10

    def __post_init__(self):
        if not 0 < self.min_window_fraction <= 1:
            raise ValueError(f"min_window_fraction must be in (0, 1], got {self.min_window_fraction}")
        if not 0 <= self.lead_dropout_prob < 1:
            raise ValueError(f"lead_dropout_prob must be in [0, 1), got {self.lead_dropout_prob}")
        if self.window_seconds <= 0:
            raise ValueError(f"window_seconds must be positive, got {self.window_seconds}")


def random_crop_pad(signal, fs, cfg: AugmentConfig, rng: np.random.Generator,
                    window_fraction=None) -> np.ndarray:
    """Copy a random window of the record and zero-pad it on the right to ``T * fs``.

    The window length is ``round(U * T * fs)`` with ``U ~ Uniform[min_window_fraction, 1]``;
    ``window_fraction`` pins ``U`` (used by tests). Records shorter than the
    window are copied whole.
    """
    signal = np.asarray(signal)
    if signal.ndim != 2 or signal.shape[1] == 0:
        raise ValueError("signal must be a non-empty (n_leads, n_samples) matrix")
    target = n_window_samples(cfg.window_seconds, fs)
    u = rng.uniform(cfg.min_window_fraction, 1.0) if window_fraction is None else window_fraction
    length = min(int(round(u * target)), signal.shape[1], target)
    start = int(rng.integers(0, signal.shape[1] - length + 1))
    out = np.zeros((signal.shape[0], target), dtype=signal.dtype)
    out[:, :length] = signal[:, start:start + length]
    return out


def eval_window(signal, fs, window_seconds=15.0) -> np.ndarray:
    """First ``T`` seconds of the record, zero-padded on the right when shorter."""
    signal = np.asarray(signal)
    target = n_window_samples(window_seconds, fs)
    out = np.zeros((signal.shape[0], target), dtype=signal.dtype)
    length = min(target, signal.shape[1])
    out[:, :length] = signal[:, :length]
    return out


def random_lead_dropout(mask, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Independently switch off valid leads with probability ``p``.

    All-false draws are rejected; after ``max_dropout_retries`` rejections a
    single uniformly chosen originally-valid lead is kept.
    """
    mask = np.asarray(mask, dtype=bool)
    valid = np.flatnonzero(mask)
    if valid.size == 0:
        raise ValueError("mask has no valid lead")
    p = cfg.lead_dropout_prob
    if p == 0:
        return mask.copy()
    for _ in range(cfg.max_dropout_retries):
        out = mask & (rng.random(mask.shape) >= p)
        if out.any():
            return out
    out = np.zeros_like(mask)
    out[rng.choice(valid)] = True
    return out
