"""Synthetic WFDB corpora with learnable labels.

Each lead is a 1.2 Hz spike train (QRS surrogate) plus a 0.25 Hz drift plus
one sinusoid per assigned class at a class-specific frequency inside the
3-45 Hz band, so diagnoses are recoverable from signal content.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import EcgRecord, write_record

STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
REDUCED_LEADS = {
    12: STANDARD_LEADS,
    6: ("I", "II", "III", "aVR", "aVL", "aVF"),
    4: ("I", "II", "III", "V2"),
    3: ("I", "II", "V2"),
    2: ("I", "II"),
}


@dataclass(frozen=True)
class FixtureSpec:
    n_records: int = 32
    n_leads: int = 12
    fs_choices: tuple = (250, 500, 1000)
    duration_range: tuple = (10.0, 16.0)
    cardinality: dict = field(default_factory=lambda: {1: 0.6, 2: 0.3, 3: 0.1})
    nan_lead_prob: float = 0.0
    seed: int = 0
    classes: tuple = ()
    source: str = "Synthetic"
    prefix: str = "F"
    signature_amplitude: float = 0.4

    def __post_init__(self):
        if self.n_records < 1 or self.n_leads < 1:
            raise ValueError("n_records and n_leads must be positive")
        if not 0 <= self.nan_lead_prob <= 1:
            raise ValueError(f"nan_lead_prob must be in [0, 1], got {self.nan_lead_prob}")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad duration_range {self.duration_range}")
        probs = np.asarray(list(self.cardinality.values()), dtype=float)
        if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise ValueError("cardinality probabilities must be non-negative and sum to 1")


def class_frequency(class_index: int, n_classes: int) -> float:
    """Signature frequency for a class, spread over 5-40 Hz."""
    if n_classes == 1:
        return 10.0
    return 5.0 + 35.0 * class_index / (n_classes - 1)


def lead_names(n_leads: int) -> list:
    if n_leads in REDUCED_LEADS:
        return list(REDUCED_LEADS[n_leads])
    return [f"L{i}" for i in range(n_leads)]


def synth_signal(label_idx, n_classes, n_leads, fs, n_samples, rng, amplitude=0.4) -> np.ndarray:
    t = np.arange(n_samples) / fs
    period = 1 / 1.2
    phase = rng.uniform(0, period)
    beat = ((t + phase) % period) - period / 2
    spikes = np.exp(-0.5 * (beat / 0.012) ** 2)
    drift = 0.3 * np.sin(2 * np.pi * 0.25 * t + rng.uniform(0, 2 * np.pi))
    out = np.empty((n_leads, n_samples))
    for lead in range(n_leads):
        x = rng.uniform(0.6, 1.2) * spikes + drift
        for c in label_idx:
            f = class_frequency(c, n_classes)
            x = x + amplitude * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        out[lead] = x + 0.01 * rng.standard_normal(n_samples)
    return out


def generate_records(spec: FixtureSpec, classes) -> list:
    classes = list(spec.classes or classes)
    rng = np.random.default_rng(spec.seed)
    sizes = list(spec.cardinality.keys())
    probs = np.asarray(list(spec.cardinality.values()), dtype=float)
    probs = probs / probs.sum()
    records = []
    width = max(4, len(str(spec.n_records)))
    for r in range(spec.n_records):
        fs = float(rng.choice(spec.fs_choices))
        n = int(round(rng.uniform(*spec.duration_range) * fs))
        k = min(int(rng.choice(sizes, p=probs)), len(classes))
        label_idx = sorted(rng.choice(len(classes), size=k, replace=False).tolist())
        signal = synth_signal(label_idx, len(classes), spec.n_leads, fs, n, rng,
                              spec.signature_amplitude)
        for lead in range(spec.n_leads):
            if rng.random() < spec.nan_lead_prob:
                length = int(rng.integers(1, max(2, n // 10)))
                start = int(rng.integers(0, n - length + 1))
                signal[lead, start:start + length] = np.nan
        records.append(EcgRecord(
            record_id=f"{spec.prefix}{r:0{width}d}",
            signal=signal,
            fs=fs,
            lead_names=lead_names(spec.n_leads),
            labels={classes[i] for i in label_idx},
            source=spec.source,
        ))
    return records


def write_fixtures(spec: FixtureSpec, out_dir, classes) -> list:
    out_dir = Path(out_dir)
    paths = []
    for rec in generate_records(spec, classes):
        paths.append(write_record(rec, out_dir, gain=1000.0))
    return paths
