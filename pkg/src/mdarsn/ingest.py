"""Record ingestion and signal preprocessing.

Reads the WFDB subset used by the cardiology challenge data (format 16
``.hea``/``.dat`` pairs) plus a CSV fallback, and implements the
preprocessing chain applied to every recording::

    valid-lead mask -> NaN fill -> resample to 500 Hz -> 3-45 Hz FIR -> min-max

Every function here is pure; records can be processed in parallel.
"""

from __future__ import annotations

import io
import json
import math
import re
import zipfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .exceptions import (
    RecordParseError,
    TruncatedRecordError,
    UnsupportedFormatError,
)

NAN_SAMPLE = -32768
DEFAULT_GAIN = 200.0

# Record-name prefixes of the public challenge sources.
SOURCE_PREFIXES = (
    ("HR", "PTB-XL"),
    ("JS", "Chapman-Shaoxing-Ningbo"),
    ("A", "CPSC"),
    ("Q", "CPSC-Extra"),
    ("I", "StPetersburg"),
    ("S", "PTB"),
    ("E", "Georgia"),
)


def source_from_record_id(record_id: str) -> str:
    for prefix, name in SOURCE_PREFIXES:
        if record_id.startswith(prefix) and record_id[len(prefix):][:1].isdigit():
            return name
    return "unknown"


@dataclass
class EcgRecord:
    """One recording.

    ``signal`` is ``(n_leads, n_samples)`` in physical units (mV) and may
    contain NaN where the device stored the WFDB invalid-sample marker.
    """

    record_id: str
    signal: np.ndarray
    fs: float
    lead_names: list[str]
    labels: set[str] = field(default_factory=set)
    source: str = "unknown"

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64)
        if self.signal.ndim != 2:
            raise ValueError(f"signal must be 2-D (leads x samples), got {self.signal.ndim}-D")
        if self.signal.shape[0] != len(self.lead_names):
            raise ValueError(
                f"signal has {self.signal.shape[0]} rows but {len(self.lead_names)} lead names"
            )
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        self.labels = set(self.labels)

    @property
    def n_leads(self) -> int:
        return self.signal.shape[0]

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]


@dataclass(frozen=True)
class PreprocessConfig:
    target_fs: float = 500.0
    band_low: float = 3.0
    band_high: float = 45.0
    fir_taps: int = 1001
    norm_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if not 0 < self.band_low < self.band_high < self.target_fs / 2:
            raise ValueError(
                "need 0 < band_low < band_high < target_fs/2, got "
                f"{self.band_low}, {self.band_high}, {self.target_fs}"
            )
        if self.fir_taps < 1 or self.fir_taps % 2 == 0:
            raise ValueError(f"fir_taps must be a positive odd integer, got {self.fir_taps}")
        lo, hi = self.norm_range
        if not lo < hi:
            raise ValueError(f"norm_range must be increasing, got {self.norm_range}")


# ---------------------------------------------------------------------------
# WFDB subset
# ---------------------------------------------------------------------------

_GAIN_RE = re.compile(r"^(?P<gain>[-+0-9.eE]+)(\((?P<baseline>[-+0-9]+)\))?(/(?P<units>\S+))?$")


def _parse_signal_line(line: str, index: int):
    tokens = line.split()
    if len(tokens) < 2:
        raise RecordParseError(f"malformed signal line {index + 2}: {line!r}")
    fmt = tokens[1]
    if fmt != "16":
        raise UnsupportedFormatError(
            f"unsupported WFDB format {fmt!r} on line {index + 2}; only format 16 is read"
        )
    gain, baseline = DEFAULT_GAIN, None
    if len(tokens) > 2:
        m = _GAIN_RE.match(tokens[2])
        if m is None:
            raise RecordParseError(f"malformed gain field on line {index + 2}: {tokens[2]!r}")
        gain = float(m.group("gain")) or DEFAULT_GAIN
        if m.group("baseline") is not None:
            baseline = int(m.group("baseline"))
    try:
        adc_zero = int(tokens[4]) if len(tokens) > 4 else 0
    except ValueError:
        raise RecordParseError(f"malformed adc zero on line {index + 2}: {line!r}") from None
    if baseline is None:
        baseline = adc_zero
    name = " ".join(tokens[8:]) if len(tokens) > 8 else f"lead{index}"
    return gain, baseline, name


def parse_header(header_text: str) -> dict:
    """Parse a single-segment WFDB header into a plain dict."""
    lines = [ln.strip() for ln in header_text.splitlines()]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    comments = [ln.lstrip("#").strip() for ln in lines if ln.startswith("#")]
    if not body:
        raise RecordParseError("header is empty")
    first = body[0].split()
    if len(first) < 4:
        raise RecordParseError(f"malformed record line 1: {body[0]!r}")
    record_id = first[0]
    try:
        n_leads = int(first[1])
        fs = float(first[2].split("/")[0])
        n_samples = int(first[3])
    except ValueError:
        raise RecordParseError(f"malformed record line 1: {body[0]!r}") from None
    if n_leads < 0 or n_samples < 0 or fs <= 0:
        raise RecordParseError(f"malformed record line 1: {body[0]!r}")
    if len(body) - 1 != n_leads:
        raise RecordParseError(
            f"header declares {n_leads} signals but has {len(body) - 1} signal lines"
        )
    gains, baselines, names = [], [], []
    for i, line in enumerate(body[1:]):
        g, b, n = _parse_signal_line(line, i)
        gains.append(g)
        baselines.append(b)
        names.append(n)

    labels: set[str] = set()
    source = None
    for c in comments:
        key, _, value = c.partition(":")
        key = key.strip().lower()
        if key == "dx":
            labels = {code.strip() for code in value.split(",") if code.strip()}
        elif key == "source":
            source = value.strip()
    return {
        "record_id": record_id,
        "n_leads": n_leads,
        "fs": fs,
        "n_samples": n_samples,
        "gains": np.asarray(gains, dtype=np.float64),
        "baselines": np.asarray(baselines, dtype=np.float64),
        "lead_names": names,
        "labels": labels,
        "source": source or source_from_record_id(record_id),
    }


def parse_record(header_text: str, signal_bytes: bytes) -> EcgRecord:
    """Build an :class:`EcgRecord` from header text and raw format-16 bytes.

    Samples are little-endian int16, interleaved across leads. The raw value
    -32768 marks an invalid sample and becomes NaN.
    """
    hdr = parse_header(header_text)
    n_leads, n_samples = hdr["n_leads"], hdr["n_samples"]
    expected = 2 * n_leads * n_samples
    if len(signal_bytes) != expected:
        raise TruncatedRecordError(
            f"record {hdr['record_id']}: expected {expected} signal bytes, got {len(signal_bytes)}"
        )
    raw = np.frombuffer(signal_bytes, dtype="<i2").reshape(n_samples, n_leads).T
    physical = (raw.astype(np.float64) - hdr["baselines"][:, None]) / hdr["gains"][:, None]
    physical[raw == NAN_SAMPLE] = np.nan
    return EcgRecord(
        record_id=hdr["record_id"],
        signal=physical,
        fs=hdr["fs"],
        lead_names=hdr["lead_names"],
        labels=hdr["labels"],
        source=hdr["source"],
    )


def serialize_record(record: EcgRecord, gain: float = 1000.0, baseline: int = 0):
    """Inverse of :func:`parse_record`. Returns ``(header_text, signal_bytes)``.

    Physical values are quantized to ``round(x * gain) + baseline``; NaN is
    written as -32768.
    """
    sig = record.signal
    raw = np.round(sig * gain) + baseline
    nan = np.isnan(sig)
    raw[nan] = NAN_SAMPLE
    if np.any(raw[~nan] <= NAN_SAMPLE) or np.any(raw[~nan] > 32767):
        raise ValueError(f"record {record.record_id}: samples overflow int16 at gain {gain}")
    data = raw.astype("<i2").T.tobytes()
    fs = f"{record.fs:g}"
    lines = [f"{record.record_id} {record.n_leads} {fs} {record.n_samples}"]
    for name in record.lead_names:
        lines.append(f"{record.record_id}.dat 16 {gain:g}({baseline})/mV 16 0 0 0 0 {name}")
    lines.append("#Dx: " + ",".join(sorted(record.labels)))
    lines.append(f"#Source: {record.source}")
    return "\n".join(lines) + "\n", data


def write_record(record: EcgRecord, directory, gain: float = 1000.0) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header, data = serialize_record(record, gain=gain)
    hea = directory / f"{record.record_id}.hea"
    hea.write_text(header)
    (directory / f"{record.record_id}.dat").write_bytes(data)
    return hea


def read_csv_record(path, fs: float | None = None) -> EcgRecord:
    """Read the CSV fallback: header row of lead names, one row per sample.

    Optional leading ``# key: value`` lines supply ``fs``, ``Dx`` and
    ``Source``; the literal ``nan`` marks invalid samples.
    """
    path = Path(path)
    meta = {}
    with path.open() as fh:
        lines = fh.read().splitlines()
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        key, _, value = lines[start].lstrip("#").partition(":")
        meta[key.strip().lower()] = value.strip()
        start += 1
    if start >= len(lines):
        raise RecordParseError(f"{path}: missing lead-name header row")
    lead_names = [n.strip() for n in lines[start].split(",")]
    rows = [ln for ln in lines[start + 1:] if ln.strip()]
    try:
        data = np.array([[float(v) for v in ln.split(",")] for ln in rows], dtype=np.float64)
    except ValueError as exc:
        raise RecordParseError(f"{path}: {exc}") from None
    if data.size == 0:
        data = np.zeros((0, len(lead_names)))
    if data.shape[1] != len(lead_names):
        raise RecordParseError(f"{path}: rows have {data.shape[1]} columns, expected {len(lead_names)}")
    if fs is None:
        if "fs" not in meta:
            raise RecordParseError(f"{path}: sampling rate missing (add '# fs: <Hz>')")
        fs = float(meta["fs"])
    labels = {c.strip() for c in meta.get("dx", "").split(",") if c.strip()}
    return EcgRecord(
        record_id=path.stem,
        signal=data.T,
        fs=fs,
        lead_names=lead_names,
        labels=labels,
        source=meta.get("source") or source_from_record_id(path.stem),
    )


def read_record(path) -> EcgRecord:
    """Read ``<record>.hea`` (+ ``.dat``) or ``<record>.csv``."""
    path = Path(path)
    if path.suffix == ".csv":
        return read_csv_record(path)
    if path.suffix != ".hea":
        path = path.with_suffix(".hea")
    header = path.read_text()
    hdr_first = header.split(None, 1)[0] if header.strip() else path.stem
    dat = path.with_name(f"{hdr_first}.dat")
    if not dat.exists():
        dat = path.with_suffix(".dat")
    return parse_record(header, dat.read_bytes())


# ---------------------------------------------------------------------------
# DSP
# ---------------------------------------------------------------------------

def windowed_sinc_lowpass(cutoff: float, fs: float, taps: int) -> np.ndarray:
    """Hamming-windowed sinc lowpass with unit DC gain."""
    if taps % 2 == 0:
        raise ValueError(f"taps must be odd, got {taps}")
    n = np.arange(taps) - (taps - 1) / 2
    fc = cutoff / fs
    h = 2 * fc * np.sinc(2 * fc * n) * np.hamming(taps)
    return h / h.sum()


def _rational(fs_out: float, fs_in: float) -> Fraction:
    ratio = Fraction(fs_out).limit_denominator(10**6) / Fraction(fs_in).limit_denominator(10**6)
    return ratio.limit_denominator(1000)


def resample(signal_row, fs_in: float, fs_out: float) -> np.ndarray:
    """Polyphase rational resampling.

    The anti-aliasing kernel is a Hamming-windowed sinc cut at the lower of
    the two Nyquist rates, 96 input periods of the upsampled stream per side,
    with every polyphase branch scaled to unit DC gain so constants pass
    unchanged. The input is extended by odd reflection before filtering to
    suppress edge transients. Output length is ``round(n * fs_out / fs_in)``.
    """
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError(f"sampling rates must be positive, got {fs_in} -> {fs_out}")
    x = np.asarray(signal_row, dtype=np.float64)
    n = x.shape[-1]
    if fs_in == fs_out:
        return x.copy()
    n_out = int(round(n * fs_out / fs_in))
    if n == 0:
        return np.zeros(0)
    ratio = _rational(fs_out, fs_in)
    up, down = ratio.numerator, ratio.denominator
    rate = max(up, down)
    taps = 2 * 96 * rate + 1
    kernel = windowed_sinc_lowpass(0.5 / rate, 1.0, taps)
    for phase in range(up):
        kernel[phase::up] /= kernel[phase::up].sum() * up
    reach = math.ceil((taps // 2) / up) + 1
    pad = down * math.ceil(reach / down)
    if n > 1:
        padded = np.pad(x, pad, mode="reflect", reflect_type="odd")
    else:
        padded = np.pad(x, pad, mode="edge")
    y = sps.resample_poly(padded, up, down, window=kernel)
    start = pad * up // down
    y = y[start:start + n_out]
    if y.shape[-1] < n_out:
        y = np.concatenate([y, np.full(n_out - y.shape[-1], y[-1] if y.size else 0.0)])
    return y


def design_bandpass(cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Linear-phase windowed-sinc bandpass: difference of two lowpasses.

    Both lowpasses have unit DC gain, so the band edges sit at their -6 dB
    points and the coefficients sum to zero.
    """
    if cfg.fir_taps % 2 == 0:
        raise ValueError(f"fir_taps must be odd, got {cfg.fir_taps}")
    hi = windowed_sinc_lowpass(cfg.band_high, cfg.target_fs, cfg.fir_taps)
    lo = windowed_sinc_lowpass(cfg.band_low, cfg.target_fs, cfg.fir_taps)
    h = hi - lo
    # exact symmetry regardless of rounding in the sinc evaluation
    return 0.5 * (h + h[::-1])


def apply_filter(signal_row, coeffs) -> np.ndarray:
    """Zero-padded convolution, shifted by the group delay so output aligns with input."""
    x = np.asarray(signal_row, dtype=np.float64)
    h = np.asarray(coeffs, dtype=np.float64)
    n = x.shape[-1]
    if n == 0:
        return x.copy()
    full = sps.oaconvolve(x, h, mode="full")
    delay = (len(h) - 1) // 2
    return full[delay:delay + n]


def minmax_normalize(signal_row, out_range=(-1.0, 1.0)) -> np.ndarray:
    x = np.asarray(signal_row, dtype=np.float64)
    lo, hi = out_range
    finite = x[~np.isnan(x)]
    if finite.size == 0:
        return x.copy()
    xmin, xmax = finite.min(), finite.max()
    if xmax == xmin:
        out = np.full_like(x, (lo + hi) / 2)
        out[np.isnan(x)] = np.nan
        return out
    return (hi - lo) * (x - xmin) / (xmax - xmin) + lo


def compute_valid_mask(signal) -> np.ndarray:
    """``True`` for every lead without a single NaN sample."""
    return ~np.isnan(np.asarray(signal, dtype=np.float64)).any(axis=-1)


def preprocess(record: EcgRecord, cfg: PreprocessConfig = PreprocessConfig()):
    """Run the full chain on one record. Returns ``(record, mask)``.

    The mask is taken from the raw signal before NaNs are zero-filled.
    """
    mask = compute_valid_mask(record.signal)
    filled = np.nan_to_num(record.signal, nan=0.0)
    coeffs = design_bandpass(cfg)
    rows = []
    for row in filled:
        y = resample(row, record.fs, cfg.target_fs)
        y = apply_filter(y, coeffs)
        rows.append(minmax_normalize(y, cfg.norm_range))
    n_out = int(round(record.n_samples * cfg.target_fs / record.fs))
    signal = np.vstack(rows) if rows else np.zeros((0, n_out))
    out = EcgRecord(
        record_id=record.record_id,
        signal=signal,
        fs=cfg.target_fs,
        lead_names=list(record.lead_names),
        labels=set(record.labels),
        source=record.source,
    )
    return out, mask


# ---------------------------------------------------------------------------
# Preprocessed container
# ---------------------------------------------------------------------------

_FIXED_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def save_preprocessed(record: EcgRecord, mask, directory) -> Path:
    """Write ``<id>.npz`` (one float32 LE array per lead) and ``<id>.json``.

    The zip entries carry a fixed timestamp so reruns are byte-identical.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{record.record_id}.npz"
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, name in enumerate(record.lead_names):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, record.signal[i].astype("<f4"), allow_pickle=False)
            info = zipfile.ZipInfo(f"{i:02d}_{name}.npy", date_time=_FIXED_ZIP_TIME)
            zf.writestr(info, buf.getvalue())
    sidecar = {
        "record_id": record.record_id,
        "fs": record.fs,
        "lead_names": list(record.lead_names),
        "labels": sorted(record.labels),
        "mask": [bool(m) for m in mask],
        "source": record.source,
    }
    (directory / f"{record.record_id}.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def load_preprocessed(path):
    """Inverse of :func:`save_preprocessed`. Returns ``(record, mask)``."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with np.load(path.with_suffix(".npz"), allow_pickle=False) as npz:
        names = sorted(npz.files)
        rows = [npz[n].astype(np.float64) for n in names]
    n = len(meta["lead_names"])
    if len(rows) != n:
        raise RecordParseError(f"{path}: container holds {len(rows)} leads, sidecar lists {n}")
    signal = np.vstack(rows) if rows else np.zeros((0, 0))
    record = EcgRecord(
        record_id=meta["record_id"],
        signal=signal,
        fs=meta["fs"],
        lead_names=meta["lead_names"],
        labels=set(meta["labels"]),
        source=meta["source"],
    )
    return record, np.asarray(meta["mask"], dtype=bool)


def n_window_samples(window_seconds: float, fs: float) -> int:
    return int(math.floor(window_seconds * fs + 0.5))
