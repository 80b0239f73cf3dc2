"""Per-unit time series: ingestion, row cleaning, percentile normalization, splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class UnitDataset:
    unit_id: str
    timestamps: np.ndarray
    channels: np.ndarray
    channel_names: tuple

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 2:
            raise DataError(f"{self.unit_id}: channels must be 2-d, got shape {ch.shape}")
        ts = np.asarray(self.timestamps)
        if len(ts) != len(ch):
            raise DataError(f"{self.unit_id}: {len(ts)} timestamps for {len(ch)} rows")
        if ch.shape[1] != len(self.channel_names):
            raise DataError(f"{self.unit_id}: {ch.shape[1]} columns but {len(self.channel_names)} names")
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    def __len__(self) -> int:
        return len(self.channels)

    @property
    def time_indexed(self) -> bool:
        return np.issubdtype(self.timestamps.dtype, np.datetime64)

    def take(self, rows) -> "UnitDataset":
        rows = np.asarray(rows, dtype=np.intp)
        return replace(self, timestamps=self.timestamps[rows], channels=self.channels[rows])

    def select(self, names) -> "UnitDataset":
        missing = [n for n in names if n not in self.channel_names]
        if missing:
            raise DataError(f"{self.unit_id}: missing channels {missing}")
        cols = [self.channel_names.index(n) for n in names]
        return replace(self, channels=self.channels[:, cols], channel_names=tuple(names))


def from_array(unit_id: str, values, channel_names=None, timestamps=None) -> UnitDataset:
    values = np.asarray(values, dtype=np.float64)
    if channel_names is None:
        channel_names = [f"ch{i:02d}" for i in range(values.shape[1])]
    if timestamps is None:
        timestamps = np.arange(len(values))
    return UnitDataset(unit_id, np.asarray(timestamps), values, tuple(channel_names))


# ---------------------------------------------------------------------- cleaning
def clean(raw: UnitDataset) -> UnitDataset:
    """Drop every row holding a missing value or an exact zero in any channel."""
    ch = raw.channels
    keep = np.all(np.isfinite(ch) & (ch != 0.0), axis=1)
    if not keep.any():
        raise DataError(f"{raw.unit_id}: cleaning removed every row")
    if keep.all():
        return raw
    return raw.take(np.flatnonzero(keep))


# ----------------------------------------------------------------- normalization
@dataclass(frozen=True)
class NormalizationParams:
    channel_names: tuple
    p1: np.ndarray
    p99: np.ndarray

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "p1", "p99"])
            for name, lo, hi in zip(self.channel_names, self.p1, self.p99):
                w.writerow([name, repr(float(lo)), repr(float(hi))])

    @classmethod
    def load(cls, path) -> "NormalizationParams":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["channel", "p1", "p99"]:
            raise DataError(f"{path}: not a normalization parameter file")
        body = rows[1:]
        return cls(tuple(r[0] for r in body),
                   np.array([float(r[1]) for r in body]),
                   np.array([float(r[2]) for r in body]))


def fit_normalization(*train: UnitDataset) -> NormalizationParams:
    """Per-channel 1st and 99th percentiles (linear interpolation).

    Several datasets may be passed for a pooled fit; they must share channels.
    """
    if not train:
        raise DataError("no data to fit normalization on")
    names = train[0].channel_names
    for d in train[1:]:
        if d.channel_names != names:
            raise DataError(f"{d.unit_id}: channel names differ from {train[0].unit_id}")
    values = np.concatenate([d.channels for d in train], axis=0)
    if len(values) == 0:
        raise DataError("no rows to fit normalization on")
    p1, p99 = np.percentile(values, [1.0, 99.0], axis=0)
    const = [n for n, lo, hi in zip(names, p1, p99) if not hi > lo]
    if const:
        raise DataError(f"constant channels cannot be normalized: {const}")
    return NormalizationParams(names, p1, p99)


def normalize_array(values: np.ndarray, params: NormalizationParams) -> np.ndarray:
    return 2.0 * (values - params.p1) / (params.p99 - params.p1) - 1.0


def apply_normalization(data: UnitDataset, params: NormalizationParams) -> UnitDataset:
    """Map each channel affinely so that its p1 goes to -1 and its p99 to +1."""
    unknown = [n for n in data.channel_names if n not in params.channel_names]
    if unknown:
        raise DataError(f"{data.unit_id}: no normalization parameters for {unknown}")
    data = data.select(params.channel_names)
    return replace(data, channels=normalize_array(data.channels, params))


# ------------------------------------------------------------------------ splits
@dataclass(frozen=True)
class SplitSpec:
    """Train window and blackout are durations; sample counts when timestamps are integer indices."""

    train_window: object = None
    validation_fraction: float = 0.06
    blackout_window: object = None
    detection_time: object = None

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise DataError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")


@dataclass(frozen=True)
class UnitSplit:
    train: UnitDataset
    validation: UnitDataset
    healthy_test: UnitDataset
    faulty_test: UnitDataset
    indices: dict = field(default_factory=dict)


def _rows_before(ts: np.ndarray, bound) -> int:
    """Number of leading rows with timestamp strictly before ``bound``."""
    return int(np.searchsorted(ts, bound, side="left"))


def split(unit: UnitDataset, spec: SplitSpec) -> UnitSplit:
    """Chronological train / validation / healthy-test / faulty-test segments.

    Windows are durations in timestamp units (``np.timedelta64`` for datetime
    stamps, sample counts for integer stamps); ``train_window=None`` takes every
    row. The validation slice is the tail of the training window.
    """
    n = len(unit)
    ts = unit.timestamps
    if n == 0:
        raise DataError(f"{unit.unit_id}: empty dataset")
    if spec.train_window is None:
        n_train = n
    else:
        if unit.time_indexed and not isinstance(spec.train_window, np.timedelta64):
            raise DataError("datetime-stamped data needs a np.timedelta64 train_window")
        spacing = np.median(np.diff(ts)) if n > 1 else ts[0] - ts[0]
        if spec.train_window > (ts[-1] - ts[0]) + spacing:
            raise DataError(f"{unit.unit_id}: training window exceeds the data span")
        n_train = _rows_before(ts, ts[0] + spec.train_window)
    n_val = max(1, int(round(n_train * spec.validation_fraction)))
    if n_val >= n_train:
        raise DataError(f"{unit.unit_id}: training window too short for a validation slice")

    healthy_end = n
    faulty_start = n
    if spec.detection_time is not None:
        faulty_start = _rows_before(ts, spec.detection_time)
        if faulty_start < n_train:
            raise DataError(f"{unit.unit_id}: detection time lies inside the training window")
        if spec.blackout_window is None:
            healthy_end = faulty_start
        else:
            healthy_end = max(n_train, _rows_before(ts, spec.detection_time - spec.blackout_window))

    idx = {
        "train": np.arange(0, n_train - n_val),
        "validation": np.arange(n_train - n_val, n_train),
        "healthy_test": np.arange(n_train, healthy_end),
        "faulty_test": np.arange(faulty_start, n),
    }
    return UnitSplit(*(unit.take(idx[k]) for k in ("train", "validation", "healthy_test", "faulty_test")),
                     indices=idx)


# --------------------------------------------------------------------------- CSV
def _parse_timestamps(raw: list) -> np.ndarray:
    try:
        return np.array([int(v) for v in raw], dtype=np.int64)
    except ValueError:
        pass
    try:
        return np.array(raw, dtype="datetime64[s]")
    except ValueError as exc:
        raise DataError(f"unparseable timestamp column: {exc}") from exc


def read_csv(path, unit_id: str | None = None) -> UnitDataset:
    """Header of channel names, optional leading ``timestamp`` column, empty field = missing."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    has_ts = bool(header) and header[0] == "timestamp"
    names = header[1:] if has_ts else header
    width = len(header)
    values = np.empty((len(rows), len(names)))
    stamps = []
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: row {i + 2} has {len(r)} fields, expected {width}")
        if has_ts:
            stamps.append(r[0])
            r = r[1:]
        try:
            values[i] = [float(v) if v.strip() else np.nan for v in r]
        except ValueError as exc:
            raise DataError(f"{path}: row {i + 2}: {exc}") from exc
    timestamps = _parse_timestamps(stamps) if has_ts else np.arange(len(rows))
    return UnitDataset(unit_id or path.stem, timestamps, values, tuple(names))


def write_csv(data: UnitDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *data.channel_names])
        for t, row in zip(data.timestamps, data.channels):
            w.writerow([str(t), *("" if np.isnan(v) else repr(float(v)) for v in row)])
