"""Series ingestion, synthetic corpora, splits and padded batches."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .optim import make_rng

SYNTHETIC_KINDS = ("sine", "mixed-freq sine", "scale-shifted sine", "drop-masked sine")
CSV_HEADER = ["series_id", "channel", "time", "value"]


class DataError(ValueError):
    """Malformed input file or series."""


@dataclass
class IrregularSeries:
    series_id: str
    channel: str
    times: np.ndarray
    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if not (len(self.times) == len(self.values) == len(self.observed)):
            raise DataError(f"{self.key}: times/values/observed lengths differ")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise DataError(f"{self.key}: timestamps must be strictly increasing")

    @property
    def key(self) -> str:
        return f"{self.series_id}/{self.channel}"

    def __len__(self) -> int:
        return len(self.times)

    def slice(self, start: int, stop: int) -> IrregularSeries:
        return IrregularSeries(self.series_id, self.channel, self.times[start:stop],
                               self.values[start:stop], self.observed[start:stop])


@dataclass
class DatasetManifest:
    dataset_name: str = "dataset"
    time_unit_seconds: float | None = None
    channel_stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    split_seed: int = 0
    splits: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"dataset_name": self.dataset_name,
               "time_unit_seconds": self.time_unit_seconds,
               "split_seed": self.split_seed}
        if self.channel_stats:
            out["channels"] = {ch: {"mean": float(m), "std": float(s)}
                               for ch, (m, s) in sorted(self.channel_stats.items())}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> DatasetManifest:
        known = {"dataset_name", "time_unit_seconds", "split_seed", "channels"}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown manifest keys: {sorted(unknown)}")
        stats = {ch: (float(v["mean"]), float(v["std"]))
                 for ch, v in (raw.get("channels") or {}).items()}
        unit = raw.get("time_unit_seconds")
        if unit is not None and float(unit) <= 0:
            raise DataError("time_unit_seconds must be positive")
        return cls(dataset_name=str(raw.get("dataset_name", "dataset")),
                   time_unit_seconds=None if unit is None else float(unit),
                   channel_stats=stats, split_seed=int(raw.get("split_seed", 0)))


def load_manifest(path: str | Path) -> DatasetManifest:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return DatasetManifest.from_dict(raw)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(manifest.to_dict(), fh, sort_keys=True)


@dataclass
class Dataset:
    series: list[IrregularSeries]
    manifest: DatasetManifest

    @property
    def name(self) -> str:
        return self.manifest.dataset_name

    def split(self, name: str) -> list[IrregularSeries]:
        if not self.manifest.splits:
            assign_splits(self)
        return [s for s in self.series if self.manifest.splits[s.series_id] == name]


def min_positive_gap(series: Iterable[IrregularSeries]) -> float:
    best = math.inf
    for s in series:
        if len(s) > 1:
            best = min(best, float(np.min(np.diff(s.times))))
    if not math.isfinite(best):
        raise DataError("cannot infer a time unit: no series has two timestamps")
    return best


def load_csv(path: str | Path, manifest: DatasetManifest | None = None) -> Dataset:
    """Read the ``series_id,channel,time,value`` format into univariate series.

    An empty ``value`` keeps the timestamp with ``observed=False``.
    """
    groups: dict[tuple[str, str], list[tuple[float, float, bool]]] = {}
    order: list[tuple[str, str]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}: row {lineno}: expected 4 fields, got {len(row)}")
            sid, channel, t_raw, v_raw = (c.strip() for c in row)
            try:
                t = float(t_raw)
                v = float(v_raw) if v_raw else float("nan")
            except ValueError:
                raise DataError(f"{path}: row {lineno}: unparseable row {row!r}") from None
            if not math.isfinite(t):
                raise DataError(f"{path}: row {lineno}: non-finite time")
            key = (sid, channel)
            rows = groups.get(key)
            if rows is None:
                rows = groups[key] = []
                order.append(key)
            elif t <= rows[-1][0]:
                raise DataError(f"{path}: row {lineno}: time {t} not increasing within {sid}/{channel}")
            rows.append((t, v, bool(v_raw) and math.isfinite(v)))
    series = []
    for sid, channel in order:
        rows = groups[(sid, channel)]
        times = np.array([r[0] for r in rows])
        values = np.array([r[1] if r[2] else 0.0 for r in rows])
        observed = np.array([r[2] for r in rows])
        series.append(IrregularSeries(sid, channel, times, values, observed))
    manifest = manifest or DatasetManifest(dataset_name=Path(path).stem)
    if manifest.time_unit_seconds is None:
        manifest.time_unit_seconds = min_positive_gap(series)
    return Dataset(series, manifest)


def write_csv(series: Sequence[IrregularSeries], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in series:
            for t, v, ok in zip(s.times, s.values, s.observed):
                writer.writerow([s.series_id, s.channel, repr(float(t)), repr(float(v)) if ok else ""])


# -- splits ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    context_fraction: float = 0.8
    horizon_fraction: float = 0.2
    ratios: tuple[int, int, int] = (8, 1, 1)

    def __post_init__(self):
        if abs(self.context_fraction + self.horizon_fraction - 1.0) > 1e-12:
            raise ValueError("context and horizon fractions must sum to 1")


def _split_key(seed: int, series_id: str) -> str:
    return hashlib.sha256(f"{seed}:{series_id}".encode()).hexdigest()


def assign_splits(dataset: Dataset, spec: SplitSpec = SplitSpec()) -> dict[str, str]:
    """Partition series ids into train/val/test by ``spec.ratios``.

    Ids are ranked by a hash of (split_seed, series_id), so the assignment is
    reproducible and independent of file order.
    """
    ids = sorted({s.series_id for s in dataset.series},
                 key=lambda sid: _split_key(dataset.manifest.split_seed, sid))
    n = len(ids)
    total = sum(spec.ratios)
    n_train = int(math.floor(n * spec.ratios[0] / total))
    n_val = int(math.floor(n * spec.ratios[1] / total))
    if n >= 3:
        n_val = max(n_val, 1)
        n_train = min(n_train, n - n_val - 1)
    splits = {}
    for rank, sid in enumerate(ids):
        splits[sid] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    dataset.manifest.splits = splits
    return splits


def split_context_horizon(series: IrregularSeries, spec: SplitSpec = SplitSpec()
                          ) -> tuple[IrregularSeries, IrregularSeries]:
    m = len(series)
    if m < 5:
        raise DataError(f"{series.key}: need at least 5 points to split, got {m}")
    n_ctx = int(math.floor(spec.context_fraction * m + 1e-9))
    if n_ctx >= m:
        raise DataError(f"{series.key}: empty horizon")
    return series.slice(0, n_ctx), series.slice(n_ctx, m)


# -- synthetic corpora ----------------------------------------------------

def make_synthetic(
    kind: str,
    n_series: int,
    length_range: tuple[int, int] = (60, 120),
    seed: int = 0,
    *,
    irregular: bool = True,
    time_unit: float = 1.0,
    mask_fraction: float | None = None,
    period_range: tuple[float, float] = (12.0, 36.0),
    amplitude_scale: float = 1.0,
    offset: float = 0.0,
    noise: float = 0.05,
    name: str | None = None,
) -> Dataset:
    """Deterministic sine-family corpus.

    Periods are in multiples of ``time_unit``. Irregular sampling draws gaps
    as ``time_unit * (1 + Exp(1))``; ``drop-masked sine`` hides exactly
    ``round(0.3 * M)`` points per series.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    lo, hi = length_range
    if not 2 <= lo <= hi:
        raise ValueError("length_range must satisfy 2 <= low <= high")
    if mask_fraction is None:
        mask_fraction = 0.3 if kind == "drop-masked sine" else 0.0
    rng = make_rng(seed)
    series = []
    for i in range(n_series):
        m = int(rng.integers(lo, hi + 1))
        if irregular:
            gaps = 1.0 + rng.exponential(1.0, size=m - 1)
        else:
            gaps = np.ones(m - 1)
        units = np.concatenate(([0.0], np.cumsum(gaps)))
        p_lo, p_hi = period_range
        period = rng.uniform(p_lo, p_hi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.5)
        x = amp * np.sin(2.0 * np.pi * units / period + phase)
        if kind == "mixed-freq sine":
            period2 = rng.uniform(2.5 * p_lo, 2.5 * p_hi)
            phase2 = rng.uniform(0.0, 2.0 * np.pi)
            amp2 = rng.uniform(0.5, 1.5)
            x = x + amp2 * np.sin(2.0 * np.pi * units / period2 + phase2)
        shift = 0.0
        if kind == "scale-shifted sine":
            amp_mult = 10.0 ** rng.uniform(-1.0, 2.0)
            shift = rng.uniform(-500.0, 500.0)
        else:
            amp_mult = 1.0
        x = x + noise * amp * rng.standard_normal(m)
        values = amplitude_scale * amp_mult * x + shift + offset
        observed = np.ones(m, dtype=bool)
        if mask_fraction > 0:
            n_drop = int(round(mask_fraction * m))
            observed[rng.choice(m, size=n_drop, replace=False)] = False
        values = np.where(observed, values, 0.0)
        series.append(IrregularSeries(f"{kind.replace(' ', '-')}-{i:05d}", "value",
                                      units * time_unit, values, observed))
    manifest = DatasetManifest(dataset_name=name or f"synthetic-{kind.replace(' ', '-')}",
                               time_unit_seconds=float(time_unit), split_seed=seed)
    dataset = Dataset(series, manifest)
    assign_splits(dataset)
    return dataset


# -- batching -------------------------------------------------------------

@dataclass
class PaddedBatch:
    values: np.ndarray     # (B, T)
    times: np.ndarray      # (B, T)
    observed: np.ndarray   # (B, T) bool, False on padding
    valid: np.ndarray      # (B, T) bool, True on real timestamps
    index: np.ndarray      # positions of the batch members in the input list

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def pad_sequences(arrays: Sequence[np.ndarray], fill=0.0, dtype=np.float64) -> np.ndarray:
    width = max((len(a) for a in arrays), default=0)
    out = np.full((len(arrays), width), fill, dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = a
    return out


def batch(items: Sequence, max_batch: int) -> list[PaddedBatch]:
    """Right-pad consecutive groups of at most ``max_batch`` sequences.

    ``items`` need ``values``, ``times`` and ``observed`` arrays (raw series or
    normalized instances).
    """
    batches = []
    for start in range(0, len(items), max_batch):
        group = items[start:start + max_batch]
        values = pad_sequences([np.asarray(g.values) for g in group])
        times = pad_sequences([np.asarray(g.times) for g in group])
        observed = pad_sequences([np.asarray(g.observed) for g in group], False, bool)
        valid = pad_sequences([np.ones(len(g.values), bool) for g in group], False, bool)
        batches.append(PaddedBatch(values, times, observed, valid,
                                   np.arange(start, start + len(group))))
    return batches
