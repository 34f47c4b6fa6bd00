"""Time-series sample containers, file ingestion and window/missing-data utilities.

All containers are immutable: numpy arrays are copied on construction and
flagged read-only, so operations never mutate their inputs.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, SchemaError, ValidationError

ANOMALY_KINDS = ("temporal", "spectral", "temporal_spectral")
DECIMATION_FACTORS = (2, 4, 8)


def _frozen(array, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TimeSeriesSample:
    """A C x T reflectance matrix labelled at a single anchor step."""

    values: np.ndarray
    band_names: tuple[str, ...]
    timestamps: np.ndarray
    anchor_index: int
    anchor_label: str
    sample_id: str

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        timestamps = _frozen(self.timestamps, np.int64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "band_names", tuple(str(b) for b in self.band_names))
        object.__setattr__(self, "anchor_index", int(self.anchor_index))
        object.__setattr__(self, "anchor_label", str(self.anchor_label))
        object.__setattr__(self, "sample_id", str(self.sample_id))
        if values.ndim != 2:
            raise ValidationError(f"{self.sample_id}: values must be a C x T matrix")
        n_bands, n_steps = values.shape
        if n_bands < 2:
            raise ValidationError(f"{self.sample_id}: need at least 2 bands, got {n_bands}")
        if len(self.band_names) != n_bands:
            raise ValidationError(
                f"{self.sample_id}: {len(self.band_names)} band names for {n_bands} rows"
            )
        if timestamps.shape != (n_steps,):
            raise ValidationError(f"{self.sample_id}: expected {n_steps} timestamps")
        if n_steps > 1 and np.any(np.diff(timestamps) <= 0):
            raise ValidationError(f"{self.sample_id}: timestamps must be strictly increasing")
        if not 0 <= self.anchor_index < n_steps:
            raise ValidationError(
                f"{self.sample_id}: anchor_index {self.anchor_index} outside [0, {n_steps})"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError(
                f"{self.sample_id}: non-finite values; interpolate missing entries first"
            )

    @property
    def n_bands(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "TimeSeriesSample":
        return replace(self, values=values)

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.band_names == other.band_names
            and self.anchor_index == other.anchor_index
            and self.anchor_label == other.anchor_label
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class Window:
    values: np.ndarray
    source_sample: str
    start_index: int

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ChangeEvent:
    """One scripted change over the half-open step interval [start, end)."""

    start: int
    end: int
    kind: str
    bands: tuple[int, ...]
    new_label: str

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ValidationError(f"unknown anomaly kind {self.kind!r}")
        if not 0 <= self.start < self.end:
            raise ValidationError(f"invalid event interval [{self.start}, {self.end})")
        object.__setattr__(self, "bands", tuple(int(b) for b in self.bands))

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "end": self.end,
            "kind": self.kind,
            "bands": list(self.bands),
            "new_label": self.new_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChangeEvent":
        return cls(int(d["start"]), int(d["end"]), str(d["kind"]), tuple(d["bands"]), str(d["new_label"]))


@dataclass(frozen=True)
class ChangeLog:
    events: tuple[ChangeEvent, ...] = ()

    def validate(self, n_steps: int, anchor_index: int | None = None) -> None:
        ordered = sorted(self.events, key=lambda e: e.start)
        for ev in ordered:
            if ev.end > n_steps:
                raise ValidationError(f"event [{ev.start}, {ev.end}) exceeds {n_steps} steps")
            if anchor_index is not None and ev.start <= anchor_index < ev.end:
                raise ValidationError(f"event [{ev.start}, {ev.end}) contains the anchor step")
        for a, b in zip(ordered, ordered[1:]):
            if b.start < a.end:
                raise ValidationError(f"overlapping events at steps {b.start}..{a.end}")

    def anomaly_flags(self, n_steps: int) -> np.ndarray:
        flags = np.zeros(n_steps, dtype=bool)
        for ev in self.events:
            flags[ev.start:ev.end] = True
        return flags

    def label_sequence(self, n_steps: int, anchor_label: str) -> list[str]:
        labels = [anchor_label] * n_steps
        for ev in self.events:
            for t in range(ev.start, min(ev.end, n_steps)):
                labels[t] = ev.new_label
        return labels


@dataclass(frozen=True)
class SampleSet:
    samples: tuple[TimeSeriesSample, ...]
    class_vocabulary: tuple[str, ...]
    change_logs: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_vocabulary", tuple(str(c) for c in self.class_vocabulary))
        object.__setattr__(self, "change_logs", dict(self.change_logs))
        if not self.samples:
            raise SchemaError("no samples found")
        bands = self.samples[0].band_names
        vocab = set(self.class_vocabulary)
        seen = set()
        for s in self.samples:
            if s.band_names != bands:
                raise SchemaError(
                    f"sample {s.sample_id} has bands {list(s.band_names)}, expected {list(bands)}"
                )
            if s.anchor_label not in vocab:
                raise SchemaError(f"sample {s.sample_id}: label {s.anchor_label!r} not in vocabulary")
            if s.sample_id in seen:
                raise SchemaError(f"duplicate sample_id {s.sample_id}")
            seen.add(s.sample_id)
        by_id = {s.sample_id: s for s in self.samples}
        for sid, log in self.change_logs.items():
            if sid not in by_id:
                raise SchemaError(f"change log for unknown sample {sid}")
            for ev in log.events:
                if ev.new_label not in vocab:
                    raise SchemaError(f"change log label {ev.new_label!r} not in vocabulary")
            log.validate(by_id[sid].n_steps)

    @property
    def band_names(self) -> tuple[str, ...]:
        return self.samples[0].band_names

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def get(self, sample_id: str) -> TimeSeriesSample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)

    def change_log(self, sample_id: str) -> ChangeLog:
        return self.change_logs.get(sample_id, ChangeLog())

    def map_samples(self, fn) -> "SampleSet":
        return replace(self, samples=tuple(fn(s) for s in self.samples))


# --------------------------------------------------------------------------- windows


def sliding_windows(sample: TimeSeriesSample, W: int, stride: int = 1) -> list[Window]:
    if W % 2:
        raise ValidationError("window length must be even")
    if W > sample.n_steps:
        raise ValidationError("sample shorter than window")
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    starts = range(0, sample.n_steps - W + 1, stride)
    return [Window(sample.values[:, s:s + W], sample.sample_id, s) for s in starts]


def window_starts(n_steps: int, W: int, stride: int, cover_end: bool = False) -> list[int]:
    """Start indices of a stride grid; ``cover_end`` appends a final window flush with the end."""
    starts = list(range(0, n_steps - W + 1, stride))
    if cover_end and starts[-1] + W < n_steps:
        starts.append(n_steps - W)
    return starts


# --------------------------------------------------------------------------- missing data


def interpolate_missing(sample: TimeSeriesSample, missing_mask: np.ndarray) -> TimeSeriesSample:
    mask = np.asarray(missing_mask, dtype=bool)
    if mask.shape != sample.values.shape:
        raise ValidationError(f"mask shape {mask.shape} != values shape {sample.values.shape}")
    values = np.array(sample.values, copy=True)
    x = sample.timestamps.astype(np.float64)
    for c in range(sample.n_bands):
        missing = mask[c]
        if not missing.any():
            continue
        if missing.all():
            raise ValidationError(f"band {sample.band_names[c]!r} is fully masked")
        observed = ~missing
        # np.interp holds the edge value outside the observed range.
        values[c, missing] = np.interp(x[missing], x[observed], values[c, observed])
    return sample.with_values(values)


def random_missing_mask(sample: TimeSeriesSample, ratio: float, seed: int) -> np.ndarray:
    """Mask floor(ratio*T) whole time steps uniformly at random, never the anchor."""
    if not 0.0 <= ratio < 1.0:
        raise ValidationError("missing ratio must be in [0, 1)")
    n_steps = sample.n_steps
    n_masked = int(math.floor(ratio * n_steps))
    candidates = np.delete(np.arange(n_steps), sample.anchor_index)
    if n_masked > candidates.size:
        raise ValidationError("cannot mask that many steps without masking the anchor")
    rng = np.random.default_rng(seed)
    steps = rng.choice(candidates, size=n_masked, replace=False)
    mask = np.zeros(sample.values.shape, dtype=bool)
    mask[:, steps] = True
    return mask


def decimate(sample: TimeSeriesSample, factor: int, min_length: int = 30) -> TimeSeriesSample:
    """Keep every ``factor``-th observation starting at index 0."""
    if factor not in DECIMATION_FACTORS:
        raise ValidationError(f"decimation factor must be one of {DECIMATION_FACTORS}")
    kept = np.arange(0, sample.n_steps, factor)
    if kept.size < min_length:
        raise ValidationError(
            f"decimated length {kept.size} below window length {min_length}"
        )
    anchor = min(int(math.floor(sample.anchor_index / factor + 0.5)), kept.size - 1)
    return TimeSeriesSample(
        values=sample.values[:, kept],
        band_names=sample.band_names,
        timestamps=sample.timestamps[kept],
        anchor_index=anchor,
        anchor_label=sample.anchor_label,
        sample_id=sample.sample_id,
    )


# --------------------------------------------------------------------------- normalization


@dataclass(frozen=True)
class MinMaxScaler:
    """Per-band min-max scaling fitted on training samples."""

    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, samples: Iterable[TimeSeriesSample]) -> "MinMaxScaler":
        stacked = np.concatenate([s.values for s in samples], axis=1)
        return cls(stacked.min(axis=1), stacked.max(axis=1))

    @property
    def scale(self) -> np.ndarray:
        span = np.asarray(self.maximum) - np.asarray(self.minimum)
        return np.where(span > 0, span, 1.0)

    def transform_values(self, values: np.ndarray) -> np.ndarray:
        return (values - np.asarray(self.minimum)[:, None]) / self.scale[:, None]

    def transform(self, sample: TimeSeriesSample) -> TimeSeriesSample:
        return sample.with_values(self.transform_values(sample.values))

    def transform_set(self, sample_set: SampleSet) -> SampleSet:
        return sample_set.map_samples(self.transform)

    def to_dict(self) -> dict:
        return {"minimum": np.asarray(self.minimum).tolist(), "maximum": np.asarray(self.maximum).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxScaler":
        return cls(np.asarray(d["minimum"], dtype=np.float64), np.asarray(d["maximum"], dtype=np.float64))


# --------------------------------------------------------------------------- file IO


def load_sample_set(path, format: str | None = None) -> SampleSet:
    """Load a CSV directory or a single JSON document.

    ``format`` is ``"csv_dir"`` or ``"single_json"``; inferred from ``path`` when omitted.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path} does not exist")
    if format is None:
        format = "csv_dir" if path.is_dir() else "single_json"
    if format == "csv_dir":
        return _load_csv_dir(path)
    if format == "single_json":
        return _load_json(path)
    raise ValidationError(f"unknown sample-set format {format!r}")


def save_sample_set(sample_set: SampleSet, path, format: str = "single_json") -> Path:
    path = Path(path)
    if format == "single_json":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(sample_set_to_dict(sample_set), indent=1) + "\n")
    elif format == "csv_dir":
        _save_csv_dir(sample_set, path)
    else:
        raise ValidationError(f"unknown sample-set format {format!r}")
    return path


def sample_set_to_dict(sample_set: SampleSet) -> dict:
    # float repr round-trips exactly, so JSON preserves values bit-for-bit
    out = {
        "class_vocabulary": list(sample_set.class_vocabulary),
        "samples": [
            {
                "sample_id": s.sample_id,
                "band_names": list(s.band_names),
                "timestamps": s.timestamps.tolist(),
                "values": s.values.tolist(),
                "anchor_index": s.anchor_index,
                "anchor_label": s.anchor_label,
            }
            for s in sample_set.samples
        ],
    }
    if sample_set.change_logs:
        out["change_logs"] = {
            sid: [ev.to_dict() for ev in log.events]
            for sid, log in sorted(sample_set.change_logs.items())
        }
    return out


def sample_set_from_dict(doc: dict, source: str = "<dict>") -> SampleSet:
    try:
        vocab = doc["class_vocabulary"]
        samples = []
        for i, s in enumerate(doc["samples"]):
            samples.append(
                TimeSeriesSample(
                    values=np.asarray(s["values"], dtype=np.float64),
                    band_names=s["band_names"],
                    timestamps=s["timestamps"],
                    anchor_index=s["anchor_index"],
                    anchor_label=s["anchor_label"],
                    sample_id=s.get("sample_id", f"sample_{i:04d}"),
                )
            )
        logs = {
            sid: ChangeLog(tuple(ChangeEvent.from_dict(e) for e in events))
            for sid, events in (doc.get("change_logs") or {}).items()
        }
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{source}: missing or malformed field {exc}") from exc
    return SampleSet(tuple(samples), tuple(vocab), logs)


def _load_json(path: Path) -> SampleSet:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return sample_set_from_dict(doc, str(path))


def _read_meta(path: Path) -> dict:
    meta = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    for key in ("sample_id", "anchor_index", "anchor_label"):
        if key not in meta:
            raise ParseError(f"{path}: missing key {key!r}")
    return meta


def _read_sample_csv(path: Path, meta: dict) -> TimeSeriesSample:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}:1: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[0] != "timestamp":
        raise ParseError(f"{path}:1: header must be 'timestamp,<band_1>,...,<band_C>'")
    timestamps, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            timestamps.append(int(row[0]))
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    try:
        anchor = int(meta["anchor_index"])
    except ValueError as exc:
        raise ParseError(f"{path}: anchor_index is not an integer") from exc
    return TimeSeriesSample(
        values=np.asarray(values, dtype=np.float64).T,
        band_names=header[1:],
        timestamps=timestamps,
        anchor_index=anchor,
        anchor_label=meta["anchor_label"],
        sample_id=meta["sample_id"],
    )


def _load_csv_dir(path: Path) -> SampleSet:
    files = sorted(path.glob("*.csv"))
    if not files:
        raise SchemaError("no samples found")
    samples = []
    for f in files:
        meta_path = f.with_suffix(".meta")
        if not meta_path.exists():
            raise ParseError(f"{f}: missing sidecar metadata {meta_path.name}")
        samples.append(_read_sample_csv(f, _read_meta(meta_path)))
    bands = samples[0].band_names
    for s in samples[1:]:
        if set(s.band_names) != set(bands):
            raise SchemaError(
                f"sample {s.sample_id} has bands {list(s.band_names)}, expected {list(bands)}"
            )
    # normalize band order to the first sample's header order
    samples = [_reorder_bands(s, bands) for s in samples]
    vocab_path = path / "class_vocabulary.txt"
    if vocab_path.exists():
        vocab = [ln.strip() for ln in vocab_path.read_text().splitlines() if ln.strip()]
    else:
        vocab = sorted({s.anchor_label for s in samples})
    logs = {}
    logs_path = path / "change_logs.json"
    if logs_path.exists():
        try:
            raw = json.loads(logs_path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{logs_path}:{exc.lineno}: {exc.msg}") from exc
        logs = {sid: ChangeLog(tuple(ChangeEvent.from_dict(e) for e in evs)) for sid, evs in raw.items()}
    return SampleSet(tuple(samples), tuple(vocab), logs)


def _reorder_bands(sample: TimeSeriesSample, bands: Sequence[str]) -> TimeSeriesSample:
    if sample.band_names == tuple(bands):
        return sample
    order = [sample.band_names.index(b) for b in bands]
    return replace(sample, values=sample.values[order], band_names=tuple(bands))


def _save_csv_dir(sample_set: SampleSet, path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    for s in sample_set.samples:
        with (path / f"{s.sample_id}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["timestamp", *s.band_names])
            for t in range(s.n_steps):
                writer.writerow([int(s.timestamps[t]), *(repr(float(v)) for v in s.values[:, t])])
        (path / f"{s.sample_id}.meta").write_text(
            f"sample_id={s.sample_id}\nanchor_index={s.anchor_index}\nanchor_label={s.anchor_label}\n"
        )
    (path / "class_vocabulary.txt").write_text("\n".join(sample_set.class_vocabulary) + "\n")
    if sample_set.change_logs:
        (path / "change_logs.json").write_text(
            json.dumps(
                {sid: [e.to_dict() for e in log.events] for sid, log in sorted(sample_set.change_logs.items())},
                indent=1,
            )
            + "\n"
        )
