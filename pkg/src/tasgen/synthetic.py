"""Ground-truthed synthetic scenarios: seasonal class templates plus scripted changes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ANOMALY_KINDS, ChangeEvent, ChangeLog, SampleSet, TimeSeriesSample
from .errors import ConfigError

DEFAULT_BANDS = ("Blue", "Green", "Red", "NIR", "SWIR1", "SWIR2")


@dataclass(frozen=True)
class ClassTemplate:
    """Per-band ``offset + trend*t/T + amplitude*sin(2*pi*t/period + phase)``.

    ``period`` overrides the scenario-wide seasonal period (e.g. double cropping).
    """

    name: str
    offset: tuple[float, ...]
    amplitude: tuple[float, ...]
    phase: tuple[float, ...]
    trend: tuple[float, ...] = ()
    period: float | None = None

    def seasonal(self, steps: np.ndarray, period: float) -> np.ndarray:
        period = self.period or period
        amp = np.asarray(self.amplitude)[:, None]
        ph = np.asarray(self.phase)[:, None]
        return amp * np.sin(2 * np.pi * steps[None, :] / period + ph)

    def base(self, steps: np.ndarray, n_steps: int) -> np.ndarray:
        trend = np.asarray(self.trend or [0.0] * len(self.offset))[:, None]
        return np.asarray(self.offset)[:, None] + trend * steps[None, :] / n_steps

    def render(self, steps: np.ndarray, n_steps: int, period: float) -> np.ndarray:
        return self.base(steps, n_steps) + self.seasonal(steps, period)


@dataclass(frozen=True)
class EventSpec:
    sample: int
    start: int
    end: int
    kind: str
    bands: tuple[int, ...] = ()
    new_label: str | None = None
    magnitude: float = 4.0
    phase_shift: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    bands: tuple[str, ...]
    steps: int
    classes: tuple[ClassTemplate, ...]
    noise_sigma: float
    events: tuple[EventSpec, ...] = ()
    seed: int = 0
    samples_per_class: int = 1
    spacing: int = 4
    period: float = 92.0
    anchor_range: tuple[int, int] = (10, 60)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        try:
            bands = d["bands"]
            if isinstance(bands, int):
                bands = DEFAULT_BANDS[:bands] if bands <= len(DEFAULT_BANDS) else [f"B{i + 1}" for i in range(bands)]
            n_bands = len(bands)
            classes = []
            for c in d["classes"]:
                tpl = ClassTemplate(
                    name=str(c["name"]),
                    offset=tuple(float(v) for v in c["offset"]),
                    amplitude=tuple(float(v) for v in c["amplitude"]),
                    phase=tuple(float(v) for v in c.get("phase", [0.0] * n_bands)),
                    trend=tuple(float(v) for v in c.get("trend", [])),
                    period=float(c["period"]) if c.get("period") else None,
                )
                for name in ("offset", "amplitude", "phase"):
                    if len(getattr(tpl, name)) != n_bands:
                        raise ConfigError(f"class {tpl.name}: {name} needs {n_bands} entries")
                if tpl.trend and len(tpl.trend) != n_bands:
                    raise ConfigError(f"class {tpl.name}: trend needs {n_bands} entries")
                classes.append(tpl)
            events = tuple(
                EventSpec(
                    sample=int(e["sample"]),
                    start=int(e["start"]),
                    end=int(e["end"]),
                    kind=str(e["kind"]),
                    bands=tuple(int(b) for b in e.get("bands", [])),
                    new_label=e.get("new_label"),
                    magnitude=float(e.get("magnitude", 4.0)),
                    phase_shift=float(e.get("phase_shift", 0.0)),
                )
                for e in d.get("events", [])
            )
            cfg = cls(
                bands=tuple(str(b) for b in bands),
                steps=int(d["steps"]),
                classes=tuple(classes),
                noise_sigma=float(d["noise_sigma"]),
                events=events,
                seed=int(d.get("seed", 0)),
                samples_per_class=int(d.get("samples_per_class", 1)),
                spacing=int(d.get("spacing", 4)),
                period=float(d.get("period", 92.0)),
                anchor_range=tuple(d.get("anchor_range", (10, 60))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid scenario config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "bands": list(self.bands),
            "steps": self.steps,
            "classes": [
                {
                    "name": c.name,
                    "offset": list(c.offset),
                    "amplitude": list(c.amplitude),
                    "phase": list(c.phase),
                    **({"trend": list(c.trend)} if c.trend else {}),
                    **({"period": c.period} if c.period else {}),
                }
                for c in self.classes
            ],
            "noise_sigma": self.noise_sigma,
            "events": [
                {
                    "sample": e.sample,
                    "start": e.start,
                    "end": e.end,
                    "kind": e.kind,
                    "bands": list(e.bands),
                    "new_label": e.new_label,
                    "magnitude": e.magnitude,
                    "phase_shift": e.phase_shift,
                }
                for e in self.events
            ],
            "seed": self.seed,
            "samples_per_class": self.samples_per_class,
            "spacing": self.spacing,
            "period": self.period,
            "anchor_range": list(self.anchor_range),
        }

    @property
    def n_samples(self) -> int:
        return self.samples_per_class * len(self.classes)

    def class_by_name(self, name: str) -> ClassTemplate:
        for c in self.classes:
            if c.name == name:
                return c
        raise ConfigError(f"unknown class {name!r}")

    def validate(self) -> None:
        if len(self.bands) < 2:
            raise ConfigError("need at least 2 bands")
        if not self.classes:
            raise ConfigError("need at least one class")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        lo, hi = self.anchor_range
        if not 0 <= lo < hi <= self.steps:
            raise ConfigError(f"anchor_range {self.anchor_range} outside [0, {self.steps}]")
        names = [c.name for c in self.classes]
        by_sample: dict[int, list[EventSpec]] = {}
        for e in self.events:
            if e.kind not in ANOMALY_KINDS:
                raise ConfigError(f"unknown event kind {e.kind!r}")
            if not 0 <= e.sample < self.n_samples:
                raise ConfigError(f"event refers to sample {e.sample} of {self.n_samples}")
            if not 0 <= e.start < e.end <= self.steps:
                raise ConfigError(f"event interval [{e.start}, {e.end}) outside [0, {self.steps})")
            if e.kind == "temporal_spectral":
                if e.new_label not in names:
                    raise ConfigError(f"temporal_spectral event needs a known new_label, got {e.new_label!r}")
            elif not e.bands:
                raise ConfigError(f"{e.kind} event needs affected bands")
            if e.kind == "spectral" and len(e.bands) < 2:
                raise ConfigError("spectral event needs at least 2 bands")
            if any(not 0 <= b < len(self.bands) for b in e.bands):
                raise ConfigError(f"event bands {e.bands} out of range")
            by_sample.setdefault(e.sample, []).append(e)
        for evs in by_sample.values():
            evs = sorted(evs, key=lambda e: e.start)
            for a, b in zip(evs, evs[1:]):
                if b.start < a.end:
                    raise ConfigError(f"overlapping events [{a.start},{a.end}) and [{b.start},{b.end})")
            if evs[0].start < hi:
                # events must leave every possible anchor position untouched
                for e in evs:
                    if e.start < hi and e.end > lo:
                        raise ConfigError(
                            f"event [{e.start}, {e.end}) may contain the anchor (anchor_range {self.anchor_range})"
                        )


def sample_class(cfg: ScenarioConfig, index: int) -> ClassTemplate:
    return cfg.classes[index // cfg.samples_per_class]


def clean_template(cfg: ScenarioConfig, index: int) -> np.ndarray:
    """Noise-free values of sample ``index`` including its scripted events."""
    steps = np.arange(cfg.steps, dtype=np.float64)
    tpl = sample_class(cfg, index)
    values = tpl.render(steps, cfg.steps, cfg.period)
    for e in (ev for ev in cfg.events if ev.sample == index):
        sl = slice(e.start, e.end)
        if e.kind == "temporal_spectral":
            values[:, sl] = cfg.class_by_name(e.new_label).render(steps, cfg.steps, cfg.period)[:, sl]
        elif e.kind == "temporal":
            # common level shift and phase shift keep the selected bands mutually correlated
            bands = list(e.bands)
            shifted = tpl.base(steps, cfg.steps) + ClassTemplate(
                tpl.name, tpl.offset, tpl.amplitude, tuple(p + e.phase_shift for p in tpl.phase),
                period=tpl.period,
            ).seasonal(steps, cfg.period)
            values[bands, sl] = shifted[bands, sl] + e.magnitude * cfg.noise_sigma
        else:
            # mirror the seasonal part of all but the first band about its interval mean:
            # interval means are unchanged while the cross-band correlation flips sign
            seasonal = tpl.seasonal(steps, cfg.period)
            for b in e.bands[1:]:
                s = seasonal[b, sl]
                values[b, sl] = values[b, sl] - 2.0 * (s - s.mean())
    return values


def generate_synthetic(cfg: ScenarioConfig, seed: int | None = None) -> SampleSet:
    """Render every sample as class template + white noise and record its change log."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    timestamps = np.arange(cfg.steps, dtype=np.int64) * cfg.spacing
    samples, logs = [], {}
    lo, hi = cfg.anchor_range
    for i in range(cfg.n_samples):
        tpl = sample_class(cfg, i)
        anchor = int(rng.integers(lo, hi))
        noise = rng.normal(0.0, cfg.noise_sigma, size=(len(cfg.bands), cfg.steps))
        sample_id = f"s{i:04d}"
        samples.append(
            TimeSeriesSample(
                values=clean_template(cfg, i) + noise,
                band_names=cfg.bands,
                timestamps=timestamps,
                anchor_index=anchor,
                anchor_label=tpl.name,
                sample_id=sample_id,
            )
        )
        events = []
        for e in sorted((ev for ev in cfg.events if ev.sample == i), key=lambda ev: ev.start):
            if e.kind == "temporal_spectral":
                bands = tuple(range(len(cfg.bands)))
                label = e.new_label
            else:
                bands = e.bands
                label = e.new_label or tpl.name
            events.append(ChangeEvent(e.start, e.end, e.kind, bands, label))
        logs[sample_id] = ChangeLog(tuple(events))
    return SampleSet(tuple(samples), tuple(c.name for c in cfg.classes), logs)


def standard_fixture_config(seed: int = 7) -> ScenarioConfig:
    """The desk-scale scenario: 3 wetland-like classes, 6 bands, 368 steps, 60 samples, 12 events.

    Marsh and farmland share offsets and amplitudes.  Marsh visible bands move
    against its NIR cycle while farmland's move with it (and cycle twice as
    fast), so the two differ in band relationships for most of the year but
    single-step spectra coincide near the seasonal zero crossings.
    """
    classes = [
        {
            "name": "water",
            "offset": [0.10, 0.12, 0.09, 0.06, 0.04, 0.03],
            "amplitude": [0.02, 0.02, 0.02, 0.015, 0.01, 0.01],
            "phase": [0.0] * 6,
        },
        {
            "name": "marsh",
            "offset": [0.06, 0.09, 0.08, 0.30, 0.20, 0.13],
            "amplitude": [0.02, 0.03, 0.04, 0.12, 0.06, 0.05],
            "phase": [3.1416, 3.1416, 3.1416, 0.0, 0.0, 0.0],
        },
        {
            "name": "farmland",
            "offset": [0.06, 0.09, 0.08, 0.30, 0.20, 0.13],
            "amplitude": [0.02, 0.03, 0.04, 0.12, 0.06, 0.05],
            "phase": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            "period": 46.0,
        },
    ]
    # sample index -> class: 0-19 water, 20-39 marsh, 40-59 farmland
    events = [
        {"sample": 1, "start": 150, "end": 270, "kind": "temporal_spectral", "new_label": "marsh"},
        {"sample": 5, "start": 200, "end": 330, "kind": "temporal_spectral", "new_label": "farmland"},
        {"sample": 22, "start": 120, "end": 240, "kind": "temporal_spectral", "new_label": "water"},
        {"sample": 27, "start": 180, "end": 320, "kind": "temporal_spectral", "new_label": "farmland"},
        {"sample": 43, "start": 140, "end": 260, "kind": "temporal_spectral", "new_label": "water"},
        {"sample": 48, "start": 220, "end": 350, "kind": "temporal_spectral", "new_label": "marsh"},
        {"sample": 9, "start": 160, "end": 230, "kind": "temporal", "bands": [3, 4, 5], "magnitude": 6.0},
        {"sample": 31, "start": 130, "end": 200, "kind": "temporal", "bands": [3, 4], "magnitude": -8.0},
        {"sample": 52, "start": 250, "end": 320, "kind": "temporal", "bands": [0, 1, 2], "magnitude": 6.0},
        {"sample": 25, "start": 100, "end": 190, "kind": "spectral", "bands": [3, 4, 5]},
        {"sample": 35, "start": 240, "end": 330, "kind": "spectral", "bands": [3, 4]},
        {"sample": 56, "start": 110, "end": 200, "kind": "spectral", "bands": [3, 5]},
    ]
    return ScenarioConfig.from_dict(
        {
            "bands": list(DEFAULT_BANDS),
            "steps": 368,
            "classes": classes,
            "noise_sigma": 0.006,
            "events": events,
            "seed": seed,
            "samples_per_class": 20,
            "spacing": 4,
            "period": 92.0,
            "anchor_range": [10, 60],
        }
    )
