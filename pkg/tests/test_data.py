import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tasgen.data import (
    ChangeEvent,
    ChangeLog,
    MinMaxScaler,
    SampleSet,
    TimeSeriesSample,
    decimate,
    interpolate_missing,
    load_sample_set,
    random_missing_mask,
    save_sample_set,
    sliding_windows,
    window_starts,
)
from tasgen.errors import ConfigError, ParseError, SchemaError, ValidationError
from tasgen.synthetic import ScenarioConfig, generate_synthetic, standard_fixture_config


def make_sample(C=6, T=368, sid="a", anchor=5, label="water", seed=0, bands=None):
    rng = np.random.default_rng(seed)
    return TimeSeriesSample(
        values=rng.random((C, T)),
        band_names=bands or [f"B{i}" for i in range(C)],
        timestamps=np.arange(T) * 4,
        anchor_index=anchor,
        anchor_label=label,
        sample_id=sid,
    )


# ---------------------------------------------------------------- containers


def test_sample_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        TimeSeriesSample(np.zeros((1, 5)), ["a"], np.arange(5), 0, "x", "s")
    with pytest.raises(ValidationError):
        TimeSeriesSample(np.zeros((2, 3)), ["a", "b"], [0, 2, 1], 0, "x", "s")
    with pytest.raises(ValidationError):
        TimeSeriesSample(np.zeros((2, 3)), ["a", "b"], [0, 1, 2], 3, "x", "s")
    with pytest.raises(ValidationError):
        TimeSeriesSample(np.array([[0, np.nan, 1], [0, 0, 0]]), ["a", "b"], [0, 1, 2], 0, "x", "s")


def test_sample_is_immutable_and_copies():
    v = np.ones((2, 4))
    s = TimeSeriesSample(v, ["a", "b"], np.arange(4), 0, "x", "s")
    v[0, 0] = 5
    assert s.values[0, 0] == 1
    with pytest.raises(ValueError):
        s.values[0, 0] = 3


def test_sample_set_schema_checks():
    a = make_sample(sid="a")
    with pytest.raises(SchemaError):
        SampleSet((), ("water",))
    with pytest.raises(SchemaError):
        SampleSet((a, make_sample(sid="b", bands=["X"] * 6)), ("water",))
    with pytest.raises(SchemaError):
        SampleSet((a, make_sample(sid="a")), ("water",))
    with pytest.raises(SchemaError):
        SampleSet((a,), ("marsh",))


def test_change_log_overlap_rejected():
    log = ChangeLog((ChangeEvent(0, 10, "temporal", (1,), "w"), ChangeEvent(5, 12, "temporal", (1,), "w")))
    with pytest.raises(ValidationError):
        log.validate(20)


# ---------------------------------------------------------------- windows


@pytest.mark.parametrize("T,W,stride,count,last", [(368, 30, 1, 339, 338), (30, 30, 1, 1, 0), (368, 30, 30, 12, 330)])
def test_sliding_window_counts(T, W, stride, count, last):
    wins = sliding_windows(make_sample(T=T), W, stride)
    assert len(wins) == count
    assert wins[0].start_index == 0 and wins[-1].start_index == last
    assert all(w.length == W for w in wins)


def test_sliding_window_errors():
    with pytest.raises(ValidationError, match="shorter than window"):
        sliding_windows(make_sample(T=20), 30)
    with pytest.raises(ValidationError, match="must be even"):
        sliding_windows(make_sample(T=40), 31)


def test_sliding_window_count_exhaustive():
    for T in range(2, 65):
        s = make_sample(C=2, T=T, anchor=0)
        for W in range(2, T + 1, 2):
            for stride in range(1, T + 1):
                assert len(sliding_windows(s, W, stride)) == (T - W) // stride + 1


def test_windows_do_not_mutate_sample():
    s = make_sample(T=40)
    before = s.values.copy()
    wins = sliding_windows(s, 10, 3)
    assert not wins[0].values.flags.writeable
    assert np.array_equal(s.values, before)


def test_window_starts_cover_end():
    assert window_starts(10, 4, 4) == [0, 4]
    assert window_starts(10, 4, 4, cover_end=True) == [0, 4, 6]


# ---------------------------------------------------------------- missing data


def _single_band(vals):
    v = np.array([vals, [0.0] * len(vals)], dtype=float)
    return TimeSeriesSample(np.nan_to_num(v), ["a", "b"], np.arange(len(vals)), len(vals) - 1, "x", "s")


def test_interpolate_midpoint():
    s = _single_band([1.0, 0.0, 3.0])
    mask = np.zeros((2, 3), bool)
    mask[0, 1] = True
    assert np.allclose(interpolate_missing(s, mask).values[0], [1, 2, 3])


def test_interpolate_boundary_constant():
    s = _single_band([0.0, 0.0, 5.0, 7.0])
    mask = np.zeros((2, 4), bool)
    mask[0, :2] = True
    assert np.allclose(interpolate_missing(s, mask).values[0], [5, 5, 5, 7])


def test_interpolate_fully_masked_band():
    s = _single_band([1.0, 2.0, 3.0])
    mask = np.zeros((2, 3), bool)
    mask[0] = True
    with pytest.raises(ValidationError, match="'a'"):
        interpolate_missing(s, mask)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 0.9))
def test_interpolate_idempotent_and_keeps_observed(seed, ratio):
    s = make_sample(C=3, T=50, seed=seed)
    mask = random_missing_mask(s, ratio, seed)
    once = interpolate_missing(s, mask)
    twice = interpolate_missing(once, mask)
    assert np.array_equal(once.values, twice.values)
    assert np.array_equal(once.values[~mask], s.values[~mask])


def test_random_mask_counts_and_determinism():
    s = make_sample(T=100, anchor=7)
    m = random_missing_mask(s, 0.3, seed=1)
    assert m[0].sum() == 30 and (m == m[0]).all()
    assert np.array_equal(random_missing_mask(s, 0.5, 3), random_missing_mask(s, 0.5, 3))


def test_random_mask_never_hits_anchor():
    for seed in range(200):
        s = make_sample(C=2, T=20, anchor=seed % 20)
        assert not random_missing_mask(s, 0.1 if seed % 2 else 0.9, seed)[:, s.anchor_index].any()
    assert random_missing_mask(make_sample(C=2, T=20), 0.9, 0)[0].sum() == 18


# ---------------------------------------------------------------- decimation


def test_decimate_lengths():
    s = make_sample(T=368, anchor=13)
    half = decimate(s, 2)
    assert half.n_steps == 184 and np.array_equal(half.timestamps, s.timestamps[::2])
    eighth = decimate(s, 8, min_length=30)
    assert eighth.n_steps == len(range(0, 368, 8)) == 46
    assert half.anchor_index == 7  # 13/2 = 6.5 rounds to 7


def test_decimate_rejects():
    s = make_sample(T=368)
    with pytest.raises(ValidationError):
        decimate(s, 1)
    with pytest.raises(ValidationError):
        decimate(make_sample(T=100), 8, min_length=30)


def test_decimate_composes():
    s = make_sample(T=368, anchor=40)
    a = decimate(decimate(s, 2, min_length=2), 2, min_length=2)
    b = decimate(s, 4, min_length=2)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.timestamps, b.timestamps)


# ---------------------------------------------------------------- IO


def test_csv_dir_roundtrip(tmp_path):
    ss = generate_synthetic(standard_fixture_config(), seed=3)
    small = SampleSet(ss.samples[:3], ss.class_vocabulary, {k: ss.change_logs[k] for k in ("s0000", "s0001", "s0002")})
    save_sample_set(small, tmp_path / "d", "csv_dir")
    back = load_sample_set(tmp_path / "d")
    assert len(back) == 3 and back.samples[0].n_bands == 6 and back.samples[0].n_steps == 368
    for a, b in zip(small.samples, back.samples):
        assert a == b
    assert back.change_logs == small.change_logs


def test_json_roundtrip(tmp_path):
    ss = generate_synthetic(standard_fixture_config(), seed=3)
    p = save_sample_set(ss, tmp_path / "s.json")
    back = load_sample_set(p)
    assert all(a == b for a, b in zip(ss.samples, back.samples))
    assert back.class_vocabulary == ss.class_vocabulary and back.change_logs == ss.change_logs


def test_load_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(SchemaError, match="no samples found"):
        load_sample_set(tmp_path / "empty")
    d = tmp_path / "mixed"
    d.mkdir()
    for sid, bands in (("a", "Blue,Green"), ("b", "Blue,Red")):
        (d / f"{sid}.csv").write_text(f"timestamp,{bands}\n0,0.1,0.2\n4,0.1,0.2\n")
        (d / f"{sid}.meta").write_text(f"sample_id={sid}\nanchor_index=0\nanchor_label=w\n")
    with pytest.raises(SchemaError):
        load_sample_set(d)
    (d / "b.csv").write_text("timestamp,Blue,Green\n0,0.1,0.2\n4,0.1\n")
    with pytest.raises(ParseError, match="b.csv:3"):
        load_sample_set(d)
    (d / "b.csv").write_text("timestamp,Blue,Green\n4,0.1,0.2\n0,0.1,0.2\n")
    with pytest.raises(ValidationError, match="increasing"):
        load_sample_set(d)
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"samples\": [\n")
    with pytest.raises(ParseError, match="bad.json"):
        load_sample_set(bad)


def test_csv_band_order_normalized(tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    (d / "a.csv").write_text("timestamp,Blue,Green\n0,0.1,0.2\n4,0.3,0.4\n")
    (d / "b.csv").write_text("timestamp,Green,Blue\n0,0.2,0.1\n4,0.4,0.3\n")
    for sid in "ab":
        (d / f"{sid}.meta").write_text(f"sample_id={sid}\nanchor_index=0\nanchor_label=w\n")
    ss = load_sample_set(d)
    assert np.array_equal(ss.samples[0].values, ss.samples[1].values)


def test_scaler_roundtrip():
    s = make_sample()
    sc = MinMaxScaler.fit([s])
    out = sc.transform(s).values
    assert np.allclose(out.min(axis=1), 0) and np.allclose(out.max(axis=1), 1)
    assert np.array_equal(MinMaxScaler.from_dict(json.loads(json.dumps(sc.to_dict()))).transform(s).values, out)


# ---------------------------------------------------------------- synthetic generator


def _tiny_scenario(events=(), noise=0.01):
    return ScenarioConfig.from_dict(
        {
            "bands": 6,
            "steps": 368,
            "noise_sigma": noise,
            "classes": [
                {"name": "water", "offset": [0.1] * 6, "amplitude": [0.02] * 6},
                {"name": "marsh", "offset": [0.06, 0.09, 0.08, 0.3, 0.2, 0.13], "amplitude": [0.02, 0.03, 0.04, 0.12, 0.06, 0.05],
                 "phase": [3.1416, 3.1416, 3.1416, 0, 0, 0]},
            ],
            "events": list(events),
        }
    )


def test_generator_no_events_is_template_plus_noise():
    cfg = _tiny_scenario(noise=0.0)
    ss = generate_synthetic(cfg, seed=1)
    steps = np.arange(368.0)
    for tpl, s in zip(cfg.classes, ss.samples):
        assert ss.change_log(s.sample_id).events == ()
        assert np.allclose(s.values, tpl.render(steps, 368, cfg.period))


def test_generator_records_class_switch():
    cfg = _tiny_scenario([{"sample": 1, "start": 120, "end": 200, "kind": "temporal_spectral", "new_label": "water"}])
    ss = generate_synthetic(cfg, seed=1)
    (ev,) = ss.change_log("s0001").events
    assert (ev.start, ev.end, ev.kind, ev.new_label) == (120, 200, "temporal_spectral", "water")


def test_generator_spectral_event_statistics():
    sigma = 0.006
    cfg = _tiny_scenario([{"sample": 1, "start": 100, "end": 190, "kind": "spectral", "bands": [3, 4]}], noise=sigma)
    ss = generate_synthetic(cfg, seed=5)
    clean = generate_synthetic(_tiny_scenario(noise=0.0), seed=5).samples[1].values
    v = ss.samples[1].values[:, 100:190]
    c = clean[:, 100:190]
    assert np.all(np.abs(v[[3, 4]].mean(axis=1) - c[[3, 4]].mean(axis=1)) < sigma)
    change = abs(np.corrcoef(v[3], v[4])[0, 1] - np.corrcoef(c[3], c[4])[0, 1])
    assert change > 0.5


def test_generator_deterministic_and_validates():
    cfg = standard_fixture_config()
    a, b = generate_synthetic(cfg, seed=11), generate_synthetic(cfg, seed=11)
    assert all(x == y for x, y in zip(a.samples, b.samples))
    with pytest.raises(ConfigError):
        _tiny_scenario([
            {"sample": 0, "start": 100, "end": 150, "kind": "temporal", "bands": [0]},
            {"sample": 0, "start": 140, "end": 160, "kind": "temporal", "bands": [0]},
        ])
    with pytest.raises(ConfigError, match="anchor"):
        _tiny_scenario([{"sample": 0, "start": 20, "end": 80, "kind": "temporal", "bands": [0]}])


def test_standard_fixture_shape():
    cfg = standard_fixture_config()
    ss = generate_synthetic(cfg)
    assert len(ss) == 60 and ss.samples[0].values.shape == (6, 368)
    kinds = {ev.kind for log in ss.change_logs.values() for ev in log.events}
    assert kinds == {"temporal", "spectral", "temporal_spectral"}
    assert sum(len(log.events) for log in ss.change_logs.values()) == 12
    # temporal events sit at least 3 noise standard deviations away from the template
    assert min(abs(e.magnitude) for e in cfg.events if e.kind == "temporal") >= 3
    assert math.isclose(cfg.period, 92.0)
