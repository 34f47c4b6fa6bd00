import numpy as np
import pytest

from tasgen.anomaly import (
    BaselineScore,
    DetectionConfig,
    ScoreMatrix,
    aggregate_overlaps,
    band_attribution,
    baseline_from_scores,
    compute_baseline,
    detect,
    gibbs_attribute,
    gibbs_attribute_batch,
    score_window,
    score_windows,
    write_score_csv,
)
from tasgen.config import ModelConfig, TrainingHyper
from tasgen.errors import ConfigError, ValidationError
from tasgen.model import HtsVae, train

C, W = 4, 30


def sine_windows(n, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(W)
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    base = 0.5 + 0.2 * np.sin(2 * np.pi * t / W + phase + 0.7 * np.arange(C)[None, :, None])
    return base + rng.normal(0, 0.01, size=(n, C, W))


@pytest.fixture(scope="module")
def trained():
    windows = sine_windows(256, seed=0)
    cfg = ModelConfig(n_bands=C, window=W, latent_t=2, conv_hidden=16, gru_hidden=16, prior_hidden=16, head_hidden=16)
    model = HtsVae(cfg, seed=0)
    model.init_output_variance(windows)
    model = train(model, windows, TrainingHyper(epochs=15, batch_size=32, optimizer="adam", lr=0.005))
    baseline = compute_baseline(model, windows[:64], L=8)
    return model, windows, baseline


# --------------------------------------------------------------------------- scores


def test_score_window_shape_determinism_and_errors(trained):
    model, windows, _ = trained
    a = score_window(model, windows[0], L=8, seed=3, sample_id="s", start_index=4)
    b = score_window(model, windows[0], L=8, seed=3)
    assert a.shape == (C, W) and a.sample_id == "s" and a.start_index == 4
    assert np.array_equal(a.scores, b.scores)
    with pytest.raises(ValidationError):
        score_window(model, windows[0][:, :20])


def test_impulse_raises_cell_score(trained):
    model, windows, _ = trained
    sigma = windows[:, 2].std()
    for i in range(5):
        x = sine_windows(1, seed=100 + i)[0]
        hit = x.copy()
        hit[2, 10] += 5 * sigma
        before = score_window(model, x, L=40, seed=i).scores[2, 10]
        after = score_window(model, hit, L=40, seed=i).scores[2, 10]
        assert after > before


def test_held_in_windows_score_near_baseline(trained):
    model, windows, baseline = trained
    sums = score_windows(model, windows[:64], L=8).sum(axis=(1, 2))
    assert np.mean(sums <= baseline.b + 2 * baseline.std) >= 0.9


def test_score_matrix_rejects_non_finite():
    with pytest.raises(ValidationError):
        ScoreMatrix(np.array([[0.0, np.nan]]))
    with pytest.raises(ValidationError):
        ScoreMatrix(np.zeros(3))


# --------------------------------------------------------------------------- aggregation


def test_aggregate_non_overlapping_is_identity():
    rng = np.random.default_rng(0)
    mats = [ScoreMatrix(rng.random((2, 3)), "s", s) for s in (0, 3, 6)]
    out = aggregate_overlaps(mats, 9)
    assert np.array_equal(out, np.concatenate([m.scores for m in mats], axis=1))


def test_aggregate_constant_windows_give_constant_output():
    mats = [ScoreMatrix(np.full((2, 4), 1.5), "s", s) for s in range(7)]
    assert np.array_equal(aggregate_overlaps(mats, 10), np.full((2, 10), 1.5))


def test_aggregate_matches_brute_force():
    rng = np.random.default_rng(1)
    Wn, T = 4, 6
    mats = [ScoreMatrix(rng.normal(size=(3, Wn)), "s", s) for s in range(T - Wn + 1)]
    out = aggregate_overlaps(mats, T)
    for c in range(3):
        for t in range(T):
            vals = [m.scores[c][t - m.start_index] for m in mats if m.start_index <= t < m.start_index + Wn]
            assert abs(out[c, t] - sum(vals) / len(vals)) < 1e-12


def test_aggregate_errors():
    with pytest.raises(ValidationError):
        aggregate_overlaps([], 5)
    with pytest.raises(ValidationError, match="not covered"):
        aggregate_overlaps([ScoreMatrix(np.zeros((2, 2)), "s", 0)], 3)
    with pytest.raises(ValidationError):
        aggregate_overlaps([ScoreMatrix(np.zeros((2, 2)), "s", 2)], 3)


# --------------------------------------------------------------------------- baseline


def test_baseline_single_window():
    s = np.random.default_rng(2).random((1, 3, 4))
    base = baseline_from_scores(s)
    assert base.b == pytest.approx(s.sum(), rel=1e-15) and base.n_windows == 1
    assert base.b_per_cell == pytest.approx(s.mean(), rel=1e-12)


def test_baseline_duplication_invariance():
    s = np.random.default_rng(3).random((7, 3, 4))
    a, b = baseline_from_scores(s), baseline_from_scores(np.concatenate([s, s]))
    assert b.b == pytest.approx(a.b, rel=1e-12)


def test_baseline_matches_brute_force(trained):
    model, windows, _ = trained
    base = compute_baseline(model, windows[:12], L=4, seed=1)
    per = score_windows(model, windows[:12], L=4, seed=1)
    total = 0.0
    for n in range(per.shape[0]):
        for c in range(per.shape[1]):
            for t in range(per.shape[2]):
                total += float(per[n, c, t])
    brute = total / per.shape[0]
    assert abs(base.b - brute) <= 1e-9 * abs(brute)


def test_baseline_serialization_round_trip():
    base = baseline_from_scores(np.random.default_rng(4).random((5, 2, 3)))
    back = BaselineScore.from_dict(base.to_dict(extra_quantiles=(0.75,)))
    assert back.b == base.b and back.cells_per_window == 6
    assert back.cell_quantile(0.99) == base.cell_quantile(0.99)
    assert back.cell_quantile(0.75) == base.cell_quantile(0.75)
    with pytest.raises(ValidationError):
        back.cell_quantile(0.42)


def test_baseline_empty_rejected():
    with pytest.raises(ValidationError):
        baseline_from_scores(np.zeros((0, 2, 3)))


# --------------------------------------------------------------------------- detection


def _bumped_scores(seed=0, T=200, lo=80, hi=110):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(3, T))
    scores[1, lo:hi] += 6.0
    return scores


def test_detect_recovers_injected_interval():
    baseline = baseline_from_scores(np.random.default_rng(9).normal(size=(200, 3, 30)))
    flags = detect(_bumped_scores(), baseline, DetectionConfig(smooth=5, min_run=5))
    truth = np.zeros(200, dtype=bool)
    truth[80:110] = True
    jaccard = (flags.steps & truth).sum() / (flags.steps | truth).sum()
    assert jaccard >= 0.7
    assert np.array_equal(flags.steps, flags.cells.any(axis=0))


def test_detect_quantile_monotone_and_quiet_below_threshold():
    baseline = baseline_from_scores(np.random.default_rng(9).normal(size=(200, 3, 30)))
    scores = _bumped_scores(1)
    loose = detect(scores, baseline, DetectionConfig(quantile=0.5))
    strict = detect(scores, baseline, DetectionConfig(quantile=0.99))
    assert loose.steps.sum() > strict.steps.sum()
    quiet = detect(np.full((3, 50), -10.0), baseline)
    assert not quiet.steps.any() and not quiet.cells.any()


def test_detect_invariant_to_common_offset():
    scores = _bumped_scores(2)
    for smooth, min_run in ((1, 1), (5, 3)):
        a = detect(scores, None, DetectionConfig(threshold=2.0, smooth=smooth, min_run=min_run))
        b = detect(scores + 17.25, None, DetectionConfig(threshold=19.25, smooth=smooth, min_run=min_run))
        assert np.array_equal(a.steps, b.steps) and np.array_equal(a.cells, b.cells)


def test_detect_drops_short_runs_and_records_threshold():
    scores = np.zeros((2, 20))
    scores[0, 3] = 5.0
    scores[1, 10:16] = 5.0
    flags = detect(scores, None, DetectionConfig(threshold=1.0, min_run=3))
    assert list(np.flatnonzero(flags.steps)) == list(range(10, 16))
    assert flags.to_dict() == {"threshold": 1.0, "flagged_steps": list(range(10, 16))}


def test_detection_config_validation():
    for kw in ({"quantile": 0.0}, {"quantile": 1.0}, {"smooth": 2}, {"min_run": 0}):
        with pytest.raises(ConfigError):
            DetectionConfig(**kw)
    with pytest.raises(ValidationError):
        detect(np.zeros((2, 5)), None)


# --------------------------------------------------------------------------- attribution


def _injected(seed, sigma):
    x = sine_windows(1, seed=500 + seed)[0]
    x[2, 10:15] += 5 * sigma
    return x


def test_fully_normal_window_gets_zero_attribution(trained):
    model, windows, baseline = trained
    x = windows[1]
    S0 = score_window(model, x, L=8).scores
    res = gibbs_attribute(model, x, S0, baseline, M=10, cell_threshold=1e9, L=8)
    assert np.array_equal(res.AS, np.zeros_like(S0))
    assert res.iterations_used == 0 and res.converged


def test_zero_sweeps_leave_scores(trained):
    model, windows, baseline = trained
    x = _injected(0, windows[:, 2].std())
    S0 = score_window(model, x, L=8).scores
    res = gibbs_attribute(model, x, S0, baseline, M=0, L=8)
    assert res.anomalous.any()
    assert np.array_equal(res.AS, np.zeros_like(S0))
    assert not res.converged and res.iterations_used == 0


def test_attribution_identities_and_normal_cells_untouched(trained):
    model, windows, baseline = trained
    x = _injected(1, windows[:, 2].std())
    S0 = score_window(model, x, L=8).scores
    res = gibbs_attribute(model, x, S0, baseline, M=4, seed=2, L=8)
    assert np.array_equal(res.AS, res.S0 - res.Sr)
    assert res.iterations_used <= 4
    normal = ~res.anomalous
    assert np.array_equal(res.imputed[normal], np.asarray(x, dtype=np.float64)[normal])
    assert band_attribution(res.AS).shape == (C,)


def test_attribution_determinism_and_batch_independence(trained):
    model, windows, baseline = trained
    sigma = windows[:, 2].std()
    xs = np.stack([_injected(i, sigma) for i in range(3)])
    S0 = score_windows(model, xs, L=8)
    batch = gibbs_attribute_batch(model, xs, S0, baseline, M=3, seed=5, L=8)
    again = gibbs_attribute_batch(model, xs, S0, baseline, M=3, seed=5, L=8)
    for a, b in zip(batch, again):
        assert np.array_equal(a.AS, b.AS) and a.iterations_used == b.iterations_used
    single = gibbs_attribute(model, xs[2], S0[2], baseline, M=3, seed=5 + 7919 * 2, L=8)
    # batched float32 kernels may round differently from a batch of one
    assert np.allclose(single.AS, batch[2].AS, rtol=0, atol=1e-5)
    assert np.array_equal(single.anomalous, batch[2].anomalous)


def test_monotone_relief(trained):
    model, windows, baseline = trained
    sigma = windows[:, 2].std()
    xs = np.stack([_injected(i, sigma) for i in range(20)])
    S0 = score_windows(model, xs, L=16)
    results = gibbs_attribute_batch(model, xs, S0, baseline, M=4, seed=0, L=16)
    ok = []
    for s0, res in zip(S0, results):
        trace = [float(s0.mean())] + res.sweep_means
        ok.append(all(b <= a + 1e-6 for a, b in zip(trace, trace[1:])))
    assert np.mean(ok) >= 0.9


def test_attribution_input_errors(trained):
    model, windows, baseline = trained
    with pytest.raises(ValidationError):
        gibbs_attribute_batch(model, windows[:2], np.zeros((2, C, W - 2)), baseline)
    with pytest.raises(ValidationError):
        gibbs_attribute(model, windows[0], np.zeros((C, W)), baseline, M=-1)


def test_score_csv_layout(tmp_path):
    s = np.arange(6, dtype=float).reshape(2, 3)
    flagged = np.zeros((2, 3), dtype=bool)
    flagged[1, 2] = True
    path = write_score_csv(tmp_path / "s.csv", [("a", s, s / 2, s / 2, flagged)])
    lines = path.read_text().splitlines()
    assert lines[0] == "sample_id,band,time_index,s0,sr,as,flagged"
    assert lines[-1] == "a,1,2,5.0,2.5,2.5,1" and len(lines) == 7
