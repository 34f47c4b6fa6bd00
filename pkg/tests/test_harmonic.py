import numpy as np
import pytest

from tasgen.data import TimeSeriesSample
from tasgen.errors import NumericalError, ValidationError
from tasgen.harmonic import harmonic_baseline_detect, harmonic_design


def sample(values, timestamps=None):
    values = np.atleast_2d(values)
    C, T = values.shape
    ts = np.arange(T) * 8 if timestamps is None else timestamps
    return TimeSeriesSample(values, [f"b{i}" for i in range(C)], ts, 0, "a", "s")


def seasonal(T=120, noise=0.0, seed=0):
    ts = np.arange(T) * 8
    w = 2 * np.pi * (ts - ts[0]) / (ts[-1] - ts[0])
    clean = np.stack([0.4 + 0.1 * np.sin(w), 0.3 + 0.05 * np.cos(2 * w)])
    # bounded noise with standard deviation ``noise``: no cell can reach 3 sigma by chance
    half = noise * np.sqrt(3.0)
    return ts, clean + np.random.default_rng(seed).uniform(-half, half, clean.shape)


def test_pure_sinusoid_has_no_flags():
    ts, values = seasonal()
    flags = harmonic_baseline_detect(sample(values, ts), order=2)
    assert not flags.steps.any()


def test_single_spike_is_the_only_flag():
    sigma = 0.01
    ts, values = seasonal(noise=sigma, seed=3)
    values[1, 57] += 10 * sigma
    flags = harmonic_baseline_detect(sample(values, ts), order=2)
    assert list(np.flatnonzero(flags.steps)) == [57]
    assert flags.cells[1, 57] and not flags.cells[0].any()


def test_order_zero_flags_outliers_from_mean():
    rng = np.random.default_rng(1)
    values = 0.5 + rng.normal(0, 0.01, size=(2, 80))
    values[0, 30] += 0.2
    flags = harmonic_baseline_detect(sample(values), order=0)
    assert list(np.flatnonzero(flags.steps)) == [30]
    assert harmonic_design(np.arange(5), 0).shape == (5, 1)


def test_errors():
    _, values = seasonal(T=6)
    with pytest.raises(ValidationError):
        harmonic_baseline_detect(sample(values), order=2)
    with pytest.raises(ValidationError):
        harmonic_baseline_detect(sample(values), order=-1)
    # period equal to the sampling step aliases every harmonic onto the intercept
    with pytest.raises(NumericalError):
        harmonic_baseline_detect(sample(np.ones((2, 12))), order=1, period=8.0)
