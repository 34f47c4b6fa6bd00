"""Least-squares harmonic regression baseline used for harness sanity checks."""
from __future__ import annotations

import numpy as np

from .anomaly import AnomalyFlags
from .data import TimeSeriesSample
from .errors import NumericalError, ValidationError


def harmonic_design(timestamps: np.ndarray, order: int, period: float | None = None) -> np.ndarray:
    ts = np.asarray(timestamps, dtype=np.float64)
    if period is None:
        period = float(ts[-1] - ts[0]) or 1.0
    w = 2.0 * np.pi * (ts - ts[0]) / period
    cols = [np.ones_like(w)]
    for k in range(1, order + 1):
        cols += [np.sin(k * w), np.cos(k * w)]
    return np.stack(cols, axis=1)


def harmonic_baseline_detect(
    sample: TimeSeriesSample, order: int = 2, k_sigma: float = 3.0, period: float | None = None
) -> AnomalyFlags:
    """Flag steps whose residual from a per-band harmonic fit exceeds k_sigma residual stds.

    The default period is the timestamp range, so harmonic k completes k cycles over the sample.
    """
    if order < 0:
        raise ValidationError("order must be non-negative")
    if sample.n_steps < 4 * order:
        raise ValidationError("need at least 4*order time steps")
    X = harmonic_design(np.asarray(sample.timestamps), order, period)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise NumericalError("singular harmonic design matrix")
    Y = np.asarray(sample.values, dtype=np.float64).T  # (T, C)
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    sd = resid.std(axis=0, ddof=X.shape[1] if len(Y) > X.shape[1] else 0)
    # residual spread at rounding level means the fit is exact: nothing to flag
    tol = 1e-9 * max(1.0, float(np.abs(Y).max()))
    cells = (np.abs(resid) > k_sigma * np.where(sd > tol, sd, np.inf)).T
    return AnomalyFlags(cells.any(axis=0), cells, float(k_sigma))
