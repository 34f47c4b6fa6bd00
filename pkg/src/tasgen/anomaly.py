"""Reconstruction-likelihood anomaly scores, detection, and Gibbs-sampling attribution."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import TimeSeriesSample, window_starts
from .errors import ConfigError, ValidationError
from .model import HtsVae, reconstruct
from .nn_utils import make_generator, to_tensor

DEFAULT_QUANTILE = 0.99


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (C, W) per-cell negative log-likelihood
    sample_id: str = ""
    start_index: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValidationError("score matrix must be 2-D (bands x steps)")
        if not np.isfinite(self.scores).all():
            raise ValidationError("score matrix contains non-finite entries")

    @property
    def shape(self):
        return self.scores.shape


def score_window(model: HtsVae, x, L: int = 40, seed: int = 0, sample_id: str = "", start_index: int = 0) -> ScoreMatrix:
    """Per-cell score: minus the Monte Carlo mean of the per-cell log-likelihood."""
    x = np.asarray(x.values if hasattr(x, "values") else x)
    if x.shape != (model.cfg.n_bands, model.cfg.window):
        raise ValidationError(f"window shape {x.shape} does not match model ({model.cfg.n_bands}, {model.cfg.window})")
    _, ll = reconstruct(model, x, L=L, seed=seed)
    return ScoreMatrix(-ll, sample_id, start_index)


def score_windows(model: HtsVae, windows, L: int = 40, seed: int = 0) -> np.ndarray:
    """Batched scoring of a (N, C, W) stack; returns (N, C, W) scores."""
    windows = np.asarray(windows)
    if windows.ndim != 3 or len(windows) == 0:
        raise ValidationError("need a non-empty (N, C, W) window stack")
    _, ll = reconstruct(model, windows, L=L, seed=seed)
    return -ll


def aggregate_overlaps(window_scores: list[ScoreMatrix], n_steps: int) -> np.ndarray:
    """Average each cell's score over every window that contains it."""
    if not window_scores:
        raise ValidationError("no window scores to aggregate")
    C, W = window_scores[0].shape
    total = np.zeros((C, n_steps))
    count = np.zeros(n_steps)
    for sm in window_scores:
        if sm.shape != (C, W):
            raise ValidationError("window scores have inconsistent shapes")
        s = sm.start_index
        if s < 0 or s + W > n_steps:
            raise ValidationError(f"window at {s} falls outside the sample")
        total[:, s:s + W] += sm.scores
        count[s:s + W] += 1
    if (count == 0).any():
        raise ValidationError(f"step {int(np.argmin(count))} is not covered by any window")
    return total / count


def sample_windows(sample: TimeSeriesSample, W: int, stride: int):
    starts = window_starts(sample.n_steps, W, stride, cover_end=True)
    return starts, np.stack([sample.values[:, s:s + W] for s in starts])


def score_sample(model: HtsVae, sample: TimeSeriesSample, stride: int = 1, L: int = 40, seed: int = 0):
    """Aggregated (C, T) scores of one normalized sample plus the per-window matrices."""
    W = model.cfg.window
    if stride < 1 or stride > W:
        raise ValidationError("scoring stride must lie in [1, W]")
    starts, stack = sample_windows(sample, W, stride)
    scores = score_windows(model, stack, L=L, seed=seed)
    mats = [ScoreMatrix(s, sample.sample_id, st) for s, st in zip(scores, starts)]
    return aggregate_overlaps(mats, sample.n_steps), mats


# --------------------------------------------------------------------------- baseline


QUANTILE_GRID = (0.5, 0.9, 0.95, 0.99, 0.995, 0.999)


@dataclass
class BaselineScore:
    b: float
    n_windows: int
    mean: float
    std: float
    quantiles: dict
    cell_scores: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    cells_per_window: int = 1

    @property
    def b_per_cell(self) -> float:
        return self.b / self.cells_per_window

    # per-cell quantiles kept when the raw cell scores are not available (loaded baselines)
    quantile_table: dict = field(default_factory=dict)

    def cell_quantile(self, q: float) -> float:
        if not 0.0 < q < 1.0:
            raise ConfigError("quantile must lie in (0, 1)")
        if len(self.cell_scores):
            return float(np.quantile(self.cell_scores, q))
        if float(q) in self.quantile_table:
            return float(self.quantile_table[float(q)])
        raise ValidationError(f"baseline has no stored per-cell quantile for q={q}")

    def with_quantiles(self, extra=()) -> dict:
        return {float(q): self.cell_quantile(q) for q in sorted(set(QUANTILE_GRID) | set(extra))}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineScore":
        return cls(
            b=float(d["b"]),
            n_windows=int(d["n_windows"]),
            mean=float(d["mean"]),
            std=float(d["std"]),
            quantiles={float(k): float(v) for k, v in d["quantiles"].items()},
            cells_per_window=int(d["cells_per_window"]),
            quantile_table={float(k): float(v) for k, v in d["cell_quantiles"].items()},
        )

    def to_dict(self, extra_quantiles=()) -> dict:
        return {
            "b": self.b,
            "b_per_cell": self.b_per_cell,
            "cells_per_window": self.cells_per_window,
            "n_windows": self.n_windows,
            "mean": self.mean,
            "std": self.std,
            "quantiles": {str(k): v for k, v in self.quantiles.items()},
            "cell_quantiles": {str(q): v for q, v in self.with_quantiles(extra_quantiles).items()},
        }


def baseline_from_scores(window_scores: np.ndarray) -> BaselineScore:
    """Baseline statistics from a (N, C, W) stack of per-cell training scores."""
    window_scores = np.asarray(window_scores, dtype=np.float64)
    if window_scores.ndim != 3 or len(window_scores) == 0:
        raise ValidationError("baseline needs at least one training window")
    sums = window_scores.sum(axis=(1, 2))
    return BaselineScore(
        b=float(sums.mean()),
        n_windows=len(sums),
        mean=float(sums.mean()),
        std=float(sums.std()),
        quantiles={q: float(np.quantile(sums, q)) for q in QUANTILE_GRID},
        cell_scores=window_scores.ravel().copy(),
        cells_per_window=int(window_scores[0].size),
    )


def compute_baseline(model: HtsVae, train_windows, L: int = 40, seed: int = 0) -> BaselineScore:
    """b = (1/N) sum_n sum_{c,t} S0 over the N training windows."""
    windows = np.asarray(train_windows)
    if windows.ndim != 3 or len(windows) == 0:
        raise ValidationError("baseline needs at least one training window")
    return baseline_from_scores(score_windows(model, windows, L=L, seed=seed))


# --------------------------------------------------------------------------- detection


@dataclass(frozen=True)
class DetectionConfig:
    quantile: float = DEFAULT_QUANTILE
    threshold: float | None = None  # explicit per-cell threshold overrides the quantile
    smooth: int = 1  # odd moving-average width applied along time before thresholding
    min_run: int = 1  # flagged-step runs shorter than this are dropped

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise ConfigError("detection quantile must lie in (0, 1)")
        if self.smooth < 1 or self.smooth % 2 == 0:
            raise ConfigError("smoothing width must be a positive odd integer")
        if self.min_run < 1:
            raise ConfigError("min_run must be >= 1")


@dataclass
class AnomalyFlags:
    steps: np.ndarray  # (T,) bool
    cells: np.ndarray  # (C, T) bool
    threshold: float

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=bool)
        self.cells = np.asarray(self.cells, dtype=bool)
        if self.cells.shape[1] != self.steps.shape[0]:
            raise ValidationError("cell and step flags disagree in length")

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "flagged_steps": [int(i) for i in np.flatnonzero(self.steps)],
        }


def moving_average(scores: np.ndarray, width: int) -> np.ndarray:
    if width == 1:
        return scores
    pad = width // 2
    padded = np.pad(scores, ((0, 0), (pad, pad)), mode="edge")
    kernel = np.ones(width) / width
    return np.stack([np.convolve(row, kernel, mode="valid") for row in padded])


def drop_short_runs(flags: np.ndarray, min_run: int) -> np.ndarray:
    if min_run <= 1:
        return flags.copy()
    out = flags.copy()
    t, n = 0, len(flags)
    while t < n:
        if flags[t]:
            end = t
            while end < n and flags[end]:
                end += 1
            if end - t < min_run:
                out[t:end] = False
            t = end
        else:
            t += 1
    return out


def detect(sample_scores: np.ndarray, baseline: BaselineScore | None, cfg: DetectionConfig = DetectionConfig()) -> AnomalyFlags:
    """Threshold aggregated (C, T) scores; a step is flagged iff any of its cells is."""
    scores = np.asarray(sample_scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValidationError("sample scores must be (C, T)")
    if cfg.threshold is not None:
        thr = float(cfg.threshold)
    elif baseline is None:
        raise ValidationError("need a baseline or an explicit threshold")
    else:
        thr = baseline.cell_quantile(cfg.quantile)
    cells = moving_average(scores, cfg.smooth) > thr
    steps = drop_short_runs(cells.any(axis=0), cfg.min_run)
    cells &= steps[None, :]
    return AnomalyFlags(steps, cells, thr)


# --------------------------------------------------------------------------- attribution


@dataclass
class AttributionResult:
    AS: np.ndarray
    S0: np.ndarray
    Sr: np.ndarray
    iterations_used: int
    converged: bool
    anomalous: np.ndarray  # (C, W) bool mask of imputed cells
    imputed: np.ndarray  # final window after imputation
    sweep_means: list = field(default_factory=list)


def _sweep_noise(model: HtsVae, gen: torch.Generator, n: int):
    return model.draw_noise(n, gen)


def gibbs_attribute_batch(
    model: HtsVae,
    windows,
    S0,
    baseline: BaselineScore,
    M: int = 10,
    seed: int = 0,
    cell_threshold: float | None = None,
    quantile: float = DEFAULT_QUANTILE,
    L: int = 40,
) -> list[AttributionResult]:
    """Gibbs imputation over anomalous cells for a stack of windows.

    Windows advance in lockstep through the same raster order of cells, and each
    window draws from its own seeded generator, so a window's trajectory does not
    depend on the rest of the batch beyond float rounding in batched kernels.
    """
    x0 = np.asarray(windows, dtype=np.float64)
    S0 = np.asarray(S0, dtype=np.float64)
    if x0.ndim != 3 or S0.shape != x0.shape:
        raise ValidationError("windows and S0 must be matching (N, C, W) stacks")
    if M < 0:
        raise ValidationError("M must be non-negative")
    N, C, W = x0.shape
    thr = baseline.cell_quantile(quantile) if cell_threshold is None else float(cell_threshold)
    anomalous = S0 > thr
    target = baseline.b_per_cell
    gens = [make_generator(seed + 7919 * i) for i in range(N)]
    cur = to_tensor(x0, model.dtype).clone()
    Sr = S0.copy()
    iters = np.zeros(N, dtype=int)
    done = ~anomalous.any(axis=(1, 2))
    converged = done.copy()
    sweep_means = [[] for _ in range(N)]
    cells = [(c, t) for c in range(C) for t in range(W)]  # band-major raster order
    with torch.no_grad():
        for sweep in range(M):
            active = np.flatnonzero(~done)
            if len(active) == 0:
                break
            # one latent draw per (window, anomalous cell) for this sweep
            noise = {}
            for i in active:
                k = int(anomalous[i].sum())
                eps_t, eps_s = _sweep_noise(model, gens[i], k)
                noise[i] = (eps_t, eps_s, 0)
            for c, t in cells:
                rows = [i for i in active if anomalous[i, c, t]]
                if not rows:
                    continue
                xb = cur[rows].clone()
                # hide the target cell behind the model's own reconstruction before conditioning
                mean_fill, _, _ = model.likelihood(xb)
                xb[:, c, t] = mean_fill[:, c, t]
                eps_t = torch.stack([noise[i][0][noise[i][2]] for i in rows])
                eps_s = torch.stack([noise[i][1][noise[i][2]] for i in rows])
                for i in rows:
                    e_t, e_s, used = noise[i]
                    noise[i] = (e_t, e_s, used + 1)
                mean_x, _, _ = model.likelihood(xb, eps_t, eps_s)
                cur[rows, c, t] = mean_x[:, c, t]
            for i in active:
                # each window rescored with its own seed keeps results independent of the batch
                Sr[i] = -reconstruct(model, cur[i], L=L, seed=seed + 7919 * int(i))[1]
                iters[i] = sweep + 1
                m = float(Sr[i].mean())
                sweep_means[i].append(m)
                if m <= target:
                    done[i] = True
                    converged[i] = True
    # normal cells are returned bit-for-bit; only imputed cells come from the model
    out_x = np.where(anomalous, cur.double().numpy(), x0)
    results = []
    for i in range(N):
        if not anomalous[i].any():
            Sr_i = S0[i].copy()
        else:
            Sr_i = Sr[i]
        results.append(
            AttributionResult(
                AS=S0[i] - Sr_i,
                S0=S0[i].copy(),
                Sr=Sr_i.copy(),
                iterations_used=int(iters[i]),
                converged=bool(converged[i]),
                anomalous=anomalous[i].copy(),
                imputed=out_x[i],
                sweep_means=sweep_means[i],
            )
        )
    return results


def gibbs_attribute(model: HtsVae, x, S0, baseline: BaselineScore, M: int = 10, seed: int = 0, **kw) -> AttributionResult:
    x = np.asarray(x.values if hasattr(x, "values") else x)
    S0 = S0.scores if isinstance(S0, ScoreMatrix) else np.asarray(S0)
    return gibbs_attribute_batch(model, x[None], S0[None], baseline, M=M, seed=seed, **kw)[0]


def band_attribution(AS: np.ndarray) -> np.ndarray:
    """Per-band total attribution, sum over time of AS."""
    return np.asarray(AS).sum(axis=1)


# --------------------------------------------------------------------------- dumps


def write_score_csv(path, rows) -> Path:
    """rows: iterable of (sample_id, S0 (C,T), Sr (C,T), AS (C,T), flagged (C,T))."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("sample_id,band,time_index,s0,sr,as,flagged\n")
        for sid, s0, sr, as_, flagged in rows:
            s0, sr, as_ = (np.asarray(a, dtype=np.float64).tolist() for a in (s0, sr, as_))
            C, T = len(s0), len(s0[0])
            for c in range(C):
                for t in range(T):
                    fh.write(f"{sid},{c},{t},{s0[c][t]!r},{sr[c][t]!r},{as_[c][t]!r},{int(flagged[c, t])}\n")
    return path


def write_detection_json(path, summaries: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summaries, indent=2, sort_keys=True))
    return path
