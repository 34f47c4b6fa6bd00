"""Dynamic relabeling: fused latent features, a small classifier, and the inherit-or-classify rule."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import TimeSeriesSample, window_starts
from .errors import ConfigError, ValidationError
from .model import HtsVae, posterior_means
from .nn_utils import batch_indices, make_optimizer, seeded

FEATURE_MODES = ("full", "only_et", "only_es", "raw")
INHERITED, RELABELED = "inherited", "relabeled"


def feature_dim(model: HtsVae, mode: str) -> int:
    cfg = model.cfg
    dims = {"full": cfg.latent_s + cfg.latent_t, "only_et": cfg.latent_t, "only_es": cfg.latent_s, "raw": cfg.n_bands}
    if mode not in dims:
        raise ValidationError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")
    return dims[mode]


def fuse_features(model: HtsVae, sample: TimeSeriesSample, mode: str = "full", stride: int = 1) -> np.ndarray:
    """(T, dim) per-step features from posterior means averaged over the windows covering each step.

    Each of the W/2 temporal-latent steps is repeated twice to reach per-step resolution.
    ``sample`` must already be normalized with the model's scaler.
    """
    feature_dim(model, mode)
    if mode == "raw":
        return np.asarray(sample.values, dtype=np.float64).T.copy()
    W, T = model.cfg.window, sample.n_steps
    if T < W:
        raise ValidationError("sample shorter than window")
    starts = window_starts(T, W, stride, cover_end=True)
    stack = np.stack([sample.values[:, s:s + W] for s in starts])
    e_t, e_s, _ = posterior_means(model, stack)
    e_t = np.repeat(e_t, 2, axis=2)  # (N, D_t, W)
    parts = {"only_es": [e_s], "only_et": [e_t], "full": [e_s, e_t]}[mode]
    per_window = np.concatenate(parts, axis=1)  # (N, dim, W)
    total = np.zeros((per_window.shape[1], T))
    count = np.zeros(T)
    for s, f in zip(starts, per_window):
        total[:, s:s + W] += f
        count[s:s + W] += 1
    return (total / count).T


# --------------------------------------------------------------------------- significance


@dataclass(frozen=True)
class SignificanceConfig:
    top_fraction: float = 0.1
    fixed_threshold: float | None = None

    def __post_init__(self):
        if not 0.0 < self.top_fraction <= 1.0:
            raise ConfigError("top_fraction must lie in (0, 1]")


def significance_filter(AS, flagged_steps, cfg: SignificanceConfig = SignificanceConfig(), flagged_cells=None) -> np.ndarray:
    """Boolean (T,) mask of flagged steps whose strongest attribution is significant.

    A step qualifies when its max per-cell AS is among the top ``top_fraction`` of
    the positive AS values over the flagged region, or exceeds ``fixed_threshold``.
    """
    AS = np.asarray(AS, dtype=np.float64)
    flagged = np.asarray(flagged_steps, dtype=bool)
    if AS.ndim != 2 or AS.shape[1] != flagged.shape[0]:
        raise ValidationError("AS must be (C, T) with T matching the flags")
    region = np.broadcast_to(flagged[None, :], AS.shape)
    if flagged_cells is not None:
        region = region & np.asarray(flagged_cells, dtype=bool)
    pool = AS[region]
    pool = pool[pool > 0]
    step_max = np.where(region, AS, -np.inf).max(axis=0)
    mask = np.zeros_like(flagged)
    if pool.size:
        k = max(1, math.ceil(cfg.top_fraction * pool.size))
        cutoff = np.sort(pool)[-k]
        mask |= step_max >= cutoff
    if cfg.fixed_threshold is not None:
        mask |= step_max > cfg.fixed_threshold
    return mask & flagged & (step_max > 0)


# --------------------------------------------------------------------------- classifier


@dataclass(frozen=True)
class ClassifierHyper:
    hidden: int = 64
    batch_size: int = 32
    lr: float = 0.002
    lr_decay: float = 0.1
    decay_every: int = 10
    epochs: int = 30
    momentum: float = 0.9
    weight_decay: float = 0.0005
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ConfigError("classifier hyperparameters must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierHyper":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class LightweightClassifier(nn.Module):
    """One hidden layer over standardized features."""

    def __init__(self, n_features: int, class_vocabulary, hidden: int = 64):
        super().__init__()
        self.class_vocabulary = tuple(class_vocabulary)
        self.net = nn.Sequential(nn.Linear(n_features, hidden), nn.ReLU(), nn.Linear(hidden, len(self.class_vocabulary)))
        self.register_buffer("mu", torch.zeros(n_features, dtype=torch.float64))
        self.register_buffer("sd", torch.ones(n_features, dtype=torch.float64))
        self.version = ""

    def logits(self, features) -> torch.Tensor:
        f = torch.as_tensor(np.asarray(features), dtype=torch.float64)
        if f.dim() != 2 or f.shape[1] != self.mu.shape[0]:
            raise ValidationError(f"expected (N, {self.mu.shape[0]}) features, got {tuple(f.shape)}")
        z = ((f - self.mu) / self.sd).to(self.net[0].weight.dtype)
        return self.net(z)

    def predict_proba(self, features) -> np.ndarray:
        with torch.no_grad():
            return torch.softmax(self.logits(features).double(), dim=-1).numpy()

    def predict(self, features) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.predict_proba(features), axis=1)


def train_classifier(features, labels, class_vocabulary, hyper: ClassifierHyper = ClassifierHyper()) -> LightweightClassifier:
    """Weighted cross-entropy training; ``labels`` are class names or vocabulary indices."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValidationError("cannot train classifier on an empty feature set")
    vocab = tuple(class_vocabulary)
    index = {c: i for i, c in enumerate(vocab)}
    y = np.array([index[l] if not isinstance(l, (int, np.integer)) else int(l) for l in labels], dtype=np.int64)
    if len(y) != len(X):
        raise ValidationError("features and labels differ in length")
    if (np.bincount(y, minlength=len(vocab)) > 0).sum() < 2:
        raise ValidationError("cannot train classifier on one class")
    # repeated (feature, label) rows become one row with a multiplicity weight, so
    # duplicating the training set leaves the fitted function unchanged
    rows = np.concatenate([X, y[:, None].astype(np.float64)], axis=1)
    _, first, mult = np.unique(rows, axis=0, return_index=True, return_counts=True)
    order = np.argsort(first)
    X, y, mult = X[first[order]], y[first[order]], mult[order].astype(np.float64)
    counts = np.bincount(y, weights=mult, minlength=len(vocab))
    present = counts > 0
    weights = np.zeros(len(vocab))
    weights[present] = mult.sum() / (present.sum() * counts[present])
    sample_w = torch.from_numpy(weights[y] * mult).float()

    with seeded(hyper.seed):
        clf = LightweightClassifier(X.shape[1], vocab, hyper.hidden)
    mu = np.average(X, axis=0, weights=mult)
    sd = np.sqrt(np.average((X - mu) ** 2, axis=0, weights=mult))
    clf.mu.copy_(torch.from_numpy(mu))
    clf.sd.copy_(torch.from_numpy(np.where(sd > 1e-12, sd, 1.0)))
    Xt = ((torch.from_numpy(X) - clf.mu) / clf.sd).float()
    yt = torch.from_numpy(y)
    loss_fn = nn.CrossEntropyLoss(reduction="none")
    opt, sched = make_optimizer(clf.net.parameters(), hyper)
    rng = np.random.default_rng(hyper.seed)
    clf.train()
    for _ in range(hyper.epochs):
        for idx in batch_indices(len(Xt), hyper.batch_size, rng):
            w = sample_w[idx]
            # inverse-frequency weighted mean, as in a class-weighted cross-entropy
            loss = (loss_fn(clf.net(Xt[idx]), yt[idx]) * w).sum() / w.sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    clf.eval()
    clf.version = classifier_version(clf)
    return clf


def classifier_version(clf: LightweightClassifier) -> str:
    h = hashlib.sha256()
    for k, v in clf.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------- relabeling


@dataclass
class DynamicLabelSequence:
    sample_id: str
    labels: list
    provenance: list
    significant_steps: list = field(default_factory=list)
    classifier_version: str = ""

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "labels": list(self.labels),
            "provenance": list(self.provenance),
            "significant_steps": [int(i) for i in self.significant_steps],
            "classifier_version": self.classifier_version,
        }


def relabel(sample: TimeSeriesSample, flags, significance, classifier: LightweightClassifier | None, features) -> DynamicLabelSequence:
    """Anchor label where a step is not significant, classifier argmax where it is."""
    T = sample.n_steps
    steps = np.asarray(getattr(flags, "steps", flags), dtype=bool)
    sig = np.asarray(significance, dtype=bool)
    if steps.shape != (T,) or sig.shape != (T,):
        raise ValidationError("flag/significance length does not match the sample")
    sig = sig & steps
    labels = [sample.anchor_label] * T
    provenance = [INHERITED] * T
    idx = np.flatnonzero(sig)
    version = ""
    if len(idx):
        if classifier is None:
            raise ValidationError("significant steps need a classifier")
        feats = np.asarray(features)
        if feats.ndim != 2 or feats.shape[0] != T:
            raise ValidationError(f"features cover {feats.shape[0] if feats.ndim else 0} steps, sample has {T}")
        pred = classifier.predict(feats[idx])
        for t, k in zip(idx, pred):
            labels[t] = classifier.class_vocabulary[k]
            provenance[t] = RELABELED
        version = classifier.version
    return DynamicLabelSequence(sample.sample_id, labels, provenance, [int(i) for i in idx], version)


def write_relabel_outputs(out_dir, sequences: list[DynamicLabelSequence]) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for seq in sequences:
        p = out_dir / f"{seq.sample_id}.json"
        p.write_text(json.dumps(seq.to_dict(), indent=1, sort_keys=True))
        paths.append(p)
    agg = out_dir / "dynamic_labels.csv"
    with agg.open("w") as fh:
        fh.write("sample_id,time_index,label,provenance\n")
        for seq in sequences:
            for t, (lab, prov) in enumerate(zip(seq.labels, seq.provenance)):
                fh.write(f"{seq.sample_id},{t},{lab},{prov}\n")
    paths.append(agg)
    return paths
