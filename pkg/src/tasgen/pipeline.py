"""Stage-by-stage orchestration with on-disk artifacts and content hashes.

Every stage reads what it needs from the output directory when it is not
already in memory, so stages can also be run one at a time from the CLI.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import anomaly as an
from .config import ModelConfig, TrainingHyper
from .data import MinMaxScaler, SampleSet, load_sample_set, save_sample_set, sliding_windows, window_starts
from .embedding import CurationCheckpoint, pretrain_curation
from .errors import ConfigError, TasgenError, ValidationError
from .metrics import ConfusionMatrix, f1_relabel, f1_score, oa_kappa
from .model import HtsVae, load_checkpoint, save_checkpoint, train
from .relabel import (
    FEATURE_MODES,
    ClassifierHyper,
    SignificanceConfig,
    fuse_features,
    relabel,
    significance_filter,
    train_classifier,
    write_relabel_outputs,
)
from .synthetic import ScenarioConfig, generate_synthetic, standard_fixture_config

logger = logging.getLogger(__name__)

STAGES = ("ingest", "pretrain", "train", "score", "detect", "attribute", "relabel", "evaluate")


class StageFailure(TasgenError, RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: str = "tasgen_out"
    seed: int = 0
    # input: a sample-set path, or a synthetic scenario ("standard", a JSON path, or an inline dict)
    data_path: str | None = None
    data_format: str | None = None
    scenario: object = "standard"
    model: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    refine_epochs: int = 20
    trim_z: float = 3.5
    trim_mc: int = 10
    train_stride: int = 8
    score_stride: int = 3
    mc_samples: int = 40
    detection: dict = field(default_factory=dict)
    attribution: dict = field(default_factory=dict)
    significance: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    feature_mode: str = "full"
    feature_stride: int = 3
    classifier_step_stride: int = 2

    def __post_init__(self):
        self.validate()

    # typed views -------------------------------------------------------------
    def model_config(self, n_bands: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "n_bands": n_bands})

    def pretrain_hyper(self) -> TrainingHyper:
        return TrainingHyper.from_dict({"seed": self.seed, **self.training, **self.pretrain})

    def train_hyper(self) -> TrainingHyper:
        return TrainingHyper.from_dict({"seed": self.seed, **self.training})

    def detection_config(self) -> an.DetectionConfig:
        return an.DetectionConfig(**self.detection)

    def attribution_params(self) -> dict:
        out = {"M": 10, "quantile": an.DEFAULT_QUANTILE, "stride": None}
        out.update(self.attribution)
        return out

    def significance_config(self) -> SignificanceConfig:
        return SignificanceConfig(**self.significance)

    def classifier_hyper(self) -> ClassifierHyper:
        return ClassifierHyper.from_dict({"seed": self.seed, **self.classifier})

    def validate(self) -> None:
        def check_keys(name, d, allowed):
            if not isinstance(d, dict):
                raise ConfigError(f"{name} must be a mapping")
            unknown = set(d) - set(allowed)
            if unknown:
                raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")

        check_keys("model", self.model, [f.name for f in fields(ModelConfig) if f.name != "n_bands"])
        check_keys("pretrain", self.pretrain, [f.name for f in fields(TrainingHyper)])
        check_keys("training", self.training, [f.name for f in fields(TrainingHyper)])
        check_keys("detection", self.detection, [f.name for f in fields(an.DetectionConfig)])
        check_keys("attribution", self.attribution, ["M", "quantile", "stride"])
        check_keys("significance", self.significance, [f.name for f in fields(SignificanceConfig)])
        check_keys("classifier", self.classifier, [f.name for f in fields(ClassifierHyper)])
        try:
            mc = self.model_config(2)
            self.pretrain_hyper()
            self.train_hyper()
            self.detection_config()
            self.significance_config()
            self.classifier_hyper()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        W = mc.window
        if self.train_hyper().window != W:
            raise ConfigError("training window must equal the model window")
        for name in ("train_stride", "score_stride", "feature_stride", "classifier_step_stride", "mc_samples", "trim_mc"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.score_stride > W or self.feature_stride > W:
            raise ConfigError("scoring and feature strides must not exceed the window length")
        if self.refine_epochs < 0 or self.trim_z <= 0:
            raise ConfigError("refine_epochs must be >= 0 and trim_z > 0")
        attr = self.attribution_params()
        if attr["M"] < 0 or not 0 < attr["quantile"] < 1:
            raise ConfigError("attribution needs M >= 0 and quantile in (0, 1)")
        if attr["stride"] is not None and not 1 <= attr["stride"] <= W:
            raise ConfigError("attribution stride must lie in [1, W]")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.data_path is None and self.scenario is None:
            raise ConfigError("either data_path or scenario must be given")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("pipeline config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def standard_pipeline_config(output_dir: str = "tasgen_out", **overrides) -> PipelineConfig:
    """Settings tuned for the standard synthetic fixture."""
    base = dict(
        output_dir=output_dir,
        scenario="standard",
        model={"latent_t": 2},
        training={"optimizer": "adam", "epochs": 30},
        pretrain={"epochs": 50},
        refine_epochs=20,
        detection={"quantile": 0.99, "smooth": 5, "min_run": 5},
        significance={"top_fraction": 0.1, "fixed_threshold": 5.0},
    )
    base.update(overrides)
    return PipelineConfig.from_dict(base)


# --------------------------------------------------------------------------- helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def read_json(path: Path):
    if not path.exists():
        raise ValidationError(f"missing artifact {path}; run the earlier stages first")
    return json.loads(path.read_text())


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


@dataclass
class EvaluationReport:
    f1_a: float
    f1_s: float
    oa: float
    kappa: float
    per_class: dict
    confusion: dict
    protocol: str = "full"
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(**d)


def metrics_from_streams(pred_flags, truth_flags, pred_labels, truth_labels, anchor_labels, vocab, protocol="full", metadata=None):
    cm = ConfusionMatrix.from_labels(truth_labels, pred_labels, vocab)
    oa, kappa = oa_kappa(cm)
    return EvaluationReport(
        f1_a=f1_score(pred_flags, truth_flags),
        f1_s=f1_relabel(pred_labels, truth_labels, anchor_labels),
        oa=oa,
        kappa=kappa,
        per_class=cm.per_class(),
        confusion=cm.to_dict(),
        protocol=protocol,
        metadata=metadata or {},
    )


STEP_COLUMNS = ("sample_id", "time_index", "pred_flag", "truth_flag", "anchor_label", "pred_label", "truth_label")


def write_step_table(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        w.writerows(rows)
    return path


def read_step_table(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "pred_flags": np.array([r["pred_flag"] == "1" for r in rows]),
        "truth_flags": np.array([r["truth_flag"] == "1" for r in rows]),
        "anchor_labels": [r["anchor_label"] for r in rows],
        "pred_labels": [r["pred_label"] for r in rows],
        "truth_labels": [r["truth_label"] for r in rows],
    }


# --------------------------------------------------------------------------- the run


class PipelineRun:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self._raw: SampleSet | None = None
        self._scaler: MinMaxScaler | None = None
        self._norm: SampleSet | None = None
        self._models: dict = {}
        self._baselines: dict = {}
        self._scores: dict | None = None
        self._flags: dict | None = None
        self._attribution: dict | None = None
        self._features: dict = {}

    # ---- bookkeeping
    def _record(self, stage: str, paths) -> None:
        hashes_path = self.out / "hashes.json"
        hashes = json.loads(hashes_path.read_text()) if hashes_path.exists() else {}
        hashes[stage] = {str(Path(p).relative_to(self.out)): sha256_file(p) for p in sorted(map(str, paths))}
        write_json(hashes_path, hashes)

    def _log(self, msg: str) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        with (self.out / "run.log").open("a") as fh:
            fh.write(msg + "\n")
        logger.info(msg)

    def run_stage(self, name: str):
        fn = getattr(self, f"stage_{name}")
        t0 = time.perf_counter()
        try:
            paths = fn()
        except Exception as exc:  # abort with the stage name; partial artifacts stay on disk
            self._log(f"stage {name} FAILED: {exc}")
            raise StageFailure(name, exc) from exc
        self._record(name, paths)
        self._log(f"stage {name} done in {time.perf_counter() - t0:.1f}s")
        return paths

    # ---- data
    def _scenario(self) -> ScenarioConfig:
        sc = self.cfg.scenario
        if sc == "standard":
            return standard_fixture_config()
        if isinstance(sc, dict):
            return ScenarioConfig.from_dict(sc)
        return ScenarioConfig.from_json(sc)

    def stage_ingest(self):
        if self.cfg.data_path:
            ss = load_sample_set(self.cfg.data_path, self.cfg.data_format)
        else:
            scenario = self._scenario()
            ss = generate_synthetic(scenario, seed=scenario.seed)
        W = self.cfg.model_config(ss.samples[0].n_bands).window
        short = [s.sample_id for s in ss.samples if s.n_steps < W]
        if short:
            raise ValidationError(f"samples shorter than window: {short[:5]}")
        self._raw = ss
        self._scaler = MinMaxScaler.fit(ss.samples)
        self._norm = None
        return [
            save_sample_set(ss, self.out / "data" / "sample_set.json"),
            write_json(self.out / "data" / "scaler.json", self._scaler.to_dict()),
        ]

    @property
    def raw(self) -> SampleSet:
        if self._raw is None:
            self._raw = load_sample_set(self.out / "data" / "sample_set.json", "single_json")
        return self._raw

    @property
    def scaler(self) -> MinMaxScaler:
        if self._scaler is None:
            self._scaler = MinMaxScaler.from_dict(read_json(self.out / "data" / "scaler.json"))
        return self._scaler

    @property
    def norm(self) -> SampleSet:
        if self._norm is None:
            self._norm = self.scaler.transform_set(self.raw)
        return self._norm

    @property
    def classes(self) -> list[str]:
        present = {s.anchor_label for s in self.raw.samples}
        return [c for c in self.raw.class_vocabulary if c in present]

    def class_seed(self, cls: str) -> int:
        return self.cfg.seed * 1000 + 101 * self.classes.index(cls)

    def class_samples(self, cls: str, sample_set: SampleSet | None = None):
        ss = self.norm if sample_set is None else sample_set
        return [s for s in ss.samples if s.anchor_label == cls]

    def train_windows(self, cls: str):
        W = self.model_config.window
        meta, stack = [], []
        for s in self.class_samples(cls):
            for w in sliding_windows(s, W, self.cfg.train_stride):
                meta.append((s.sample_id, w.start_index))
                stack.append(w.values)
        return meta, np.stack(stack)

    @property
    def model_config(self) -> ModelConfig:
        return self.cfg.model_config(len(self.raw.samples[0].band_names))

    def model_dir(self, cls: str) -> Path:
        return self.out / "models" / _safe(cls)

    # ---- training
    def stage_pretrain(self):
        paths = []
        hyper = self.cfg.pretrain_hyper()
        for cls in self.classes:
            seed = self.class_seed(cls)
            model = HtsVae(self.model_config, seed=seed)
            _, wins = self.train_windows(cls)
            ck = pretrain_curation(model.curation, wins, replace(hyper, seed=hyper.seed + seed))
            d = self.model_dir(cls)
            d.mkdir(parents=True, exist_ok=True)
            torch.save(
                {"format": "tasgen-curation-v1", "state": ck.state, "loss_trace": ck.loss_trace, "converged": ck.converged},
                d / "curation.pt",
            )
            metrics = d / "curation_metrics.csv"
            metrics.write_text("epoch,objective\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(ck.loss_trace)))
            paths += [d / "curation.pt", metrics]
        return paths

    def _load_curation(self, cls: str) -> CurationCheckpoint:
        p = self.model_dir(cls) / "curation.pt"
        if not p.exists():
            raise ValidationError(f"missing artifact {p}; run the pretrain stage first")
        doc = torch.load(p, weights_only=True)
        return CurationCheckpoint(doc["state"], list(doc["loss_trace"]), bool(doc["converged"]))

    def stage_train(self):
        paths = []
        hyper = self.cfg.train_hyper()
        for cls in self.classes:
            seed = self.class_seed(cls)
            d = self.model_dir(cls)
            meta, wins = self.train_windows(cls)
            model = HtsVae(self.model_config, seed=seed)
            model.load_curation(self._load_curation(cls))
            model.scaler = self.scaler
            model.init_output_variance(wins)
            model = train(model, wins, replace(hyper, seed=hyper.seed + seed), metrics_path=d / "train_metrics.csv")
            paths.append(d / "train_metrics.csv")
            # robust trimming: windows whose summed score is an outlier are left out of refinement and the baseline
            sums = an.score_windows(model, wins, L=self.cfg.trim_mc, seed=seed).sum(axis=(1, 2))
            med = float(np.median(sums))
            mad = float(np.median(np.abs(sums - med)) * 1.4826) or 1e-12
            keep = (sums - med) / mad < self.cfg.trim_z
            if self.cfg.refine_epochs and keep.any():
                model = train(
                    model,
                    wins[keep],
                    replace(hyper, epochs=self.cfg.refine_epochs, seed=hyper.seed + seed + 1),
                    metrics_path=d / "refine_metrics.csv",
                )
                paths.append(d / "refine_metrics.csv")
            kept = [i for i in range(len(meta)) if keep[i]]
            trim = {
                "n_windows": len(meta),
                "median": med,
                "mad": mad,
                "z_cut": self.cfg.trim_z,
                "kept": kept,
                "excluded": [[meta[i][0], meta[i][1]] for i in range(len(meta)) if not keep[i]],
            }
            paths.append(write_json(d / "trim.json", trim))
            paths.append(save_checkpoint(model, d / "model.ckpt", extra={"class": cls}))
            self._models[cls] = model
        return paths

    def model(self, cls: str) -> HtsVae:
        if cls not in self._models:
            p = self.model_dir(cls) / "model.ckpt"
            if not p.exists():
                raise ValidationError(f"missing artifact {p}; run the train stage first")
            self._models[cls], _ = load_checkpoint(p)
        return self._models[cls]

    # ---- scoring and detection
    def sample_seed(self, sample_id: str) -> int:
        ids = [s.sample_id for s in self.raw.samples]
        return self.cfg.seed * 100_000 + ids.index(sample_id)

    def _extra_quantiles(self):
        return (self.cfg.detection_config().quantile, self.cfg.attribution_params()["quantile"])

    def stage_score(self):
        paths = []
        for cls in self.classes:
            meta, wins = self.train_windows(cls)
            kept = read_json(self.model_dir(cls) / "trim.json")["kept"]
            base = an.compute_baseline(self.model(cls), wins[kept], L=self.cfg.mc_samples, seed=self.class_seed(cls))
            self._baselines[cls] = base
            paths.append(write_json(self.out / "scores" / f"baseline_{_safe(cls)}.json", base.to_dict(self._extra_quantiles())))
        self._scores = self.score_set(self.norm)
        paths.append(self._write_scores(self.out / "scores" / "scores.csv", self._scores))
        return paths

    def score_set(self, sample_set: SampleSet) -> dict:
        out = {}
        for s in sample_set.samples:
            agg, _ = an.score_sample(
                self.model(s.anchor_label), s, stride=self.cfg.score_stride, L=self.cfg.mc_samples, seed=self.sample_seed(s.sample_id)
            )
            out[s.sample_id] = agg
        return out

    @staticmethod
    def _write_scores(path: Path, scores: dict) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write("sample_id,band,time_index,s0\n")
            for sid, sc in scores.items():
                for c in range(sc.shape[0]):
                    fh.write("".join(f"{sid},{c},{t},{v!r}\n" for t, v in enumerate(sc[c].tolist())))
        return path

    def baseline(self, cls: str) -> an.BaselineScore:
        if cls not in self._baselines:
            self._baselines[cls] = an.BaselineScore.from_dict(read_json(self.out / "scores" / f"baseline_{_safe(cls)}.json"))
        return self._baselines[cls]

    @property
    def scores(self) -> dict:
        if self._scores is None:
            path = self.out / "scores" / "scores.csv"
            if not path.exists():
                raise ValidationError(f"missing artifact {path}; run the score stage first")
            C = len(self.raw.band_names)
            acc = {s.sample_id: np.zeros((C, s.n_steps)) for s in self.raw.samples}
            with path.open() as fh:
                next(fh)
                for line in fh:
                    sid, c, t, v = line.rstrip("\n").split(",")
                    acc[sid][int(c), int(t)] = float(v)
            self._scores = acc
        return self._scores

    def detect_set(self, sample_set: SampleSet, scores: dict) -> dict:
        cfg = self.cfg.detection_config()
        return {s.sample_id: an.detect(scores[s.sample_id], self.baseline(s.anchor_label), cfg) for s in sample_set.samples}

    def stage_detect(self):
        self._flags = self.detect_set(self.norm, self.scores)
        doc = {}
        for sid, fl in self._flags.items():
            d = fl.to_dict()
            d["flagged_cells"] = {str(c): [int(t) for t in np.flatnonzero(fl.cells[c])] for c in range(fl.cells.shape[0])}
            doc[sid] = d
        return [write_json(self.out / "detection" / "flags.json", doc)]

    @property
    def flags(self) -> dict:
        if self._flags is None:
            doc = read_json(self.out / "detection" / "flags.json")
            out = {}
            for s in self.raw.samples:
                d = doc[s.sample_id]
                steps = np.zeros(s.n_steps, dtype=bool)
                steps[d["flagged_steps"]] = True
                cells = np.zeros((len(s.band_names), s.n_steps), dtype=bool)
                for c, ts in d["flagged_cells"].items():
                    cells[int(c), ts] = True
                out[s.sample_id] = an.AnomalyFlags(steps, cells, d["threshold"])
            self._flags = out
        return self._flags

    # ---- attribution
    def stage_attribute(self):
        params = self.cfg.attribution_params()
        W = self.model_config.window
        stride = params["stride"] or W // 2
        AS = {s.sample_id: np.zeros_like(self.scores[s.sample_id]) for s in self.norm.samples}
        summary = {}
        for cls in self.classes:
            model, base = self.model(cls), self.baseline(cls)
            jobs = []
            for s in self.class_samples(cls):
                fl = self.flags[s.sample_id].steps
                if not fl.any():
                    continue
                for st in window_starts(s.n_steps, W, stride, cover_end=True):
                    if fl[st:st + W].any():
                        jobs.append((s, st))
            if not jobs:
                continue
            stack = np.stack([s.values[:, st:st + W] for s, st in jobs])
            S0 = an.score_windows(model, stack, L=self.cfg.mc_samples, seed=self.class_seed(cls))
            results = an.gibbs_attribute_batch(
                model, stack, S0, base, M=params["M"], seed=self.class_seed(cls), quantile=params["quantile"], L=self.cfg.mc_samples
            )
            total, count = {}, {}
            for (s, st), res in zip(jobs, results):
                sid = s.sample_id
                total.setdefault(sid, np.zeros_like(AS[sid]))
                count.setdefault(sid, np.zeros(s.n_steps))
                total[sid][:, st:st + W] += res.AS
                count[sid][st:st + W] += 1
                summary.setdefault(sid, {"windows": []})["windows"].append(
                    {
                        "start": int(st),
                        "iterations": res.iterations_used,
                        "converged": res.converged,
                        "n_anomalous": int(res.anomalous.sum()),
                    }
                )
            for sid in total:
                AS[sid] = total[sid] / np.maximum(count[sid], 1)
        for sid, d in summary.items():
            d["band_attribution"] = an.band_attribution(AS[sid]).tolist()
            d["converged"] = all(w["converged"] for w in d["windows"])
        self._attribution = AS
        rows = (
            (s.sample_id, self.scores[s.sample_id], self.scores[s.sample_id] - AS[s.sample_id], AS[s.sample_id], self.flags[s.sample_id].cells)
            for s in self.norm.samples
        )
        det_summary = {
            sid: {**fl.to_dict(), "converged": summary.get(sid, {}).get("converged", True)} for sid, fl in self.flags.items()
        }
        return [
            an.write_score_csv(self.out / "attribution" / "scores.csv", rows),
            write_json(self.out / "attribution" / "summary.json", summary),
            an.write_detection_json(self.out / "detection" / "detection_summary.json", det_summary),
        ]

    @property
    def attribution(self) -> dict:
        if self._attribution is None:
            path = self.out / "attribution" / "scores.csv"
            if not path.exists():
                raise ValidationError(f"missing artifact {path}; run the attribute stage first")
            C = len(self.raw.band_names)
            acc = {s.sample_id: np.zeros((C, s.n_steps)) for s in self.raw.samples}
            with path.open() as fh:
                next(fh)
                for line in fh:
                    sid, c, t, _s0, _sr, as_, _f = line.rstrip("\n").split(",")
                    acc[sid][int(c), int(t)] = float(as_)
            self._attribution = acc
        return self._attribution

    # ---- relabeling
    def significance(self) -> dict:
        cfg = self.cfg.significance_config()
        return {
            sid: significance_filter(self.attribution[sid], fl.steps, cfg, flagged_cells=fl.cells)
            for sid, fl in self.flags.items()
        }

    def features(self, cls: str, mode: str) -> dict:
        key = (cls, mode)
        if key not in self._features:
            model = self.model(cls)
            self._features[key] = {
                s.sample_id: fuse_features(model, s, mode, stride=self.cfg.feature_stride) for s in self.norm.samples
            }
        return self._features[key]

    def relabel_all(self, mode: str):
        sig = self.significance()
        hyper = self.cfg.classifier_hyper()
        sequences, classifiers = [], {}
        for cls in self.classes:
            feats = self.features(cls, mode)
            X, y = [], []
            for s in self.norm.samples:
                stable = np.flatnonzero(~sig[s.sample_id])[:: self.cfg.classifier_step_stride]
                X.append(feats[s.sample_id][stable])
                y += [s.anchor_label] * len(stable)
            X = np.concatenate(X)
            clf = train_classifier(X, y, self.raw.class_vocabulary, replace(hyper, seed=hyper.seed + self.class_seed(cls)))
            acc = float(np.mean(np.array(clf.class_vocabulary)[clf.predict(X)] == np.array(y)))
            classifiers[cls] = {"version": clf.version, "n_train": len(y), "train_accuracy": acc, "mode": mode}
            for s in self.class_samples(cls):
                sequences.append(relabel(s, self.flags[s.sample_id], sig[s.sample_id], clf, feats[s.sample_id]))
        order = {s.sample_id: i for i, s in enumerate(self.norm.samples)}
        sequences.sort(key=lambda q: order[q.sample_id])
        return sequences, classifiers

    def stage_relabel(self, mode: str | None = None, subdir: str = "relabel"):
        mode = mode or self.cfg.feature_mode
        sequences, classifiers = self.relabel_all(mode)
        paths = write_relabel_outputs(self.out / subdir, sequences)
        paths.append(write_json(self.out / subdir / "classifiers.json", classifiers))
        return paths

    def load_sequences(self, subdir: str = "relabel") -> dict:
        out = {}
        for s in self.raw.samples:
            out[s.sample_id] = read_json(self.out / subdir / f"{s.sample_id}.json")
        return out

    # ---- evaluation
    def step_rows(self, sample_set: SampleSet, flags: dict, labels: dict | None, decimation: int = 1):
        """Rows of the per-step evaluation table; truth comes from the raw change logs."""
        rows = []
        for s in sample_set.samples:
            log = self.raw.change_log(s.sample_id)
            T0 = self.raw.get(s.sample_id).n_steps
            truth_flags = log.anomaly_flags(T0)[::decimation][: s.n_steps]
            truth_labels = log.label_sequence(T0, s.anchor_label)[::decimation][: s.n_steps]
            pred_labels = labels[s.sample_id] if labels is not None else [s.anchor_label] * s.n_steps
            fl = flags[s.sample_id].steps
            for t in range(s.n_steps):
                rows.append((s.sample_id, t, int(fl[t]), int(truth_flags[t]), s.anchor_label, pred_labels[t], truth_labels[t]))
        return rows

    def evaluate_rows(self, rows, protocol: str = "full") -> EvaluationReport:
        cols = list(zip(*rows))
        return metrics_from_streams(
            np.array(cols[2], dtype=bool),
            np.array(cols[3], dtype=bool),
            list(cols[5]),
            list(cols[6]),
            list(cols[4]),
            self.raw.class_vocabulary,
            protocol=protocol,
            metadata={"seed": self.cfg.seed, "config_hash": self.cfg.config_hash()},
        )

    def stage_evaluate(self, subdir: str = "relabel", out_subdir: str = "evaluation"):
        if not self.raw.change_logs:
            raise ValidationError("evaluation needs ground-truth change logs")
        seqs = self.load_sequences(subdir)
        labels = {sid: q["labels"] for sid, q in seqs.items()}
        rows = self.step_rows(self.raw, self.flags, labels)
        table = write_step_table(self.out / out_subdir / "step_labels.csv", rows)
        report = self.evaluate_rows(rows)
        return [table, write_json(self.out / out_subdir / "report.json", report.to_dict())]

    def report(self, out_subdir: str = "evaluation") -> EvaluationReport:
        return EvaluationReport.from_dict(read_json(self.out / out_subdir / "report.json"))


def run_pipeline(cfg: PipelineConfig, stages=STAGES) -> EvaluationReport | None:
    run = PipelineRun(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    write_json(run.out / "config.json", cfg.to_dict())
    for name in stages:
        run.run_stage(name)
    if "evaluate" in stages:
        return run.report()
    return None


def report_from_step_table(path) -> dict:
    """Recompute F1-A and F1-S directly from a persisted step table."""
    t = read_step_table(path)
    return {
        "f1_a": f1_score(t["pred_flags"], t["truth_flags"]),
        "f1_s": f1_relabel(t["pred_labels"], t["truth_labels"], t["anchor_labels"]),
    }
