"""Degraded-input protocols scored with the already-trained models."""
from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

from .data import SampleSet, decimate, interpolate_missing, random_missing_mask
from .errors import ValidationError
from .pipeline import EvaluationReport, PipelineRun, write_json

DEFAULT_PROTOCOLS = ("full", "decimate:2", "decimate:4", "decimate:8", "missing:0.1", "missing:0.3", "missing:0.5")


def parse_protocol(desc: str) -> tuple[str, float]:
    if desc == "full":
        return "full", 1
    kind, _, arg = desc.partition(":")
    if kind == "decimate" and arg in ("2", "4", "8"):
        return kind, int(arg)
    if kind == "missing":
        try:
            ratio = float(arg)
        except ValueError:
            ratio = -1.0
        if 0.0 <= ratio < 1.0:
            return kind, ratio
    raise ValidationError(f"unknown robustness protocol {desc!r}")


def degrade(run: PipelineRun, desc: str) -> tuple[SampleSet, int]:
    """Apply a protocol to the raw samples; returns the degraded set and its decimation factor."""
    kind, arg = parse_protocol(desc)
    raw = run.raw
    if kind == "full":
        return raw, 1
    if kind == "decimate":
        W = run.model_config.window
        # ground truth is read from the raw change logs at evaluation, so the thinned set carries none
        thinned = tuple(decimate(s, arg, min_length=W) for s in raw.samples)
        return replace(raw, samples=thinned, change_logs={}), arg

    def occlude(s):
        mask = random_missing_mask(s, arg, seed=run.sample_seed(s.sample_id))
        return interpolate_missing(s, mask)

    return raw.map_samples(occlude), 1


def run_protocol(run: PipelineRun, desc: str) -> EvaluationReport:
    degraded, factor = degrade(run, desc)
    norm = run.scaler.transform_set(degraded)
    scores = run.score_set(norm)
    flags = run.detect_set(norm, scores)
    rows = run.step_rows(norm, flags, labels=None, decimation=factor)
    report = run.evaluate_rows(rows, protocol=desc)
    if desc == "full":
        # identical inputs and seeds: the base report already holds every metric for this protocol
        base = run.report()
        if abs(base.f1_a - report.f1_a) > 1e-12:
            raise ValidationError("full-observation rerun disagrees with the base pipeline report")
        return replace(base, protocol="full")
    # relabeling is not rerun under degraded inputs; only detection metrics are meaningful
    return replace(report, f1_s=None, oa=None, kappa=None, per_class={}, confusion={})


def robustness_suite(run: PipelineRun, protocols=DEFAULT_PROTOCOLS, out_subdir: str = "robustness"):
    """One report per protocol; a failing protocol is recorded and the suite moves on."""
    out = Path(run.out) / out_subdir
    results, paths = [], []
    for desc in protocols:
        try:
            rep = run_protocol(run, desc)
            doc = rep.to_dict()
        except Exception as exc:  # recorded per protocol, not fatal to the suite
            rep, doc = None, {"protocol": desc, "error": f"{type(exc).__name__}: {exc}"}
        results.append((desc, rep, doc.get("error")))
        paths.append(write_json(out / f"{desc.replace(':', '_')}.json", doc))
    table = out / "table.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["protocol", "f1_a", "f1_s", "oa", "kappa", "error"])
        for desc, rep, err in results:
            if rep is None:
                w.writerow([desc, "", "", "", "", err])
            else:
                fmt = lambda v: "" if v is None else repr(float(v))
                w.writerow([desc, fmt(rep.f1_a), fmt(rep.f1_s), fmt(rep.oa), fmt(rep.kappa), ""])
    paths.append(table)
    run._record("robustness", paths)
    return results


def load_robustness_table(out_dir, subdir: str = "robustness") -> dict:
    out = {}
    with open(Path(out_dir) / subdir / "table.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["protocol"]] = row
    return out
