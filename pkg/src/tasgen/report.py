"""Static report: score traces, attribution bars, label timelines and a metrics table."""
from __future__ import annotations

import csv
import html
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

SVG_SALT = "tasgen"
LABEL_COLORS = ("#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


@dataclass
class ReportResult:
    index: Path
    images: list[Path] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _save(fig: Figure, path: Path) -> Path:
    # fixed salt and no date keep SVG bytes stable across runs
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def _read_cell_csv(path: Path, value_col: str) -> dict:
    """{sample_id: {(band, t): value}} from a long-format per-cell CSV."""
    out: dict = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["sample_id"], {})[(int(row["band"]), int(row["time_index"]))] = float(row[value_col])
    return out


def _to_matrix(cells: dict) -> np.ndarray:
    C = 1 + max(c for c, _ in cells)
    T = 1 + max(t for _, t in cells)
    m = np.zeros((C, T))
    for (c, t), v in cells.items():
        m[c, t] = v
    return m


def _runs(mask) -> list[tuple[int, int]]:
    idx = np.flatnonzero(np.diff(np.concatenate([[0], np.asarray(mask, dtype=int), [0]])))
    return list(zip(idx[::2], idx[1::2]))


def plot_scores(sample_id: str, scores: np.ndarray, flagged_steps, labels, vocab, path: Path) -> Path:
    """Per-band score traces with flagged spans shaded, and a label strip underneath."""
    C, T = scores.shape
    fig = Figure(figsize=(8, 3.6))
    ax, strip = fig.subplots(2, 1, sharex=True, gridspec_kw={"height_ratios": [4, 1]})
    t = np.arange(T)
    for c in range(C):
        ax.plot(t, scores[c], lw=0.8, label=f"band {c}")
    mask = np.zeros(T, dtype=bool)
    mask[[i for i in flagged_steps if 0 <= i < T]] = True
    for a, b in _runs(mask):
        ax.axvspan(a - 0.5, b - 0.5, color="orange", alpha=0.25, lw=0)
    ax.set_ylabel("score")
    ax.set_title(sample_id)
    ax.legend(fontsize=6, ncol=min(C, 6), loc="upper right")
    if labels is not None:
        lut = {name: i for i, name in enumerate(vocab)}
        codes = np.array([[lut.get(lab, -1) for lab in labels]], dtype=float)
        cmap = matplotlib.colors.ListedColormap([LABEL_COLORS[i % len(LABEL_COLORS)] for i in range(max(1, len(vocab)))])
        strip.imshow(np.ma.masked_less(codes, 0), aspect="auto", cmap=cmap, vmin=-0.5, vmax=len(vocab) - 0.5,
                     interpolation="nearest", extent=(-0.5, T - 0.5, 0, 1))
    strip.set_yticks([])
    strip.set_xlabel("time step")
    fig.tight_layout()
    return _save(fig, path)


def plot_attribution(sample_id: str, AS: np.ndarray, path: Path) -> Path:
    """Bar chart of per-band attribution summed over time."""
    totals = AS.sum(axis=1)
    fig = Figure(figsize=(4, 3))
    ax = fig.subplots()
    colors = ["#d62728" if i == int(np.argmax(totals)) else "#7f7f7f" for i in range(len(totals))]
    ax.bar(np.arange(len(totals)), totals, color=colors)
    ax.set_xticks(np.arange(len(totals)))
    ax.set_xlabel("band")
    ax.set_ylabel("sum of AS")
    ax.set_title(sample_id)
    fig.tight_layout()
    return _save(fig, path)


def _metrics_table(report: dict, robustness: list[dict] | None) -> str:
    rows = ["<table>", "<tr><th>metric</th><th>value</th></tr>"]
    for key in ("f1_a", "f1_s", "oa", "kappa"):
        v = report.get(key)
        rows.append(f"<tr><td>{key}</td><td>{'' if v is None else f'{v:.4f}'}</td></tr>")
    rows.append("</table>")
    if robustness:
        rows += ["<h2>Robustness</h2>", "<table>", "<tr><th>protocol</th><th>f1_a</th><th>error</th></tr>"]
        for r in robustness:
            f1 = f"{float(r['f1_a']):.4f}" if r.get("f1_a") else ""
            rows.append(f"<tr><td>{html.escape(r['protocol'])}</td><td>{f1}</td><td>{html.escape(r.get('error', ''))}</td></tr>")
        rows.append("</table>")
    return "\n".join(rows)


def emit_plots(artifacts_dir, out_subdir: str = "report") -> ReportResult:
    """Render whatever artifacts exist; anything missing becomes a warning rather than an error."""
    root = Path(artifacts_dir)
    out = root / out_subdir
    out.mkdir(parents=True, exist_ok=True)
    result = ReportResult(index=out / "index.html")

    def load(rel: str, reader):
        path = root / rel
        if not path.exists():
            result.warnings.append(f"missing artifact: {rel}")
            return None
        try:
            return reader(path)
        except (OSError, ValueError, KeyError) as exc:
            result.warnings.append(f"unreadable artifact {rel}: {exc}")
            return None

    report = load("evaluation/report.json", lambda p: json.loads(p.read_text()))
    scores = load("scores/scores.csv", lambda p: _read_cell_csv(p, "s0"))
    flags = load("detection/flags.json", lambda p: json.loads(p.read_text()))
    attribution = load("attribution/scores.csv", lambda p: _read_cell_csv(p, "as"))
    relabel_dir = root / "relabel"
    if not relabel_dir.is_dir():
        result.warnings.append("missing artifact: relabel/")
    robustness = None
    if (root / "robustness" / "table.csv").exists():
        with (root / "robustness" / "table.csv").open(newline="") as fh:
            robustness = list(csv.DictReader(fh))
    vocab = tuple(report["confusion"]["class_vocabulary"]) if report and "confusion" in report else ()

    figures = []
    for sid in sorted(scores or {}):
        labels = None
        seq_path = relabel_dir / f"{sid}.json"
        if seq_path.exists():
            labels = json.loads(seq_path.read_text())["labels"]
            if not vocab:
                vocab = tuple(sorted(set(labels)))
        steps = (flags or {}).get(sid, {}).get("flagged_steps", [])
        p = plot_scores(sid, _to_matrix(scores[sid]), steps, labels, vocab, out / f"scores_{sid}.svg")
        result.images.append(p)
        figures.append((sid, p))
    bars = []
    for sid in sorted(attribution or {}):
        AS = _to_matrix(attribution[sid])
        if np.any(AS > 0):
            p = plot_attribution(sid, AS, out / f"attribution_{sid}.svg")
            result.images.append(p)
            bars.append((sid, p))

    parts = ["<!DOCTYPE html>", "<html><head><meta charset='utf-8'><title>tasgen report</title></head><body>", "<h1>Metrics</h1>"]
    parts.append(_metrics_table(report, robustness) if report else "<p>no evaluation report</p>")
    parts.append("<h1>Warnings</h1>")
    parts.append("<ul>" + "".join(f"<li>{html.escape(w)}</li>" for w in result.warnings) + "</ul>" if result.warnings else "<p>none</p>")
    if bars:
        parts.append("<h1>Attribution</h1>")
        parts += [f"<img src='{p.name}' alt='attribution {html.escape(sid)}'>" for sid, p in bars]
    if figures:
        parts.append("<h1>Scores and labels</h1>")
        parts += [f"<div><img src='{p.name}' alt='scores {html.escape(sid)}'></div>" for sid, p in figures]
    parts.append("</body></html>")
    result.index.write_text("\n".join(parts) + "\n")
    return result
